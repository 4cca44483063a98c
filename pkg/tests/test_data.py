"""Phantoms, normalization, splits, and the EGV1 binary format."""

import json
import struct

import numpy as np
import pytest

from edgegate.data import (
    PhantomSpec,
    VolumeFormatError,
    VolumeRecord,
    _ellipsoid_mask,
    decode_volume,
    generate_phantom,
    load_manifest,
    load_volume,
    manifest_records,
    normalize_ct,
    normalize_mri,
    normalize_record,
    save_volume,
    split_dataset,
    write_manifest,
)
from edgegate.edges import edges_from_labels

RNG = np.random.default_rng(17)


def _record(extent=4, num_classes=3, modality="mri-like"):
    labels = RNG.integers(0, num_classes, size=(extent,) * 3)
    image = RNG.normal(size=(1,) + labels.shape)
    return VolumeRecord(
        image=image, labels=labels, num_classes=num_classes, id="r0", modality=modality
    )


def test_volume_record_validation():
    with pytest.raises(VolumeFormatError):
        VolumeRecord(image=np.zeros((2, 2, 2)), labels=np.zeros((2, 2, 2), int), num_classes=2, id="x")
    with pytest.raises(VolumeFormatError):
        VolumeRecord(
            image=np.zeros((1, 2, 2, 2)), labels=np.zeros((3, 2, 2), int), num_classes=2, id="x"
        )
    with pytest.raises(VolumeFormatError):
        VolumeRecord(
            image=np.zeros((1, 2, 2, 2)), labels=np.full((2, 2, 2), 5), num_classes=3, id="x"
        )
    with pytest.raises(VolumeFormatError):
        VolumeRecord(
            image=np.zeros((1, 2, 2, 2)),
            labels=np.zeros((2, 2, 2), int),
            num_classes=2,
            id="x",
            modality="xray",
        )


def test_phantom_is_deterministic():
    spec = PhantomSpec(seed=42)
    a = generate_phantom(spec)
    b = generate_phantom(spec)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = generate_phantom(PhantomSpec(seed=43))
    assert not np.array_equal(a.labels, c.labels)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_phantom_contains_every_class(seed):
    rec = generate_phantom(PhantomSpec(seed=seed))
    present = set(np.unique(rec.labels))
    assert present == {0, 1, 2}


@pytest.mark.parametrize("seed", [0, 5])
def test_phantom_lesions_are_nested_inside_organs(seed):
    """Every deepest-class voxel must be 26-surrounded by organ or lesion voxels."""
    rec = generate_phantom(PhantomSpec(seed=seed))
    labels = rec.labels
    lesion = np.argwhere(labels == 2)
    extent = labels.shape[0]
    for z, y, x in lesion:
        zs = slice(max(z - 1, 0), min(z + 2, extent))
        ys = slice(max(y - 1, 0), min(y + 2, extent))
        xs = slice(max(x - 1, 0), min(x + 2, extent))
        assert np.all(labels[zs, ys, xs] >= 1)


def test_phantom_single_class_spec_is_all_background():
    rec = generate_phantom(PhantomSpec(num_classes=1, seed=0))
    assert rec.labels.max() == 0
    assert edges_from_labels(rec.labels[None], 1).positive_count == 0


def test_phantom_image_tracks_class_means():
    spec = PhantomSpec(seed=9, noise_std=0.01)
    rec = generate_phantom(spec)
    for c in range(3):
        mean = rec.image[0][rec.labels == c].mean()
        assert mean == pytest.approx(spec.class_means[c], abs=0.01)


def test_phantom_spec_validation():
    with pytest.raises(VolumeFormatError):
        PhantomSpec(extent=4)
    with pytest.raises(VolumeFormatError):
        PhantomSpec(num_classes=5)  # more classes than intensity means
    with pytest.raises(VolumeFormatError):
        PhantomSpec(organs=(3, 2))


def test_ellipsoid_lattice_count_near_analytic_volume():
    """Radius-6 ball in a 32-cube: voxel count within 30% of 4/3 pi r^3."""
    mask = _ellipsoid_mask(32, np.array([16.0, 16.0, 16.0]), np.array([6.0, 6.0, 6.0]))
    count = int(mask.sum())
    analytic = 4.0 / 3.0 * np.pi * 6.0**3
    assert 0.7 * analytic <= count <= 1.3 * analytic


def test_normalize_mri_two_point_case():
    image = np.zeros((1, 1, 1, 2))
    image[0, 0, 0] = [2.0, 4.0]
    out = normalize_mri(image)
    np.testing.assert_allclose(out[0, 0, 0], [-1.0, 1.0], atol=1e-12)


def test_normalize_mri_zero_support_and_moments():
    image = RNG.normal(size=(1, 6, 6, 6)) + 3.0
    image[0, :2] = 0.0
    out = normalize_mri(image)
    np.testing.assert_array_equal(out[0, :2], 0.0)
    vals = out[out != 0.0]
    assert vals.mean() == pytest.approx(0.0, abs=1e-9)
    assert vals.std() == pytest.approx(1.0, abs=1e-9)


def test_normalize_mri_is_idempotent_within_tolerance():
    image = RNG.normal(size=(1, 5, 5, 5))
    once = normalize_mri(image)
    twice = normalize_mri(once)
    np.testing.assert_allclose(twice, once, atol=1e-6)


def test_normalize_mri_errors():
    with pytest.raises(VolumeFormatError):
        normalize_mri(np.zeros((1, 2, 2, 2)))
    with pytest.raises(VolumeFormatError):
        normalize_mri(np.full((1, 2, 2, 2), 7.0))  # zero variance


@pytest.mark.parametrize("value,expected", [(500.0, 0.5), (2500.0, 1.0), (-3000.0, -1.0)])
def test_normalize_ct(value, expected):
    assert normalize_ct(np.array([[[[value]]]]))[0, 0, 0, 0] == expected


def test_normalize_record_dispatches_on_modality():
    rec = _record(modality="ct-like")
    np.testing.assert_array_equal(normalize_record(rec), normalize_ct(rec.image))
    rec = generate_phantom(PhantomSpec(seed=1))
    np.testing.assert_array_equal(normalize_record(rec), normalize_mri(rec.image))


def test_split_dataset_80_20():
    records = list(range(10))
    train, val = split_dataset(records, 0.8, seed=0)
    assert len(train) == 8 and len(val) == 2
    assert sorted(train + val) == records
    again = split_dataset(records, 0.8, seed=0)
    assert (train, val) == again
    other = split_dataset(records, 0.8, seed=1)
    assert (train, val) != other


def test_split_dataset_always_keeps_both_sides_non_empty():
    train, val = split_dataset([1, 2], 0.99, seed=0)
    assert len(train) == 1 and len(val) == 1


def test_split_dataset_errors():
    with pytest.raises(VolumeFormatError):
        split_dataset([1], 0.8)
    with pytest.raises(VolumeFormatError):
        split_dataset([1, 2], 1.5)


def test_volume_round_trip_is_identity(tmp_path):
    rec = generate_phantom(PhantomSpec(seed=3))
    path = tmp_path / "vol.egv1"
    save_volume(rec, path)
    back = load_volume(path)
    np.testing.assert_array_equal(back.image, rec.image)  # f32 storage, f32-valued image
    np.testing.assert_array_equal(back.labels, rec.labels)
    assert back.id == rec.id
    assert back.modality == rec.modality
    assert back.spacing == rec.spacing
    assert back.num_classes == rec.num_classes


def test_worked_byte_example_parses_exactly(tmp_path):
    """Hand-assembled 2x2x2 file: fixed header, sorted-key JSON, f32 image, u8 labels."""
    header = (
        b'{"C":1,"D":2,"H":2,"K":2,"W":2,'
        b'"id":"demo","modality":"ct-like","spacing":[1.0,1.0,1.0]}'
    )
    image_values = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5]
    labels_values = [0, 1, 0, 1, 1, 0, 0, 1]
    blob = (
        b"EGV1"
        + struct.pack("<H", 1)
        + struct.pack("<I", len(header))
        + header
        + struct.pack("<8f", *image_values)
        + bytes(labels_values)
    )
    rec = decode_volume(blob)
    assert rec.id == "demo"
    assert rec.modality == "ct-like"
    assert rec.spacing == (1.0, 1.0, 1.0)
    assert rec.num_classes == 2
    np.testing.assert_array_equal(rec.image, np.array(image_values).reshape(1, 2, 2, 2))
    np.testing.assert_array_equal(rec.labels, np.array(labels_values).reshape(2, 2, 2))
    # and the writer regenerates the exact same bytes
    regenerated = VolumeRecord(
        image=np.array(image_values).reshape(1, 2, 2, 2),
        labels=np.array(labels_values).reshape(2, 2, 2),
        num_classes=2,
        id="demo",
        modality="ct-like",
    )
    out = tmp_path / "worked.egv1"
    save_volume(regenerated, out)
    assert out.read_bytes() == blob


def test_corrupted_files_are_rejected(tmp_path):
    rec = _record()
    path = tmp_path / "vol.egv1"
    save_volume(rec, path)
    blob = bytearray(path.read_bytes())

    with pytest.raises(VolumeFormatError, match="magic"):
        decode_volume(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(VolumeFormatError, match="version"):
        decode_volume(bytes(blob[:4]) + struct.pack("<H", 9) + bytes(blob[6:]))
    with pytest.raises(VolumeFormatError, match="truncated"):
        decode_volume(bytes(blob[:8]))
    with pytest.raises(VolumeFormatError, match="size mismatch"):
        decode_volume(bytes(blob[:-3]))
    with pytest.raises(VolumeFormatError, match="size mismatch"):
        decode_volume(bytes(blob) + b"\x00")


def test_out_of_range_labels_are_rejected_at_load(tmp_path):
    rec = _record(num_classes=3)
    path = tmp_path / "vol.egv1"
    save_volume(rec, path)
    blob = bytearray(path.read_bytes())
    blob[-1] = 7  # label beyond K=3
    with pytest.raises(VolumeFormatError, match="labels outside"):
        decode_volume(bytes(blob))


def test_manifest_round_trip(tmp_path):
    recs = [generate_phantom(PhantomSpec(seed=s)) for s in (0, 1, 2)]
    for i, r in enumerate(recs):
        save_volume(r, tmp_path / f"v{i}.egv1")
    write_manifest(
        tmp_path / "manifest.json",
        [("v0.egv1", "train"), ("v1.egv1", "train"), ("v2.egv1", "val")],
        num_classes=3,
    )
    manifest = load_manifest(tmp_path / "manifest.json")
    train = manifest_records(manifest, "train")
    val = manifest_records(manifest, "val")
    assert [r.id for r in train] == [recs[0].id, recs[1].id]
    assert len(val) == 1
    np.testing.assert_array_equal(val[0].labels, recs[2].labels)


def test_manifest_validation(tmp_path):
    bad = tmp_path / "manifest.json"
    bad.write_text(json.dumps({"version": 2, "num_classes": 3, "records": []}))
    with pytest.raises(VolumeFormatError):
        load_manifest(bad)
    bad.write_text(
        json.dumps(
            {"version": 1, "num_classes": 3, "records": [{"path": "x", "split": "test"}]}
        )
    )
    with pytest.raises(VolumeFormatError):
        load_manifest(bad)
