"""Network blocks: residual blocks, edge-gated layers, backbone, full model.

The backbone is an encoder-decoder over R resolution levels with
channel doubling.  It exports one tap per encoder resolution plus the
bottleneck feature map one level below, which seeds the edge stream.
The edge stream runs R stages of residual block -> trilinear upsample
-> edge-gated layer, pairing each gate with the encoder tap at the
resolution it just reached, so it finishes at full resolution with
exactly R gates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .conv import conv3d, trilinear_upsample
from .tensor import ShapeError, Tensor, TensorError

Params = list[tuple[str, Tensor]]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; serialized into checkpoint headers."""

    resolutions: int = 3  # R: encoder levels / edge-gated layers
    base_channels: int = 8  # B: channels at full resolution, doubling per level
    num_classes: int = 3  # K
    groups: int = 8  # group-norm groups, capped per layer at the channel count
    edge_stream: bool = True  # False: plain backbone with its own head
    seed: int = 0
    in_channels: int = 1

    def __post_init__(self):
        if self.resolutions < 1:
            raise TensorError("resolutions must be >= 1")
        if self.base_channels < 1 or self.num_classes < 1 or self.in_channels < 1:
            raise TensorError("channel and class counts must be >= 1")
        if self.groups < 1:
            raise TensorError("groups must be >= 1")

    def to_header(self) -> dict:
        return {
            "R": self.resolutions,
            "B": self.base_channels,
            "K": self.num_classes,
            "groups": self.groups,
            "edge_stream": self.edge_stream,
            "seed": self.seed,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_header(cls, header: dict) -> "ModelConfig":
        return cls(
            resolutions=int(header["R"]),
            base_channels=int(header["B"]),
            num_classes=int(header["K"]),
            groups=int(header["groups"]),
            edge_stream=bool(header["edge_stream"]),
            seed=int(header["seed"]),
            in_channels=int(header.get("in_channels", 1)),
        )


def norm_groups(channels: int, max_groups: int) -> int:
    """Largest divisor of `channels` not exceeding min(max_groups, channels)."""
    cap = min(max_groups, channels)
    for g in range(cap, 0, -1):
        if channels % g == 0:
            return g
    return 1


class Conv3d:
    """Convolution layer with fan-in-scaled uniform weights and zero biases."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
    ):
        fan_in = in_channels * kernel**3
        bound = 1.0 / np.sqrt(fan_in)
        shape = (out_channels, in_channels, kernel, kernel, kernel)
        self.weight = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def parameters(self) -> Params:
        out: Params = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out


class GroupNorm:
    def __init__(self, channels: int, max_groups: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.groups = norm_groups(channels, max_groups)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.gamma, self.beta, self.groups, self.eps)

    def parameters(self) -> Params:
        return [("gamma", self.gamma), ("beta", self.beta)]


def _prefix(prefix: str, params: Params) -> Params:
    return [(f"{prefix}.{name}", p) for name, p in params]


class ConvNormAct:
    """conv3d -> group_norm -> relu.

    The convolution is bias-free: a bias feeding straight into the norm
    is cancelled by the mean subtraction (exactly so for single-channel
    groups), so it would be a dead parameter.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        max_groups: int,
        stride: int = 1,
        padding: int = 0,
    ):
        self.conv = Conv3d(in_channels, out_channels, kernel, rng, stride, padding, bias=False)
        self.norm = GroupNorm(out_channels, max_groups)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))

    def parameters(self) -> Params:
        return _prefix("conv", self.conv.parameters()) + _prefix("norm", self.norm.parameters())


class ResidualBlock:
    """Pre-activation residual block: x + conv(relu(gn(conv(relu(gn(x)))))).

    With all convolution parameters zero the block is the identity map.
    """

    def __init__(self, channels: int, rng: np.random.Generator, max_groups: int):
        self.norm1 = GroupNorm(channels, max_groups)
        # conv1 feeds norm2 directly, so its bias would be dead weight
        self.conv1 = Conv3d(channels, channels, 3, rng, padding=1, bias=False)
        self.norm2 = GroupNorm(channels, max_groups)
        self.conv2 = Conv3d(channels, channels, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(T.relu(self.norm1(x)))
        h = self.conv2(T.relu(self.norm2(h)))
        return T.add(x, h)

    def parameters(self) -> Params:
        return (
            _prefix("norm1", self.norm1.parameters())
            + _prefix("conv1", self.conv1.parameters())
            + _prefix("norm2", self.norm2.parameters())
            + _prefix("conv2", self.conv2.parameters())
        )


class EdgeGatedLayer:
    """Gate edge features by an attention map built from both streams.

    Both inputs go through 1x1x1 projections to one channel; the gate is
    sigmoid(relu(sum)), broadcast across the edge-feature channels:
    out = e * alpha + e.
    """

    def __init__(
        self,
        edge_channels: int,
        main_channels: int,
        resolution: int,
        rng: np.random.Generator,
    ):
        self.proj_e = Conv3d(edge_channels, 1, 1, rng)
        self.proj_m = Conv3d(main_channels, 1, 1, rng)
        self.resolution = resolution

    def __call__(self, e_in: Tensor, m_r: Tensor) -> Tensor:
        if e_in.shape[0] != m_r.shape[0] or e_in.shape[2:] != m_r.shape[2:]:
            raise ShapeError(
                f"stream shapes disagree at resolution {self.resolution}: "
                f"edge {e_in.shape} vs main {m_r.shape}"
            )
        alpha = T.sigmoid(T.relu(T.add(self.proj_e(e_in), self.proj_m(m_r))))
        gated = T.mul(e_in, T.expand_channel(alpha, e_in.shape[1]))
        return T.add(gated, e_in)

    def attention(self, e_in: Tensor, m_r: Tensor) -> Tensor:
        return T.sigmoid(T.relu(T.add(self.proj_e(e_in), self.proj_m(m_r))))

    def parameters(self) -> Params:
        return _prefix("proj_e", self.proj_e.parameters()) + _prefix(
            "proj_m", self.proj_m.parameters()
        )


class Backbone:
    """Encoder-decoder with per-resolution taps.

    taps[r] for r < R is the encoder feature map at extent/2^r; taps[R]
    is the bottleneck feature map at extent/2^R, the coarsest map and
    the first one the decoder upsamples.  Decoder stages upsample,
    concatenate the skip, reduce channels with a 1x1x1 conv, then
    refine with a 3x3x3 conv.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        r_levels = config.resolutions
        b = config.base_channels
        g = config.groups
        self.config = config
        self.stem = ConvNormAct(config.in_channels, b, 3, rng, g, padding=1)
        self.encoder: list[ResidualBlock] = []
        self.down: list[ConvNormAct] = []
        for r in range(r_levels):
            ch = b * 2**r
            self.encoder.append(ResidualBlock(ch, rng, g))
            self.down.append(ConvNormAct(ch, ch * 2, 3, rng, g, stride=2, padding=1))
        self.bottleneck = ResidualBlock(b * 2**r_levels, rng, g)
        self.reduce: list[ConvNormAct] = []
        self.refine: list[ConvNormAct] = []
        for r in range(r_levels - 1, -1, -1):
            ch = b * 2**r
            self.reduce.append(ConvNormAct(ch * 2 + ch, ch, 1, rng, g))
            self.refine.append(ConvNormAct(ch, ch, 3, rng, g, padding=1))

    def __call__(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        r_levels = self.config.resolutions
        if x.ndim != 5:
            raise ShapeError(f"expected [N,C,D,H,W] input, got {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected {self.config.in_channels} input channels, got {x.shape[1]}"
            )
        divisor = 2**r_levels
        for extent in x.shape[2:]:
            if extent < divisor or extent % divisor != 0:
                raise ShapeError(
                    f"spatial extents must be positive multiples of {divisor} "
                    f"for {r_levels} resolution levels, got {x.shape[2:]}"
                )
        h = self.stem(x)
        taps: list[Tensor] = []
        for r in range(r_levels):
            h = self.encoder[r](h)
            taps.append(h)
            h = self.down[r](h)
        d = self.bottleneck(h)
        taps.append(d)
        u = d
        for i, r in enumerate(range(r_levels - 1, -1, -1)):
            u = trilinear_upsample(u, 2)
            u = self.reduce[i](T.concat_channels([u, taps[r]]))
            u = self.refine[i](u)
        return u, taps

    def parameters(self) -> Params:
        out = _prefix("stem", self.stem.parameters())
        for r, (enc, down) in enumerate(zip(self.encoder, self.down)):
            out += _prefix(f"enc{r}", enc.parameters())
            out += _prefix(f"down{r}", down.parameters())
        out += _prefix("bottleneck", self.bottleneck.parameters())
        for i, (red, ref) in enumerate(zip(self.reduce, self.refine)):
            r = self.config.resolutions - 1 - i
            out += _prefix(f"reduce{r}", red.parameters())
            out += _prefix(f"refine{r}", ref.parameters())
        return out


class EgModel:
    """Backbone plus edge stream, edge head, and fusion head.

    With edge_stream=False the model is the plain backbone with a
    1x1x1 classification head (the ablation baseline); forward then
    returns None for the edge logits.
    """

    def __init__(self, config: ModelConfig):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.backbone = Backbone(config, rng)
        r_levels = config.resolutions
        b = config.base_channels
        g = config.groups
        if config.edge_stream:
            self.entry = Conv3d(b * 2**r_levels, b, 1, rng)
            self.stream: list[tuple[ResidualBlock, EdgeGatedLayer]] = []
            for r in range(r_levels - 1, -1, -1):
                block = ResidualBlock(b, rng, g)
                gate = EdgeGatedLayer(b, b * 2**r, r, rng)
                self.stream.append((block, gate))
            self.edge_head = Conv3d(b, 1, 1, rng)
            self.fusion = Conv3d(2 * b, config.num_classes, 1, rng)
            self.head = None
        else:
            self.entry = None
            self.stream = []
            self.edge_head = None
            self.fusion = None
            self.head = Conv3d(b, config.num_classes, 1, rng)

    def edge_stream_forward(self, taps: list[Tensor]) -> tuple[Tensor, Tensor]:
        """Run the edge pathway over backbone taps; returns (features, logits)."""
        if self.entry is None:
            raise TensorError("model was built without an edge stream")
        r_levels = self.config.resolutions
        if len(taps) != r_levels + 1:
            raise ShapeError(f"expected {r_levels + 1} taps, got {len(taps)}")
        e = self.entry(taps[r_levels])
        for (block, gate), r in zip(self.stream, range(r_levels - 1, -1, -1)):
            e = block(e)
            e = trilinear_upsample(e, 2)
            e = gate(e, taps[r])
        return e, self.edge_head(e)

    def __call__(self, x: Tensor) -> tuple[Tensor, Optional[Tensor]]:
        features, taps = self.backbone(x)
        if not self.config.edge_stream:
            return self.head(features), None
        edge_features, edge_logits = self.edge_stream_forward(taps)
        semantic = self.fusion(T.concat_channels([features, edge_features]))
        return semantic, edge_logits

    def parameters(self) -> Params:
        out = _prefix("backbone", self.backbone.parameters())
        if self.config.edge_stream:
            out += _prefix("edge.entry", self.entry.parameters())
            for (block, gate) in self.stream:
                r = gate.resolution
                out += _prefix(f"edge.block{r}", block.parameters())
                out += _prefix(f"edge.gate{r}", gate.parameters())
            out += _prefix("edge.head", self.edge_head.parameters())
            out += _prefix("fusion", self.fusion.parameters())
        else:
            out += _prefix("head", self.head.parameters())
        return out

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def edge_parameter_names(self) -> list[str]:
        """Names of parameters exclusive to the edge head (not the stream)."""
        if self.edge_head is None:
            return []
        return [f"edge.head.{name}" for name, _ in self.edge_head.parameters()]
