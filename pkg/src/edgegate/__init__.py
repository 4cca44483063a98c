"""Edge-gated volumetric segmentation with a self-contained float64 autodiff core."""

from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    TensorError,
    backward,
)
from .conv import conv3d, trilinear_upsample
from .edges import (
    EdgeMap,
    boundary_field,
    edges_from_labels,
    gradient_magnitude,
    sobel3d,
    sobel_kernels,
    soft_boundary,
)
from .losses import (
    LossBundle,
    LossWeights,
    balanced_bce,
    consistency_loss,
    dice_loss,
    edge_loss,
    one_hot,
    total_loss,
)
from .nn import Backbone, Conv3d, EdgeGatedLayer, EgModel, GroupNorm, ModelConfig, ResidualBlock
from .optim import Adam, lr_schedule
from .metrics import (
    MetricsRecord,
    composite_dice,
    dice_metric,
    edge_dice,
    foreground_dice,
    mean_foreground_dice,
    per_class_dice,
)
from .data import (
    PhantomSpec,
    VolumeRecord,
    VolumeFormatError,
    generate_phantom,
    load_manifest,
    load_volume,
    normalize_ct,
    normalize_mri,
    save_volume,
    split_dataset,
    write_manifest,
)
from .checkpoint import Checkpoint, CheckpointError, build_model, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainResult, evaluate, predict, train
from .gradcheck import CheckResult, check_gradients, run_suites
from .harness import make_dataset, run_ablation, run_overfit

__version__ = "0.1.0"
