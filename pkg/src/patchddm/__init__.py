"""Patch-trained volumetric diffusion segmentation toolkit."""

from .backend import active_backend, compiled_available
from .gradcheck import GradCheckReport, grad_check
from .metrics import UndefinedDistanceError, dice, hd95
from .optim import AdamWState, adamw_step, init_adamw_state
from .patches import (
    CHANNEL_LAYOUT,
    CenterWeightedSampler,
    PatchSpec,
    build_coordinate_grid,
    extract_patch,
    full_volume_input,
    patch_spec_from_center,
)
from .pipeline import (
    MODES,
    EnsembleResult,
    SampleResult,
    TrainBatch,
    ensemble,
    sample_segmentation,
    training_step,
)
from .schedule import (
    NoiseSchedule,
    StridePlan,
    build_schedule,
    ddim_step,
    forward_noise,
    make_stride_plan,
    mse_loss,
)
from .tensor import (
    Tensor,
    add,
    avg_downsample,
    averaging_combine,
    conv3d,
    groupnorm,
    linear,
    nearest_upsample,
    no_grad,
    silu,
)
from .unet import (
    CostReport,
    ModelParams,
    TimestepEmbedding,
    UNetConfig,
    build_model,
    count_flops_and_peak_memory,
    forward,
)

__version__ = "0.1.0"
