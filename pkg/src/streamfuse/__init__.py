"""Multi-stream augmentation-aware CT-to-MRI volume translation."""

__version__ = "0.1.0"

from .augment import AugmentationSpec, RngStream
from .metrics import MetricRecord, composite_loss, dice, psnr3d, ssim3d
from .models import ModelConfig, build, count_params, load_checkpoint, save_checkpoint
from .train import PlateauScheduler, set_global_determinism
from .train import train as train_model
from .volio import PairedSample, Volume, load_volume, make_phantom_pair, save_volume

# note: the training entry point is exported as train_model so the name
# `streamfuse.train` keeps referring to the submodule

__all__ = [
    "AugmentationSpec",
    "MetricRecord",
    "ModelConfig",
    "PairedSample",
    "PlateauScheduler",
    "RngStream",
    "Volume",
    "build",
    "composite_loss",
    "count_params",
    "dice",
    "load_checkpoint",
    "load_volume",
    "make_phantom_pair",
    "psnr3d",
    "save_checkpoint",
    "save_volume",
    "set_global_determinism",
    "ssim3d",
    "train_model",
]
