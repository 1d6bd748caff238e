"""Seamless patch-level sketch stylization on a small numpy autodiff core."""

from .image import GrayImage, load, save
from .nets import DiscriminatorSpec, GeneratorSpec, ModelParams, load_checkpoint, save_checkpoint
from .stylizer import StylizeOptions, seam_metric, stylize
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DiscriminatorSpec",
    "GeneratorSpec",
    "GrayImage",
    "ModelParams",
    "StylizeOptions",
    "TrainConfig",
    "load",
    "load_checkpoint",
    "save",
    "save_checkpoint",
    "seam_metric",
    "stylize",
    "train",
]
