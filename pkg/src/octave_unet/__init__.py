"""Octave UNet for retinal vessel segmentation, implemented on numpy."""

from .checkpoint import load, save
from .octave import OctaveConv, OctavePair, octave_conv, octave_transposed_conv, split_channels
from .training import TrainConfig, train
from .unet import BaselineUNet, ModelConfig, OctaveUNet, build, build_baseline, predict

__all__ = [
    "BaselineUNet", "ModelConfig", "OctaveConv", "OctavePair", "OctaveUNet", "TrainConfig",
    "build", "build_baseline", "load", "octave_conv", "octave_transposed_conv", "predict",
    "save", "split_channels", "train",
]
__version__ = "0.1.0"
