"""Dataset ingestion, augmentation and the synthetic vessel generator."""

from .augment import AugmentationConfig, AugmentationPlan, augment, hflip, vflip
from .datasets import DatasetSpec, load_dataset, make_splits, select, write_dataset
from .io import read_image, read_mask, write_image
from .sample import Sample
from .synth import SynthConfig, synth_vessels

__all__ = [
    "AugmentationConfig", "AugmentationPlan", "DatasetSpec", "Sample", "SynthConfig",
    "augment", "hflip", "load_dataset", "make_splits", "read_image", "read_mask",
    "select", "synth_vessels", "vflip", "write_dataset", "write_image",
]
