"""Random flips and photometric jitter, each step firing independently.

Geometric steps (flips) apply to image, truth and FOV mask alike; the
photometric steps touch the image only.  Saturation blends each pixel with
its Rec. 601 luma; contrast blends with the mean luma of the image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ConfigError
from .sample import Sample

STEPS = ("hflip", "vflip", "brightness", "saturation", "contrast", "gamma")
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class AugmentationConfig:
    probability: float = 0.5
    brightness: tuple[float, float] = (0.8, 1.25)
    saturation: tuple[float, float] = (0.8, 1.25)
    contrast: tuple[float, float] = (0.8, 1.25)
    gamma: tuple[float, float] = (0.7, 1.5)
    seed: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError("trigger probability must be in [0, 1]")
        for name in ("brightness", "saturation", "contrast", "gamma"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= 1.0 <= hi):
                raise ConfigError(f"{name} range must be positive and contain 1.0, got {(lo, hi)}")
            setattr(self, name, (float(lo), float(hi)))


@dataclass
class AugmentationPlan:
    fired: dict[str, bool] = field(default_factory=dict)
    factors: dict[str, float] = field(default_factory=dict)


def sample_plan(cfg: AugmentationConfig, rng: np.random.Generator) -> AugmentationPlan:
    """Draw triggers and factors; always consumes the same number of variates."""
    plan = AugmentationPlan()
    for step in STEPS:
        plan.fired[step] = bool(rng.random() < cfg.probability)
        if step in ("hflip", "vflip"):
            continue
        lo, hi = getattr(cfg, step)
        plan.factors[step] = float(rng.uniform(lo, hi))
    return plan


def _luma(img: np.ndarray) -> np.ndarray:
    if img.shape[0] != 3:
        return img.mean(axis=0, keepdims=True)
    return np.tensordot(LUMA, img, axes=(0, 0))[None]


def apply_plan(sample: Sample, plan: AugmentationPlan) -> Sample:
    img, truth, fov = sample.image, sample.truth, sample.fov
    for axis, step in ((2, "hflip"), (1, "vflip")):
        if plan.fired.get(step):
            img, truth = np.flip(img, axis), np.flip(truth, axis)
            fov = None if fov is None else np.flip(fov, axis)
    img = img.astype(np.float32, copy=True)
    f = plan.factors
    if plan.fired.get("brightness"):
        img = np.clip(img * np.float32(f["brightness"]), 0, 1)
    if plan.fired.get("saturation"):
        gray = _luma(img)
        img = np.clip(gray + np.float32(f["saturation"]) * (img - gray), 0, 1)
    if plan.fired.get("contrast"):
        mean = _luma(img).mean(dtype=np.float64).astype(np.float32)
        img = np.clip(mean + np.float32(f["contrast"]) * (img - mean), 0, 1)
    if plan.fired.get("gamma"):
        img = np.clip(img ** np.float32(f["gamma"]), 0, 1)
    return sample.with_(
        image=np.ascontiguousarray(img, dtype=np.float32),
        truth=np.ascontiguousarray(truth),
        fov=None if fov is None else np.ascontiguousarray(fov),
    )


def augment(sample: Sample, cfg: AugmentationConfig, rng: np.random.Generator) -> Sample:
    return apply_plan(sample, sample_plan(cfg, rng))


def hflip(sample: Sample) -> Sample:
    return apply_plan(sample, AugmentationPlan(fired={"hflip": True}))


def vflip(sample: Sample) -> Sample:
    return apply_plan(sample, AugmentationPlan(fired={"vflip": True}))
