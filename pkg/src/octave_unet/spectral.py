"""Frequency content of feature maps: centred DFT energy maps and radial spectra.

Each feature channel is transformed with an unnormalized 2D DFT and its
magnitude (or power) is shifted so the zero frequency sits at
``(H // 2, W // 2)``.  Maps are averaged per group at their native
resolution; radial curves use the distance to the centre rounded to an
integer, and report it normalized by the Nyquist radius ``min(H, W) / 2`` so
that full- and half-resolution groups share an axis.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .unet import UNet, extract_features

GROUPS = ("baseline", "octave-high", "octave-low")


@dataclass
class EnergyMap:
    values: np.ndarray
    tag: str = ""
    count: int = 1

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f"energy map must be 2D, got {self.values.shape}")
        if np.any(self.values < 0):
            raise ValueError("energy map entries must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def fft2_magnitude(x: np.ndarray, power: bool = False, tag: str = "") -> EnergyMap:
    """Centred ``|DFT(x)|`` (``|DFT(x)|**2`` when ``power``) of a single-channel map."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 2:
        raise ShapeError(f"need a 2D map of at least 2x2, got {x.shape}")
    mag = np.abs(np.fft.fft2(x))
    if power:
        mag = mag * mag
    return EnergyMap(np.fft.fftshift(mag), tag)


def average_energy(maps: Sequence[EnergyMap], tag: Optional[str] = None) -> EnergyMap:
    """Count-weighted elementwise mean, so averaging partial averages is exact."""
    if not maps:
        raise ShapeError("nothing to average")
    shapes = {m.shape for m in maps}
    if len(shapes) > 1:
        raise ShapeError(f"energy maps in one group must share dims, got {sorted(shapes)}")
    total = sum(m.count for m in maps)
    acc = np.zeros(maps[0].shape)
    for m in maps:
        acc += m.values * m.count
    return EnergyMap(acc / total, maps[0].tag if tag is None else tag, total)


def radius_grid(shape: tuple[int, int]) -> np.ndarray:
    """Integer-rounded distance of each pixel from the zero-frequency bin."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    return np.rint(np.hypot(yy - h // 2, xx - w // 2)).astype(np.int64)


@dataclass
class RadialCurve:
    radius: np.ndarray  # integer bins
    values: np.ndarray
    nyquist: float
    tag: str = ""

    @property
    def normalized(self) -> np.ndarray:
        return self.radius / self.nyquist

    def csv(self) -> str:
        lines = ["radius_normalized,magnitude"]
        lines += [f"{r!r},{v!r}" for r, v in zip(self.normalized.tolist(), self.values.tolist())]
        return "\n".join(lines) + "\n"


def radial_spectrum(e: EnergyMap) -> RadialCurve:
    """Mean of each integer-radius ring, ordered by increasing radius."""
    r = radius_grid(e.shape).reshape(-1)
    sums = np.bincount(r, weights=e.values.reshape(-1))
    counts = np.bincount(r)
    values = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return RadialCurve(np.arange(values.size), values, min(e.shape) / 2, e.tag)


def energy_fraction(e: EnergyMap, radius: float) -> float:
    """Share of the map's total within normalized radius ``radius`` of the centre."""
    r = radius_grid(e.shape) / (min(e.shape) / 2)
    total = float(e.values.sum())
    if total == 0:
        return 0.0
    return float(e.values[r <= radius].sum()) / total


def channel_maps(features: np.ndarray, power: bool = False, tag: str = "") -> list[EnergyMap]:
    """One energy map per (image, channel) of an ``N x C x H x W`` array."""
    n, c = features.shape[:2]
    return [fft2_magnitude(features[i, j], power, tag) for i in range(n) for j in range(c)]


@dataclass
class FrequencyComparison:
    maps: dict[str, EnergyMap]
    curves: dict[str, RadialCurve]

    def fractions(self, radius: float = 0.125) -> dict[str, float]:
        return {k: energy_fraction(m, radius) for k, m in self.maps.items()}


def _group_maps(model: UNet, images: Iterable[np.ndarray], taps: Sequence[str], power: bool):
    high, low = {}, {}
    for image in images:
        batch = image[None] if image.ndim == 3 else image
        feats = extract_features(model, batch, taps)
        for t in taps:
            pair = feats[t]
            if pair.high is not None:
                high.setdefault(t, []).extend(channel_maps(pair.high.value, power))
            if pair.low is not None:
                low.setdefault(t, []).extend(channel_maps(pair.low.value, power))
    return high, low


def _pool(per_tap: dict[str, list[EnergyMap]], tag: str) -> Optional[EnergyMap]:
    if not per_tap:
        return None
    dims = {m.shape for maps in per_tap.values() for m in maps}
    if len(dims) > 1:
        raise ConfigError(f"taps for group {tag} have different resolutions {sorted(dims)}; tap one level at a time")
    return average_energy([m for maps in per_tap.values() for m in maps], tag)


def compare_models(
    baseline: UNet,
    octave: UNet,
    images: Sequence[np.ndarray],
    taps: Sequence[str] = ("encoder0",),
    power: bool = False,
) -> FrequencyComparison:
    """Feed the same images to both models and average channel spectra per group."""
    taps = list(taps)
    if not taps:
        raise ConfigError("need at least one tap")
    for name, model in (("baseline", baseline), ("octave", octave)):
        missing = [t for t in taps if t not in model.tap_names()]
        if missing:
            raise ConfigError(f"{name} model has no taps {missing}; valid: {model.tap_names()}")
    base_high, _ = _group_maps(baseline, images, taps, power)
    oct_high, oct_low = _group_maps(octave, images, taps, power)
    maps = {}
    for tag, per_tap in zip(GROUPS, (base_high, oct_high, oct_low)):
        pooled = _pool(per_tap, tag)
        if pooled is not None:
            maps[tag] = pooled
    return FrequencyComparison(maps, {k: radial_spectrum(m) for k, m in maps.items()})


def to_png_array(e: EnergyMap, log: bool = False) -> np.ndarray:
    """Scale a map to [0, 1] for display (``log1p`` first when ``log``)."""
    v = np.log1p(e.values) if log else e.values
    peak = float(v.max())
    return v / peak if peak > 0 else np.zeros_like(v)


def write_comparison(result: FrequencyComparison, out_dir: os.PathLike) -> None:
    """PNG maps and CSV curves for every group, linear and log variants."""
    from .data.io import write_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for tag, m in result.maps.items():
        write_image(out / f"energy_{tag}.png", to_png_array(m))
        write_image(out / f"energy_{tag}_log.png", to_png_array(m, log=True))
        curve = result.curves[tag]
        (out / f"spectrum_{tag}.csv").write_text(curve.csv())
        log_curve = RadialCurve(curve.radius, np.log1p(curve.values), curve.nyquist, tag)
        (out / f"spectrum_{tag}_log.csv").write_text(log_curve.csv())
    lines = ["group,fraction_within_0.125"] + [f"{k},{v!r}" for k, v in result.fractions(0.125).items()]
    (out / "energy_fractions.csv").write_text("\n".join(lines) + "\n")
