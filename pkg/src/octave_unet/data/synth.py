"""Synthetic fundus-like images with an exactly known vessel mask.

Each sample is a dark circular field of view with smooth illumination
falloff, low-frequency texture and sensor noise.  A few vessel trees grow
from a common "disc" point; each branch is a polyline whose width shrinks at
every bifurcation.  Wide vessels bend gently, thin ones wander more.  The
truth mask is the union of the rasterized capsules, so it matches the drawing
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ConfigError
from .sample import Sample


@dataclass
class SynthConfig:
    size: int = 64
    trees: tuple[int, int] = (2, 4)
    root_width: tuple[float, float] = (3.5, 6.0)
    min_width: float = 1.0
    step: float = 0.06  # segment length as a fraction of the image size
    branch_probability: float = 0.22
    width_decay: tuple[float, float] = (0.6, 0.8)
    max_segments: int = 220
    contrast: tuple[float, float] = (0.22, 0.42)
    noise: float = 0.03
    vessel_fraction: tuple[float, float] = (0.03, 0.20)
    max_attempts: int = 100


def _smooth_noise(shape: tuple[int, int], cells: int, rng: np.random.Generator) -> np.ndarray:
    """Bilinearly upsampled random grid in [-1, 1]."""
    h, w = shape
    grid = rng.uniform(-1, 1, (cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx + g10 * fy * (1 - fx) + g11 * fy * fx)


def _draw_capsule(mask: np.ndarray, width_map: np.ndarray, p0, p1, radius: float) -> None:
    h, w = mask.shape
    r = radius + 1
    y_lo = max(int(np.floor(min(p0[0], p1[0]) - r)), 0)
    y_hi = min(int(np.ceil(max(p0[0], p1[0]) + r)) + 1, h)
    x_lo = max(int(np.floor(min(p0[1], p1[1]) - r)), 0)
    x_hi = min(int(np.ceil(max(p0[1], p1[1]) + r)) + 1, w)
    if y_lo >= y_hi or x_lo >= x_hi:
        return
    yy, xx = np.mgrid[y_lo:y_hi, x_lo:x_hi].astype(np.float64)
    d = np.subtract(p1, p0)
    L2 = float(d @ d)
    t = np.zeros_like(yy) if L2 == 0 else np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / L2, 0, 1)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    hit = dist <= radius
    sub = mask[y_lo:y_hi, x_lo:x_hi]
    sub |= hit
    wsub = width_map[y_lo:y_hi, x_lo:x_hi]
    np.maximum(wsub, np.where(hit, 2 * radius, 0), out=wsub)


def _grow_tree(mask, width_map, fov, origin, heading, cfg: SynthConfig, rng, budget: list[int]) -> None:
    size = mask.shape[0]
    # small images get proportionally thinner trunks
    scale = float(np.clip(size / 128, 0.6, 1.0))
    lo_w, hi_w = cfg.root_width[0] * scale, cfg.root_width[1] * scale
    stack = [(np.array(origin, dtype=float), heading, rng.uniform(lo_w, hi_w))]
    while stack and budget[0] > 0:
        pos, ang, width = stack.pop()
        # thin vessels turn more per step
        wander = 0.12 + 0.5 / width
        while width >= cfg.min_width and budget[0] > 0:
            ang += rng.normal(0, wander)
            nxt = pos + cfg.step * size * np.array([np.sin(ang), np.cos(ang)])
            iy, ix = int(round(nxt[0])), int(round(nxt[1]))
            if not (0 <= iy < size and 0 <= ix < size) or not fov[iy, ix]:
                break
            _draw_capsule(mask, width_map, pos, nxt, width / 2)
            budget[0] -= 1
            pos = nxt
            if rng.random() < cfg.branch_probability:
                child_w = width * rng.uniform(*cfg.width_decay)
                side = rng.choice([-1.0, 1.0])
                stack.append((pos.copy(), ang + side * rng.uniform(0.5, 1.1), child_w))
                width *= rng.uniform(0.85, 0.97)
                ang -= side * rng.uniform(0.1, 0.35)
            else:
                width *= rng.uniform(0.96, 1.0)


def synth_sample(rng: np.random.Generator, cfg: SynthConfig, sample_id: str = "") -> Sample:
    """Draw one sample, redrawing trees until the vessel fraction is in range."""
    if cfg.size < 32:
        raise ConfigError("synthetic images must be at least 32 pixels")
    lo, hi = cfg.vessel_fraction
    for _ in range(cfg.max_attempts):
        sample = _draw(rng, cfg, sample_id)
        if lo <= float(sample.truth.mean()) <= hi:
            return sample
    raise ConfigError(f"could not reach a vessel fraction in [{lo}, {hi}] at size {cfg.size}")


def _draw(rng: np.random.Generator, cfg: SynthConfig, sample_id: str) -> Sample:
    s = cfg.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    c = (s - 1) / 2
    radius = 0.48 * s
    rr = np.hypot(yy - c, xx - c)
    fov = rr <= radius

    mask = np.zeros((s, s), dtype=bool)
    width_map = np.zeros((s, s))
    disc_ang = rng.uniform(0, 2 * np.pi)
    disc = np.array([c + 0.25 * s * np.sin(disc_ang), c + 0.25 * s * np.cos(disc_ang)])
    budget = [cfg.max_segments]
    n_trees = int(rng.integers(cfg.trees[0], cfg.trees[1] + 1))
    base_heading = rng.uniform(0, 2 * np.pi)
    for i in range(n_trees):
        heading = base_heading + 2 * np.pi * i / n_trees + rng.normal(0, 0.3)
        _grow_tree(mask, width_map, fov, disc, heading, cfg, rng, budget)
    mask &= fov

    # background: orange-red field, radial vignetting, linear illumination ramp
    colour = np.array([0.78, 0.42, 0.20]) * rng.uniform(0.85, 1.1)
    ramp_dir = rng.uniform(0, 2 * np.pi)
    ramp = ((yy - c) * np.sin(ramp_dir) + (xx - c) * np.cos(ramp_dir)) / s
    illum = (1 - 0.35 * (rr / radius) ** 2) * (1 + rng.uniform(0.1, 0.3) * ramp)
    texture = 1 + 0.06 * _smooth_noise((s, s), 4, rng) + 0.03 * _smooth_noise((s, s), 12, rng)
    intensity = illum * texture

    contrast = rng.uniform(*cfg.contrast)
    # darker centre line on wider vessels, faint thin vessels
    depth = contrast * np.clip(0.45 + width_map / 6.0, 0, 1.2)
    vessel_gain = np.where(mask, 1 - depth, 1.0)
    img = colour[:, None, None] * (intensity * vessel_gain)[None]
    img = img + rng.normal(0, cfg.noise, img.shape)
    img = np.where(fov[None], img, 0.02 * rng.random(img.shape))
    img = np.clip(img, 0, 1).astype(np.float32)
    return Sample(
        image=img,
        truth=mask[None].astype(np.float32),
        fov=fov[None].astype(np.float32),
        id=sample_id,
    )


def synth_vessels(count: int, size: int = 64, rng=None, cfg: Optional[SynthConfig] = None, prefix: str = "synth") -> list[Sample]:
    """Generate ``count`` samples of ``size x size`` pixels."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    cfg = cfg or SynthConfig()
    if cfg.size != size:
        cfg = SynthConfig(**{**cfg.__dict__, "size": size})
    return [synth_sample(rng, cfg, f"{prefix}_{i:03d}") for i in range(count)]
