"""Finite-difference validation of every differentiable layer type.

Each case builds a small random float64 problem, reduces the layer output to
a scalar with a fixed random projection and compares autograd gradients
against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import nn
from .autograd import GradCheckReport, Node, finite_difference_check, mul, sum_all
from .octave import OctaveKernelSet, OctavePair, octave_conv, octave_transposed_conv
from .training import LossConfig, weighted_bce

DEFAULT_TOLERANCE = 1e-5
BATCH_NORM_TOLERANCE = 1e-4


@dataclass
class GradCase:
    name: str
    report: GradCheckReport


def _project(out: Node, weights: np.ndarray) -> Node:
    return sum_all(mul(out, Node(weights)))


def _conv(rng, stride: int, padding: int):
    params = {"x": rng.normal(size=(2, 3, 7, 6)), "w": rng.normal(size=(4, 3, 3, 3)), "b": rng.normal(size=4)}
    ho = nn.conv_output_size(7, 3, stride, padding)
    wo = nn.conv_output_size(6, 3, stride, padding)
    proj = rng.normal(size=(2, 4, ho, wo))
    return params, lambda p: _project(nn.conv2d(p["x"], p["w"], p["b"], stride, padding), proj)


def _transposed(rng, stride: int, padding: int):
    params = {"x": rng.normal(size=(2, 3, 4, 5)), "w": rng.normal(size=(3, 4, 3, 3)), "b": rng.normal(size=4)}
    ho = nn.transposed_output_size(4, 3, stride, padding)
    wo = nn.transposed_output_size(5, 3, stride, padding)
    proj = rng.normal(size=(2, 4, ho, wo))
    return params, lambda p: _project(nn.transposed_conv2d(p["x"], p["w"], p["b"], stride, padding), proj)


def _batch_norm(rng):
    params = {"x": rng.normal(1.0, 2.0, size=(3, 4, 3, 3)), "gamma": rng.normal(size=4), "beta": rng.normal(size=4)}
    proj = rng.normal(size=(3, 4, 3, 3))

    def f(p):
        y = nn.batch_norm(p["x"], p["gamma"], p["beta"], np.zeros(4), np.ones(4), training=True)
        return _project(y, proj)

    return params, f


def _octave(rng, transposed: bool):
    ch, cl, oh, ol = 3, 2, 2, 3
    params = {"xh": rng.normal(size=(2, ch, 6, 6)), "xl": rng.normal(size=(2, cl, 3, 3))}
    shapes = {"hh": (ch, oh), "hl": (ch, ol), "lh": (cl, oh), "ll": (cl, ol)}
    for path, (ci, co) in shapes.items():
        params[f"w_{path}"] = rng.normal(size=(ci, co, 3, 3) if transposed else (co, ci, 3, 3))
        params[f"b_{path}"] = rng.normal(size=co)
    proj_h = rng.normal(size=(2, oh, 6, 6))
    proj_l = rng.normal(size=(2, ol, 3, 3))
    op = octave_transposed_conv if transposed else octave_conv

    def f(p):
        kset = OctaveKernelSet(**{path: nn.Conv2dParams(p[f"w_{path}"], p[f"b_{path}"], 1, 1) for path in shapes})
        y = op(OctavePair(p["xh"], p["xl"]), kset)
        return _project(y.high, proj_h) + _project(y.low, proj_l)

    return params, f


def _bce(rng):
    params = {"p": rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))}
    target = (rng.random((2, 1, 4, 4)) < 0.3).astype(np.float64)
    cfg = LossConfig(w_pos=2.5)
    return params, lambda p: weighted_bce(p["p"], target, cfg)


CASES: dict[str, Callable] = {
    "conv": lambda rng: _conv(rng, 1, 1),
    "conv-stride2": lambda rng: _conv(rng, 2, 1),
    "transposed-conv": lambda rng: _transposed(rng, 1, 1),
    "transposed-conv-stride2": lambda rng: _transposed(rng, 2, 1),
    "batch-norm": _batch_norm,
    "octave-conv": lambda rng: _octave(rng, False),
    "octave-transposed-conv": lambda rng: _octave(rng, True),
    "weighted-bce": _bce,
}


def run_suite(seed: int = 0, names: Optional[list[str]] = None) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    results = []
    for name in names or list(CASES):
        params, f = CASES[name](rng)
        tol = BATCH_NORM_TOLERANCE if name == "batch-norm" else DEFAULT_TOLERANCE
        results.append(GradCase(name, finite_difference_check(f, params, h=1e-4, tolerance=tol)))
    return results
