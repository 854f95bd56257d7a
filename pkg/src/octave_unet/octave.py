"""Octave convolution and octave transposed convolution.

Features are carried as an :class:`OctavePair`: a high-frequency map at full
resolution and a low-frequency map at half resolution.  Each octave layer
has up to four kernel paths:

* ``hh`` / ``ll`` - intra-frequency update (plain (transposed) convolution)
* ``hl`` - high to low: 2x2 average pooling, then (transposed) convolution
* ``lh`` - low to high: (transposed) convolution, then nearest 2x upsampling

Outputs are summed per frequency in the fixed order ``hh + lh`` and
``ll + hl``.  By default the sum is returned raw and the caller activates it;
passing ``path_activation`` instead activates every path before summation.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Union

import numpy as np

from . import nn
from .autograd import Node
from .errors import ConfigError, ShapeError

PATHS = ("hh", "hl", "lh", "ll")
Activation = Callable[[Node], Node]


@dataclass
class OctavePair:
    high: Optional[Node] = None
    low: Optional[Node] = None

    def __post_init__(self):
        if self.high is None and self.low is None:
            raise ShapeError("OctavePair needs at least one frequency")
        if self.high is not None and self.low is not None:
            (nh, _, hh, wh), (nl, _, hl, wl) = self.high.shape, self.low.shape
            if nh != nl or hh != 2 * hl or wh != 2 * wl:
                raise ShapeError(
                    f"low map must be half the high map: high {self.high.shape}, low {self.low.shape}"
                )

    @property
    def channels(self) -> tuple[int, int]:
        ch = 0 if self.high is None else self.high.shape[1]
        cl = 0 if self.low is None else self.low.shape[1]
        return ch, cl

    def map(self, fn: Callable[[Node], Node]) -> "OctavePair":
        return OctavePair(
            None if self.high is None else fn(self.high),
            None if self.low is None else fn(self.low),
        )


def split_channels(channels: int, alpha: float) -> tuple[int, int]:
    """Return ``(c_high, c_low)`` with ``c_low = alpha * channels`` exactly."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    low = Fraction(alpha).limit_denominator(1 << 20) * channels
    if low.denominator != 1:
        raise ConfigError(f"alpha={alpha} does not split {channels} channels into integers")
    return channels - int(low), int(low)


@dataclass
class OctaveKernelSet:
    """Per-path parameters; a path is ``None`` when its input or output side is empty."""

    hh: Optional[nn.Conv2dParams] = None
    hl: Optional[nn.Conv2dParams] = None
    lh: Optional[nn.Conv2dParams] = None
    ll: Optional[nn.Conv2dParams] = None

    def __post_init__(self):
        sizes = {p.weight.shape[2] for p in self.present().values()}
        if len(sizes) > 1:
            raise ConfigError(f"all octave kernels must share one size, got {sorted(sizes)}")
        if not sizes:
            raise ConfigError("octave kernel set has no paths")

    def present(self) -> dict[str, nn.Conv2dParams]:
        return {name: getattr(self, name) for name in PATHS if getattr(self, name) is not None}


def _check_input(x: OctavePair, kset: OctaveKernelSet, in_axis: int) -> None:
    if x.high is not None and (x.high.shape[2] % 2 or x.high.shape[3] % 2):
        if kset.hl is not None:
            raise ShapeError(f"high-frequency extent {x.high.shape[2:]} must be even")
    for name, p in kset.present().items():
        src = x.high if name[0] == "h" else x.low
        if src is None:
            raise ShapeError(f"path {name} needs a {'high' if name[0] == 'h' else 'low'} input")
        if src.shape[1] != p.weight.shape[in_axis]:
            raise ShapeError(
                f"path {name}: input has {src.shape[1]} channels, kernel expects {p.weight.shape[in_axis]}"
            )


def _sum_paths(terms: list[Node]) -> Optional[Node]:
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def _octave(x: OctavePair, kset: OctaveKernelSet, op, in_axis: int, path_activation: Optional[Activation]) -> OctavePair:
    _check_input(x, kset, in_axis)
    act = path_activation or (lambda t: t)

    def run(p: nn.Conv2dParams, inp: Node) -> Node:
        return op(inp, p.weight, p.bias, p.stride, p.padding)

    high_terms, low_terms = [], []
    if kset.hh is not None:
        high_terms.append(act(run(kset.hh, x.high)))
    if kset.lh is not None:
        high_terms.append(act(nn.upsample_nearest2(run(kset.lh, x.low))))
    if kset.ll is not None:
        low_terms.append(act(run(kset.ll, x.low)))
    if kset.hl is not None:
        low_terms.append(act(run(kset.hl, nn.avg_pool2(x.high))))
    return OctavePair(_sum_paths(high_terms), _sum_paths(low_terms))


def octave_conv(x: OctavePair, kset: OctaveKernelSet, path_activation: Optional[Activation] = None) -> OctavePair:
    """Octave convolution; kernels are ``C_out x C_in x k x k``."""
    return _octave(x, kset, nn.conv2d, 1, path_activation)


def octave_transposed_conv(x: OctavePair, kset: OctaveKernelSet, path_activation: Optional[Activation] = None) -> OctavePair:
    """Octave transposed convolution; kernels are ``C_in x C_out x k x k``.

    ``hl`` averages each 2x2 neighbourhood of the high map before the
    transposed convolution; ``lh`` upsamples the transposed-convolution
    output by nearest-neighbour replication.
    """
    return _octave(x, kset, nn.transposed_conv2d, 0, path_activation)


class OctaveConv(nn.Module):
    """Trainable octave (transposed) convolution with its own per-path biases.

    Parameters are registered as ``weight_<path>`` / ``bias_<path>``, in the
    order hh, hl, lh, ll, which is also the order of He initialization.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        alpha_in: float,
        alpha_out: float,
        k: int = 3,
        transposed: bool = False,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
        stride: int = 1,
        padding: Optional[int] = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.c_in, self.c_out = c_in, c_out
        self.alpha_in, self.alpha_out = alpha_in, alpha_out
        self.k, self.transposed = k, transposed
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.in_split = split_channels(c_in, alpha_in)
        self.out_split = split_channels(c_out, alpha_out)
        if sum(self.out_split) < 1 or sum(self.in_split) < 1:
            raise ConfigError("octave layer needs at least one input and one output channel")
        self.paths: list[str] = []
        for name in PATHS:
            ci = self.in_split[0 if name[0] == "h" else 1]
            co = self.out_split[0 if name[1] == "h" else 1]
            if ci == 0 or co == 0:
                continue
            shape = (ci, co, k, k) if transposed else (co, ci, k, k)
            setattr(self, f"weight_{name}", nn.parameter(nn.he_init(shape, rng, fan_in=ci * k * k, dtype=dtype)))
            setattr(self, f"bias_{name}", nn.parameter(np.zeros(co, dtype=dtype)))
            self.paths.append(name)

    def kernel_set(self) -> OctaveKernelSet:
        return OctaveKernelSet(**{
            name: nn.Conv2dParams(getattr(self, f"weight_{name}"), getattr(self, f"bias_{name}"),
                                  self.stride, self.padding)
            for name in self.paths
        })

    def forward(self, x: Union[OctavePair, Node], path_activation: Optional[Activation] = None) -> OctavePair:
        if isinstance(x, Node):
            x = OctavePair(high=x)
        op = octave_transposed_conv if self.transposed else octave_conv
        return op(x, self.kernel_set(), path_activation)

    def macs(self, height: int, width: int) -> int:
        """Multiply-accumulates for one image whose high-frequency output is ``height x width``."""
        (ih, il), (oh, ol) = self.in_split, self.out_split
        kk = self.k * self.k
        full, half = height * width, (height // 2) * (width // 2)
        per_path = {"hh": ih * oh * full, "hl": ih * ol * half, "lh": il * oh * half, "ll": il * ol * half}
        return kk * sum(per_path[p] for p in self.paths)


def make_initial_layer(c_in: int, c_out: int, alpha_out: float, rng=None, dtype=np.float32, k: int = 3) -> OctaveConv:
    """Octave convolution that consumes a plain image tensor (no low input)."""
    if c_in < 1:
        raise ConfigError("initial layer needs at least one input channel")
    return OctaveConv(c_in, c_out, 0.0, alpha_out, k=k, rng=rng, dtype=dtype)


class FinalLayer(OctaveConv):
    """Octave transposed convolution to a single high-frequency map, sigmoid-activated."""

    def forward(self, x: OctavePair, path_activation: Optional[Activation] = None) -> Node:
        if x.high is None or (self.in_split[1] and x.low is None):
            raise ShapeError("final layer needs both frequency inputs")
        return nn.sigmoid(super().forward(x).high)

    def logits(self, x: OctavePair) -> Node:
        return super().forward(x).high


def make_final_layer(c_in: int, alpha_in: float, rng=None, dtype=np.float32, k: int = 3, c_out: int = 1) -> FinalLayer:
    return FinalLayer(c_in, c_out, alpha_in, 0.0, k=k, transposed=True, rng=rng, dtype=dtype)
