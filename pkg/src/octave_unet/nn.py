"""Single-frequency layers: convolution, transposed convolution, pooling,
nearest upsampling, batch normalization, activations and He initialization.

Convolution is cross-correlation (no kernel flip).  Weights are stored
``C_out x C_in x k x k`` for ``conv2d``; ``transposed_conv2d`` uses the same
tensor as the adjoint of ``conv2d``, so its input has ``W.shape[0]``
channels and its output ``W.shape[1]``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .autograd import Node, make_node
from .errors import ConfigError, ShapeError

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5


# ---------------------------------------------------------------------------
# multiply-accumulate accounting


class MacCounter:
    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


_mac_counters: list[MacCounter] = []


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates performed by forward convolutions."""
    counter = MacCounter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _record_macs(n: int) -> None:
    for c in _mac_counters:
        c.add(n)


# ---------------------------------------------------------------------------
# raw array kernels


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Strided view of shape N x C x Ho x Wo x k x k (no copy)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    return win


def conv2d_array(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride: int = 1, pad: int = 0) -> np.ndarray:
    """im2col convolution: one GEMM over the unfolded input."""
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if k != k2:
        raise ShapeError("conv2d: kernel must be square")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{wd} too small for k={k}, pad={pad}")
    cols = _windows(x, k, stride, pad).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * k * k)
    out = cols @ w.reshape(co, ci * k * k).T
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.reshape(1, co, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_input_grad(dy: np.ndarray, w: np.ndarray, in_hw: tuple[int, int], stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`conv2d_array` w.r.t. its input (no bias).

    Implemented as a correlation of the stride-dilated, re-padded upstream
    gradient with the spatially flipped, channel-swapped kernel.
    """
    n, co, ho, wo = dy.shape
    _, ci, k, _ = w.shape
    h, wd = in_hw
    if stride > 1:
        dil = np.zeros((n, co, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=dy.dtype)
        dil[:, :, ::stride, ::stride] = dy
    else:
        dil = dy
    rh = (h + 2 * pad - k) % stride
    rw = (wd + 2 * pad - k) % stride
    edge = k - 1 - pad
    before, after_h, after_w = edge, edge + rh, edge + rw
    dil = np.pad(
        dil,
        ((0, 0), (0, 0), (max(before, 0), max(after_h, 0)), (max(before, 0), max(after_w, 0))),
    )
    if before < 0 or after_h < 0 or after_w < 0:
        hh, ww = dil.shape[2:]
        dil = dil[:, :, max(-before, 0) : hh - max(-after_h, 0), max(-before, 0) : ww - max(-after_w, 0)]
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    cols = _windows(dil, k, 1, 0).transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, co * k * k)
    out = cols @ flipped.reshape(ci, co * k * k).T
    return np.ascontiguousarray(out.reshape(n, h, wd, ci).transpose(0, 3, 1, 2))


def conv2d_weight_grad(x: np.ndarray, dy: np.ndarray, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    n, ci = x.shape[:2]
    _, co, ho, wo = dy.shape
    cols = _windows(x, k, stride, pad)[:, :, :ho, :wo].transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * k * k)
    dw = dy.transpose(1, 0, 2, 3).reshape(co, n * ho * wo) @ cols
    return dw.reshape(co, ci, k, k)


def conv2d_naive(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct loop convolution used as a reference implementation."""
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    out = np.zeros((n, co, ho, wo), dtype=np.result_type(x, w))
    for bi in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[bi, o, i, j] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


def transposed_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def max_pool2_array(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: spatial extent {h}x{w} must be even; pad first")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def avg_pool2_array(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial extent {h}x{w} must be even; pad first")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2)
    # fixed summation order keeps results identical across call sites
    s = blocks[:, :, :, 0, :, 0] + blocks[:, :, :, 0, :, 1] + blocks[:, :, :, 1, :, 0] + blocks[:, :, :, 1, :, 1]
    return s * x.dtype.type(0.25)


def upsample_nearest2_array(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


# ---------------------------------------------------------------------------
# differentiable ops


def conv2d(x: Node, w: Node, b: Optional[Node] = None, stride: int = 1, padding: int = 0) -> Node:
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d: stride must be >= 1 and padding >= 0")
    out = conv2d_array(x.value, w.value, None if b is None else b.value, stride, padding)
    k = w.shape[2]
    _record_macs(out.size * w.shape[1] * k * k)
    in_hw = x.shape[2:]

    def bw(g):
        gx = conv2d_input_grad(g, w.value, in_hw, stride, padding) if x.requires_grad else None
        gw = conv2d_weight_grad(x.value, g, k, stride, padding) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, bw, "conv2d")


def transposed_conv2d(x: Node, w: Node, b: Optional[Node] = None, stride: int = 1, padding: int = 0) -> Node:
    """Adjoint of :func:`conv2d` with the same kernel, plus an optional bias."""
    if stride < 1 or padding < 0:
        raise ConfigError("transposed_conv2d: stride must be >= 1 and padding >= 0")
    n, c, h, wd = x.shape
    if c != w.shape[0]:
        raise ShapeError(f"transposed_conv2d: input has {c} channels, kernel expects {w.shape[0]}")
    k = w.shape[2]
    ho, wo = transposed_output_size(h, k, stride, padding), transposed_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed_conv2d: output extent {ho}x{wo} is empty")
    out = conv2d_input_grad(x.value, w.value, (ho, wo), stride, padding)
    _record_macs(n * c * h * wd * w.shape[1] * k * k)
    if b is not None:
        out = out + b.value.reshape(1, -1, 1, 1)

    def bw(g):
        gx = conv2d_array(g, w.value, None, stride, padding) if x.requires_grad else None
        gw = conv2d_weight_grad(g, x.value, k, stride, padding) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, bw, "transposed_conv2d")


def max_pool2(x: Node) -> Node:
    out = max_pool2_array(x.value)

    def bw(g):
        n, c, h, w = x.shape
        blocks = x.value.reshape(n, c, h // 2, 2, w // 2, 2)
        # route each gradient to the first maximal element of its block
        flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        arg = flat.argmax(axis=-1)
        mask = np.zeros_like(flat)
        np.put_along_axis(mask, arg[..., None], 1, axis=-1)
        gi = mask * g[..., None]
        gi = gi.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gi,)

    return make_node(out, (x,), bw, "max_pool2")


def avg_pool2(x: Node) -> Node:
    out = avg_pool2_array(x.value)

    def bw(g):
        return (upsample_nearest2_array(g) * x.dtype.type(0.25),)

    return make_node(out, (x,), bw, "avg_pool2")


def upsample_nearest2(x: Node) -> Node:
    out = upsample_nearest2_array(x.value)

    def bw(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), bw, "upsample_nearest2")


def concat_channels(a: Node, b: Node) -> Node:
    out = T.concat_channels(a.value, b.value)
    ca = a.shape[1]

    def bw(g):
        return g[:, :ca], g[:, ca:]

    return make_node(out, (a, b), bw, "concat")


def relu(x: Node) -> Node:
    out = np.maximum(x.value, 0)

    def bw(g):
        return (g * (x.value > 0),)

    return make_node(out, (x,), bw, "relu")


def sigmoid(x: Node) -> Node:
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype)

    def bw(g):
        return (g * out * (1 - out),)

    return make_node(out, (x,), bw, "sigmoid")


def batch_norm(
    x: Node,
    gamma: Node,
    beta: Node,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> Node:
    """Per-channel normalization over N, H, W.

    In training mode the batch statistics (biased variance) normalize the
    input and the running buffers are updated in place with the unbiased
    variance.  Running statistics never enter the graph.
    """
    v = x.value
    if v.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm: {v.shape[1]} channels, params for {gamma.shape[0]}")
    dt = v.dtype.type
    if training:
        mean, var = T.channel_stats(v)
        m = v.size // v.shape[1]
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean.astype(v.dtype), running_var.astype(v.dtype)
    inv_std = (1 / np.sqrt(var + dt(eps))).astype(v.dtype)
    xhat = (v - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.value[None, :, None, None] + beta.value[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        if not x.requires_grad:
            return None, ggamma, gbeta
        gx_hat = g * gamma.value[None, :, None, None]
        if training:
            mg = gx_hat.mean(axis=(0, 2, 3), keepdims=True)
            mgx = (gx_hat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = (gx_hat - mg - xhat * mgx) * inv_std[None, :, None, None]
        else:
            gx = gx_hat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), bw, "batch_norm")


def he_init(shape, rng: np.random.Generator, fan_in: Optional[int] = None, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal with std sqrt(2 / fan_in); fan_in defaults to C_in*k*k."""
    if fan_in is None:
        fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


# ---------------------------------------------------------------------------
# modules


class Module:
    """Parameter container with ordered registration of params, buffers and children."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Node) and value.requires_grad and value.is_leaf:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        setattr(self, name, module)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Node]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Node]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.value for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing}, unexpected={extra}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {state[name].shape}")
            p.value = np.array(state[name], dtype=p.dtype)
        for name, buf in self.named_buffers():
            if state[name].shape != buf.shape:
                raise ShapeError(f"{name}: expected {buf.shape}, got {state[name].shape}")
            buf[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def parameter(value: np.ndarray, name: Optional[str] = None) -> Node:
    return Node(value, requires_grad=True, name=name)


@dataclass
class Conv2dParams:
    weight: Node
    bias: Optional[Node] = None
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        k = self.weight.shape[2]
        if k % 2 == 0 or self.weight.shape[3] != k:
            raise ConfigError(f"kernel must be square with odd size, got {self.weight.shape[2:]}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError("stride must be >= 1 and padding >= 0")


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int = 1,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.stride, self.padding = stride, padding
        self.weight = parameter(he_init((c_out, c_in, k, k), rng, dtype=dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x: Node) -> Node:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Weight shape is C_in x C_out x k x k (the adjoint convolution's kernel)."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int = 1,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.stride, self.padding = stride, padding
        self.weight = parameter(he_init((c_in, c_out, k, k), rng, fan_in=c_in * k * k, dtype=dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x: Node) -> Node:
        return transposed_conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON, dtype=np.float32):
        super().__init__()
        if not 0 < momentum < 1 or eps <= 0:
            raise ConfigError("batch norm needs 0 < momentum < 1 and eps > 0")
        self.momentum, self.eps = momentum, eps
        self.gamma = parameter(np.ones(channels, dtype=dtype))
        self.beta = parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Node) -> Node:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)
