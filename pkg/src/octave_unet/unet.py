"""Octave UNet and its single-frequency baseline.

Layout for ``depth`` encoder levels with widths ``base * 2**level``::

    encoder0 (initial octave conv + convs) -> maxpool -> encoder1 -> ... -> encoder{depth-1}
    decoder{l}: upsample x2 both frequencies, concat skip from encoder{l},
                octave transposed conv, then octave convs
    final: octave transposed conv to one channel, sigmoid

Every layer except the final one is followed by per-frequency batch
normalization and ReLU.  All kernels are 3x3 with unit stride and one pixel
of zero padding; upsampling is parameter-free.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import nn
from .autograd import Node, no_grad
from .errors import ConfigError, ShapeError
from .octave import OctaveConv, OctavePair, make_final_layer, make_initial_layer, split_channels


@dataclass
class ModelConfig:
    depth: int = 4
    base_channels: int = 64
    alpha: float = 0.5
    convs_per_block: int = 2
    input_channels: int = 3
    strict_equation: bool = False
    kernel_size: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.convs_per_block < 1:
            raise ConfigError("convs_per_block must be >= 1")
        if self.base_channels < 1 or self.input_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        for level in range(self.depth):
            c = self.channels(level)
            try:
                split_channels(c, self.alpha)
            except ConfigError as exc:
                raise ConfigError(f"level {level} ({c} channels): {exc}") from None

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def grid(self) -> int:
        return 2 ** self.depth

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class OctaveBlock(nn.Module):
    """Octave (transposed) convolution, per-frequency batch norm, ReLU."""

    def __init__(self, conv: OctaveConv, strict_equation: bool = False):
        super().__init__()
        self.strict_equation = strict_equation
        self.conv = conv
        ch, cl = conv.out_split
        dtype = getattr(conv, f"weight_{conv.paths[0]}").dtype
        if ch:
            self.bn_high = nn.BatchNorm2d(ch, dtype=dtype)
        if cl:
            self.bn_low = nn.BatchNorm2d(cl, dtype=dtype)

    def forward(self, x: Union[OctavePair, Node]) -> OctavePair:
        if self.strict_equation:
            y = self.conv(x, path_activation=nn.relu)
            return OctavePair(
                None if y.high is None else self.bn_high(y.high),
                None if y.low is None else self.bn_low(y.low),
            )
        y = self.conv(x)
        return OctavePair(
            None if y.high is None else nn.relu(self.bn_high(y.high)),
            None if y.low is None else nn.relu(self.bn_low(y.low)),
        )


class Stage(nn.Module):
    """Sequence of blocks at one resolution level."""

    def __init__(self, blocks: Sequence[nn.Module]):
        super().__init__()
        self.blocks = list(blocks)
        for i, b in enumerate(self.blocks):
            self.add_module(f"block{i}", b)

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def _concat_pair(skip: OctavePair, up: OctavePair) -> OctavePair:
    def cat(a, b):
        if a is None:
            return b
        if b is None:
            return a
        return nn.concat_channels(a, b)

    return OctavePair(cat(skip.high, up.high), cat(skip.low, up.low))


def _check_grid(shape: tuple[int, ...], depth: int) -> None:
    grid = 2 ** depth
    h, w = shape[-2:]
    if h % grid or w % grid:
        raise ShapeError(
            f"input {h}x{w} is not divisible by {grid}; use pad_to_grid(image, depth={depth}) first"
        )


class _UNetBase(nn.Module):
    config: ModelConfig

    def tap_names(self) -> list[str]:
        d = self.config.depth
        return [f"encoder{i}" for i in range(d)] + [f"decoder{i}" for i in reversed(range(d - 1))]

    def layer_inventory(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(name, p.shape, int(p.value.size)) for name, p in self.named_parameters()]

    def __call__(self, image, training: Optional[bool] = None, taps: Iterable[str] = ()):
        return self.forward(image, training=training, taps=taps)

    def forward(self, image, training: Optional[bool] = None, taps: Iterable[str] = ()):
        """Return the probability map, or ``(probs, features)`` when taps are requested."""
        if training is not None:
            self.train(training)
        x = image if isinstance(image, Node) else Node(np.asarray(image))
        if x.value.ndim != 4:
            raise ShapeError(f"expected N x C x H x W input, got {x.shape}")
        _check_grid(x.shape, self.config.depth)
        taps = list(taps)
        unknown = [t for t in taps if t not in self.tap_names()]
        if unknown:
            raise KeyError(f"unknown taps {unknown}; valid names: {self.tap_names()}")
        feats: dict[str, OctavePair] = {}
        out = self._run(x, feats)
        if taps:
            return out, {t: feats[t] for t in taps}
        return out


class OctaveUNet(_UNetBase):
    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng()
        a, k, strict = config.alpha, config.kernel_size, config.strict_equation
        self.encoders: list[Stage] = []
        for level in range(config.depth):
            c = config.channels(level)
            blocks = []
            for j in range(config.convs_per_block):
                if level == 0 and j == 0:
                    conv = make_initial_layer(config.input_channels, c, a, rng=rng, dtype=dtype, k=k)
                else:
                    c_in = c if j else config.channels(level - 1)
                    conv = OctaveConv(c_in, c, a, a, k=k, rng=rng, dtype=dtype)
                blocks.append(OctaveBlock(conv, strict))
            stage = Stage(blocks)
            self.add_module(f"encoder{level}", stage)
            self.encoders.append(stage)
        self.decoders: dict[int, Stage] = {}
        for level in reversed(range(config.depth - 1)):
            c = config.channels(level)
            blocks = [OctaveBlock(OctaveConv(c + config.channels(level + 1), c, a, a, k=k,
                                             transposed=True, rng=rng, dtype=dtype), strict)]
            for _ in range(config.convs_per_block - 1):
                blocks.append(OctaveBlock(OctaveConv(c, c, a, a, k=k, rng=rng, dtype=dtype), strict))
            stage = Stage(blocks)
            self.add_module(f"decoder{level}", stage)
            self.decoders[level] = stage
        self.final = make_final_layer(config.channels(0), a, rng=rng, dtype=dtype, k=k)

    def _run(self, x: Node, feats: dict) -> Node:
        pair: Union[Node, OctavePair] = x
        skips = []
        for level, stage in enumerate(self.encoders):
            if level:
                pair = pair.map(nn.max_pool2)
            pair = stage(pair)
            feats[f"encoder{level}"] = pair
            skips.append(pair)
        for level in reversed(range(self.config.depth - 1)):
            pair = _concat_pair(skips[level], pair.map(nn.upsample_nearest2))
            pair = self.decoders[level](pair)
            feats[f"decoder{level}"] = pair
        return self.final(pair)

    def conv_layers(self):
        """Yield ``(layer, level)`` for every trainable convolution."""
        for level, stage in enumerate(self.encoders):
            for b in stage.blocks:
                yield b.conv, level
        for level, stage in self.decoders.items():
            for b in stage.blocks:
                yield b.conv, level
        yield self.final, 0


class _PlainBlock(nn.Module):
    def __init__(self, conv: nn.Module, channels: int, dtype):
        super().__init__()
        self.conv = conv
        self.bn = nn.BatchNorm2d(channels, dtype=dtype)

    def forward(self, x: Node) -> Node:
        return nn.relu(self.bn(self.conv(x)))


class BaselineUNet(_UNetBase):
    """The same macro-architecture built from plain convolutions only.

    Parameters are drawn from ``rng`` in the same order as an ``alpha=0``
    :class:`OctaveUNet`, so both models are initialized identically.
    """

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng()
        k = config.kernel_size
        self.encoders: list[Stage] = []
        for level in range(config.depth):
            c = config.channels(level)
            blocks = []
            for j in range(config.convs_per_block):
                c_in = c if j else (config.input_channels if level == 0 else config.channels(level - 1))
                blocks.append(_PlainBlock(nn.Conv2d(c_in, c, k, 1, k // 2, rng=rng, dtype=dtype), c, dtype))
            stage = Stage(blocks)
            self.add_module(f"encoder{level}", stage)
            self.encoders.append(stage)
        self.decoders: dict[int, Stage] = {}
        for level in reversed(range(config.depth - 1)):
            c = config.channels(level)
            blocks = [_PlainBlock(nn.ConvTranspose2d(c + config.channels(level + 1), c, k, 1, k // 2,
                                                     rng=rng, dtype=dtype), c, dtype)]
            for _ in range(config.convs_per_block - 1):
                blocks.append(_PlainBlock(nn.Conv2d(c, c, k, 1, k // 2, rng=rng, dtype=dtype), c, dtype))
            stage = Stage(blocks)
            self.add_module(f"decoder{level}", stage)
            self.decoders[level] = stage
        self.final = nn.ConvTranspose2d(config.channels(0), 1, k, 1, k // 2, rng=rng, dtype=dtype)

    def _run(self, x: Node, feats: dict) -> Node:
        skips = []
        for level, stage in enumerate(self.encoders):
            if level:
                x = nn.max_pool2(x)
            x = stage(x)
            feats[f"encoder{level}"] = OctavePair(high=x)
            skips.append(x)
        for level in reversed(range(self.config.depth - 1)):
            x = nn.concat_channels(skips[level], nn.upsample_nearest2(x))
            x = self.decoders[level](x)
            feats[f"decoder{level}"] = OctavePair(high=x)
        return nn.sigmoid(self.final(x))

    def conv_layers(self):
        for level, stage in enumerate(self.encoders):
            for b in stage.blocks:
                yield b.conv, level
        for level, stage in self.decoders.items():
            for b in stage.blocks:
                yield b.conv, level
        yield self.final, 0


UNet = Union[OctaveUNet, BaselineUNet]


def build(config: ModelConfig, seed: Union[int, np.random.Generator] = 0, dtype=np.float32) -> OctaveUNet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return OctaveUNet(config, rng=rng, dtype=dtype)


def build_baseline(config: ModelConfig, seed: Union[int, np.random.Generator] = 0, dtype=np.float32) -> BaselineUNet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return BaselineUNet(config, rng=rng, dtype=dtype)


def extract_features(model: UNet, image, taps: Sequence[str]) -> dict[str, OctavePair]:
    """Post-activation feature pairs at the named blocks (eval mode, no graph)."""
    with no_grad():
        _, feats = model(image, training=False, taps=taps)
    return feats


def predict(model: UNet, image: np.ndarray) -> np.ndarray:
    """Eval-mode probability map for ``C x H x W`` or ``N x C x H x W`` input of any size."""
    squeeze = image.ndim == 3
    batch = image[None] if squeeze else image
    padded, record = pad_to_grid(batch, model.config.depth)
    dtype = next(iter(model.parameters())).dtype
    with no_grad():
        out = model(padded.astype(dtype, copy=False), training=False).value
    out = crop_to_record(out, record)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# padding


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int


def pad_to_grid(image: np.ndarray, depth: int) -> tuple[np.ndarray, CropRecord]:
    """Reflect-pad the bottom/right edges up to the next multiple of ``2**depth``."""
    h, w = image.shape[-2:]
    grid = 2 ** depth
    ph, pw = (-h) % grid, (-w) % grid
    record = CropRecord(h, w)
    if ph == 0 and pw == 0:
        return image.copy(), record
    widths = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    if ph < h and pw < w:
        mode = "reflect"
    elif ph <= h and pw <= w:
        mode = "symmetric"
    else:
        mode = "edge"
    return np.pad(image, widths, mode=mode), record


def crop_to_record(image: np.ndarray, record: CropRecord) -> np.ndarray:
    return image[..., : record.height, : record.width].copy()


# ---------------------------------------------------------------------------
# cost accounting


def count_params(model: nn.Module) -> int:
    return sum(int(p.value.size) for p in model.parameters())


def _layer_macs(layer, height: int, width: int) -> int:
    if isinstance(layer, OctaveConv):
        return layer.macs(height, width)
    co_ci_kk = int(np.prod(layer.weight.shape))
    return co_ci_kk * height * width


def count_macs(model: UNet, height: int, width: int) -> int:
    """Analytic multiply-accumulates of one forward pass on one image."""
    _check_grid((height, width), model.config.depth)
    return sum(_layer_macs(layer, height >> level, width >> level) for layer, level in model.conv_layers())


def count_flops(model: UNet, height: int, width: int) -> int:
    """2 x multiply-accumulates over all convolution paths (BN/activations excluded)."""
    return 2 * count_macs(model, height, width)


def measure_macs(model: UNet, height: int, width: int) -> int:
    """Multiply-accumulates actually executed by a forward pass on a zero image."""
    dtype = next(iter(model.parameters())).dtype
    x = np.zeros((1, model.config.input_channels, height, width), dtype=dtype)
    with no_grad(), nn.count_macs() as counter:
        model(x, training=False)
    return counter.total


def flops_multiplier(alpha: float) -> float:
    """Cost of an octave layer relative to a plain one, all paths present."""
    return (1 - alpha) ** 2 + alpha * (1 - alpha) / 2 + alpha ** 2 / 4
