"""Class-weighted BCE, Adam, the plateau learning-rate schedule and the training loop."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import checkpoint
from .autograd import Node, backward, make_node
from .data.augment import AugmentationConfig, augment
from .data.sample import Sample
from .errors import ConfigError, DataError, DegenerateDataError, NonFiniteError, ShapeError
from .evaluation import evaluate
from .unet import UNet, predict

logger = logging.getLogger(__name__)

WEIGHT_MODES = ("paper-ratio", "inverse-ratio", "manual")
REDUCTIONS = ("mean", "sum")


@dataclass
class LossConfig:
    w_pos: float = 1.0
    weight_mode: str = "paper-ratio"
    reduction: str = "mean"
    eps: float = 1e-7

    def __post_init__(self):
        if self.w_pos <= 0:
            raise ConfigError("w_pos must be positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}")
        if not 0 < self.eps <= 1e-3:
            raise ConfigError("clamp eps must lie in (0, 1e-3]")


def weighted_bce(pred: Node, target: np.ndarray, cfg: LossConfig) -> Node:
    """-(w_pos * y * log(p) + (1 - y) * log(1 - p)), summed or averaged over pixels.

    Predictions are clamped to [eps, 1 - eps]; the gradient is zero where the
    clamp is active.
    """
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    if not np.all((target == 0) | (target == 1)):
        raise DataError("target must contain only 0 and 1")
    p = pred.value
    dt = p.dtype.type
    lo, hi = dt(cfg.eps), dt(1) - dt(cfg.eps)
    pc = np.clip(p, lo, hi)
    y = target.astype(p.dtype, copy=False)
    w = dt(cfg.w_pos)
    per_pixel = -(w * y * np.log(pc) + (1 - y) * np.log(1 - pc))
    scale = dt(1.0 / p.size) if cfg.reduction == "mean" else dt(1)
    value = np.asarray(per_pixel.sum(dtype=np.float64) * scale, dtype=p.dtype)

    def bw(g):
        inside = (p >= lo) & (p <= hi)
        dp = -(w * y / pc - (1 - y) / (1 - pc)) * scale
        return (np.where(inside, dp * g, 0).astype(p.dtype),)

    return make_node(value, (pred,), bw, "weighted_bce")


def compute_pos_weight(truths: Iterable[np.ndarray], mode: str = "paper-ratio") -> float:
    """p_pos / p_neg over all ground-truth pixels (``inverse-ratio``: p_neg / p_pos)."""
    pos = neg = 0
    for t in truths:
        t = np.asarray(t)
        n_pos = int(np.count_nonzero(t))
        pos += n_pos
        neg += t.size - n_pos
    if pos == 0 or neg == 0:
        raise DegenerateDataError(f"training set has {pos} positive and {neg} negative pixels")
    if mode == "paper-ratio":
        return pos / neg
    if mode == "inverse-ratio":
        return neg / pos
    raise ConfigError(f"cannot derive a weight for mode {mode!r}")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, Optional[np.ndarray]],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype, copy=False)


class Adam:
    def __init__(self, named_params: Sequence[tuple[str, Node]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step({n: p.value for n, p in self.params.items()},
                  {n: p.grad for n, p in self.params.items()}, self.state, self.lr)


# ---------------------------------------------------------------------------
# schedule


@dataclass
class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    lr: float = 1e-3
    factor: float = 0.9
    patience: int = 10
    tolerance: float = 1e-6
    best: float = math.inf
    since_improvement: int = 0

    def step(self, loss: float) -> float:
        if not math.isfinite(loss):
            raise NonFiniteError(f"schedule received non-finite loss {loss}")
        if loss < self.best - self.tolerance:
            self.best = loss
            self.since_improvement = 0
        else:
            self.since_improvement += 1
            if self.since_improvement >= self.patience:
                self.lr *= self.factor
                self.since_improvement = 0
        return self.lr


# ---------------------------------------------------------------------------
# loop

LOG_HEADER = "epoch,loss,lr,acc,se,sp,f1,auroc,ap"


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 1
    lr: float = 1e-3
    loss_weight_mode: str = "paper-ratio"
    pos_weight: Optional[float] = None
    reduction: str = "mean"
    clamp_eps: float = 1e-7
    patience: int = 10
    decay: float = 0.9
    seed: int = 0
    augment: bool = True
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    eval_every: int = 1
    threshold: float = 0.5

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs, batch_size and eval_every must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.loss_weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"loss_weight_mode must be one of {WEIGHT_MODES}")
        if self.loss_weight_mode == "manual" and self.pos_weight is None:
            raise ConfigError("manual loss weighting needs pos_weight")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    metrics: Optional[dict] = None

    def csv(self) -> str:
        keys = ("acc", "se", "sp", "f1", "auroc", "ap")
        vals = [_fmt(self.metrics[k]) if self.metrics else "" for k in keys]
        return ",".join([str(self.epoch), _fmt(self.loss), _fmt(self.lr), *vals])


@dataclass
class TrainResult:
    history: list[EpochRecord]
    pos_weight: float
    best_epoch: Optional[int] = None
    best_auroc: Optional[float] = None

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.history]


def _fmt(x: float) -> str:
    return repr(float(x))


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[i : i + size] for i in range(0, len(order), size)]


def train(
    model: UNet,
    train_samples: Sequence[Sample],
    config: TrainConfig,
    val_samples: Optional[Sequence[Sample]] = None,
    out_dir: Optional[os.PathLike] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Train in place; returns the per-epoch history.

    With ``out_dir`` set, writes ``train_log.csv`` (appended once per epoch),
    ``final.octv`` and, when validation samples are given, ``best.octv``
    (highest validation AUROC).
    """
    if not train_samples:
        raise DataError("training set is empty")
    if config.loss_weight_mode == "manual":
        w_pos = float(config.pos_weight)
    else:
        w_pos = compute_pos_weight((s.truth for s in train_samples), config.loss_weight_mode)
    loss_cfg = LossConfig(w_pos=w_pos, weight_mode=config.loss_weight_mode,
                          reduction=config.reduction, eps=config.clamp_eps)
    rng = np.random.default_rng(config.seed)
    opt = Adam(list(model.named_parameters()), lr=config.lr)
    schedule = PlateauSchedule(lr=config.lr, factor=config.decay, patience=config.patience)
    dtype = next(iter(model.parameters())).dtype

    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        log_path.write_text(LOG_HEADER + "\n")

    result = TrainResult(history=[], pos_weight=w_pos)
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(train_samples))
        losses = []
        for step, idx in enumerate(_batches(order, config.batch_size)):
            batch = [train_samples[i] for i in idx]
            if config.augment:
                batch = [augment(s, config.augmentation, rng) for s in batch]
            x = np.stack([s.image for s in batch]).astype(dtype, copy=False)
            y = np.stack([s.truth for s in batch]).astype(dtype, copy=False)
            pred = model(x, training=True)
            loss = weighted_bce(pred, y, loss_cfg)
            value = float(loss.value)
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(value)
        epoch_loss = float(np.mean(losses))
        record = EpochRecord(epoch, epoch_loss, opt.lr)
        opt.lr = schedule.step(epoch_loss)

        if val_samples and (epoch % config.eval_every == 0 or epoch == config.epochs):
            report = evaluate_model(model, val_samples, threshold=config.threshold)
            record.metrics = report.summary()
            auroc = record.metrics["auroc"]
            if result.best_auroc is None or auroc > result.best_auroc:
                result.best_auroc, result.best_epoch = auroc, epoch
                if out is not None:
                    checkpoint.save(model, out / "best.octv")
        result.history.append(record)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(record.csv() + "\n")
        logger.info("epoch %d loss %.6f lr %.3g", epoch, epoch_loss, record.lr)
        if on_epoch is not None:
            on_epoch(record)

    if out is not None:
        checkpoint.save(model, out / "final.octv")
    return result


def evaluate_model(model: UNet, samples: Sequence[Sample], threshold: float = 0.5, use_fov: bool = False):
    probs = [predict(model, s.image)[0] for s in samples]
    truths = [s.truth[0] for s in samples]
    fovs = [s.fov[0] if (use_fov and s.fov is not None) else None for s in samples]
    return evaluate(probs, truths, fovs, threshold=threshold, ids=[s.id for s in samples])
