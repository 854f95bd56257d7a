"""Segmentation metrics: confusion counts, ACC/SE/SP/F1, AUROC, AP and threshold sweeps.

Conventions:

* a pixel is predicted positive when ``prob >= tau``;
* SE, SP, F1 and ACC with a zero denominator are defined as 1;
* AUROC is the Mann-Whitney statistic with tied scores counted as half;
* AP is the step sum ``sum_i (R_i - R_{i-1}) * P_i`` over descending unique scores.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateDataError, ShapeError

METRICS = ("acc", "se", "sp", "f1")


def default_grid() -> np.ndarray:
    """0.01, 0.02, ..., 0.99 (each value is i / 100, so 0.5 is exact)."""
    return np.arange(1, 100) / 100.0


def binarize(probs: np.ndarray, tau: float = 0.5) -> np.ndarray:
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {tau}")
    return (np.asarray(probs) >= tau).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _squeeze(a) -> np.ndarray:
    a = np.asarray(a)
    return a[0] if a.ndim == 3 and a.shape[0] == 1 else a


def _region(truth, fov, *others):
    """Flatten ``truth`` and ``others`` to the evaluated pixels."""
    truth = _squeeze(truth)
    arrays = [_squeeze(o) for o in others]
    for a in arrays:
        if a.shape != truth.shape:
            raise ShapeError(f"shape {a.shape} does not match truth {truth.shape}")
    if fov is None:
        return (truth.reshape(-1) != 0, *(a.reshape(-1) for a in arrays))
    fov = _squeeze(fov)
    if fov.shape != truth.shape:
        raise ShapeError(f"fov {fov.shape} does not match truth {truth.shape}")
    keep = fov.reshape(-1) != 0
    return (truth.reshape(-1)[keep] != 0, *(a.reshape(-1)[keep] for a in arrays))


def confusion(pred: np.ndarray, truth: np.ndarray, fov: Optional[np.ndarray] = None) -> ConfusionCounts:
    t, p = _region(truth, fov, pred)
    p = p != 0
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, t.size - tp - fp - fn, fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def scalar_metrics(c: ConfusionCounts) -> dict[str, float]:
    return {
        "acc": _ratio(c.tp + c.tn, c.total),
        "se": _ratio(c.tp, c.tp + c.fn),
        "sp": _ratio(c.tn, c.tn + c.fp),
        "f1": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
    }


def _score_groups(scores: np.ndarray, labels: np.ndarray):
    """Positive and negative counts per unique score, scores descending."""
    order = np.argsort(-scores.astype(np.float64), kind="stable")
    s, y = scores[order], labels[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    pos = np.add.reduceat(y.astype(np.int64), starts)
    size = np.diff(np.r_[starts, s.size])
    return pos, size - pos


def auroc(probs: np.ndarray, truth: np.ndarray, fov: Optional[np.ndarray] = None) -> float:
    t, p = _region(truth, fov, probs)
    n_pos = int(np.count_nonzero(t))
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError(f"AUROC needs both classes (got {n_pos} positive, {n_neg} negative)")
    pos, neg = _score_groups(p, t)
    neg_below = n_neg - np.cumsum(neg)  # negatives with strictly lower score
    twice_u = int(np.sum(2 * pos * neg_below + pos * neg))
    return twice_u / (2 * n_pos * n_neg)


def average_precision(probs: np.ndarray, truth: np.ndarray, fov: Optional[np.ndarray] = None) -> float:
    t, p = _region(truth, fov, probs)
    n_pos = int(np.count_nonzero(t))
    if n_pos == 0:
        raise DegenerateDataError("average precision needs at least one positive pixel")
    pos, neg = _score_groups(p, t)
    tp = np.cumsum(pos)
    fp = np.cumsum(neg)
    precision = tp / (tp + fp)
    recall_step = pos / n_pos
    return float(np.sum(recall_step * precision))


@dataclass
class SweepCurves:
    taus: np.ndarray
    counts: list[ConfusionCounts]
    acc: np.ndarray
    se: np.ndarray
    sp: np.ndarray
    f1: np.ndarray

    def at(self, tau: float) -> dict[str, float]:
        idx = np.flatnonzero(self.taus == tau)
        if idx.size == 0:
            raise KeyError(f"threshold {tau} is not on the sweep grid")
        i = int(idx[0])
        return {k: float(getattr(self, k)[i]) for k in METRICS}

    def csv(self) -> str:
        lines = ["tau,acc,se,sp,f1"]
        for i, tau in enumerate(self.taus):
            lines.append(",".join(repr(float(v)) for v in (tau, self.acc[i], self.se[i], self.sp[i], self.f1[i])))
        return "\n".join(lines) + "\n"


def _counts_at(pos_sorted: np.ndarray, neg_sorted: np.ndarray, tau: float) -> ConfusionCounts:
    # number of scores >= tau in an ascending array
    tp = pos_sorted.size - int(np.searchsorted(pos_sorted, tau, side="left"))
    fp = neg_sorted.size - int(np.searchsorted(neg_sorted, tau, side="left"))
    return ConfusionCounts(tp, fp, neg_sorted.size - fp, pos_sorted.size - tp)


def threshold_sweep(probs, truth, fov=None, grid: Optional[Sequence[float]] = None) -> SweepCurves:
    """Metrics at every threshold of ``grid`` (default 0.01..0.99).

    ``probs`` / ``truth`` / ``fov`` may be single maps or equal-length lists
    of maps, which are pooled.
    """
    taus = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if taus.size == 0 or np.any(np.diff(taus) <= 0):
        raise ConfigError("threshold grid must be nonempty and strictly ascending")
    if taus[0] < 0 or taus[-1] > 1:
        raise ConfigError("thresholds must lie in [0, 1]")
    if isinstance(probs, (list, tuple)):
        fovs = fov if isinstance(fov, (list, tuple)) else [fov] * len(probs)
        parts = [_region(t, f, p) for p, t, f in zip(probs, truth, fovs)]
        t = np.concatenate([a for a, _ in parts])
        p = np.concatenate([b for _, b in parts])
    else:
        t, p = _region(truth, fov, probs)
    p = p.astype(np.float64)
    pos_sorted, neg_sorted = np.sort(p[t]), np.sort(p[~t])
    counts = [_counts_at(pos_sorted, neg_sorted, float(tau)) for tau in taus]
    rows = [scalar_metrics(c) for c in counts]
    return SweepCurves(taus, counts, *(np.array([r[k] for r in rows]) for k in METRICS))


def analytical_map(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """3 x H x W uint8 map: TP green, FP red, FN blue, TN black."""
    p, t = _squeeze(pred) != 0, _squeeze(truth) != 0
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ")
    out = np.zeros((3, *t.shape), dtype=np.uint8)
    out[0][p & ~t] = 255
    out[1][p & t] = 255
    out[2][~p & t] = 255
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class ImageResult:
    id: str
    counts: ConfusionCounts
    metrics: dict[str, float]
    auroc: Optional[float]
    ap: Optional[float]


@dataclass
class EvalReport:
    threshold: float
    fov_restricted: bool
    counts: ConfusionCounts
    metrics: dict[str, float]
    auroc: float
    ap: float
    curves: SweepCurves
    per_image: list[ImageResult] = field(default_factory=list)

    def summary(self) -> dict[str, float]:
        return {**self.metrics, "auroc": self.auroc, "ap": self.ap}

    def table(self) -> str:
        region = "FOV" if self.fov_restricted else "all pixels"
        lines = [f"threshold {self.threshold}  region {region}  images {len(self.per_image)}",
                 f"{'id':<16}{'ACC':>9}{'SE':>9}{'SP':>9}{'F1':>9}{'AUROC':>9}{'AP':>9}"]

        def fmt(v):
            return f"{v:>9.4f}" if v is not None else f"{'-':>9}"

        for r in self.per_image:
            m = r.metrics
            lines.append(f"{r.id:<16}" + "".join(fmt(v) for v in (m["acc"], m["se"], m["sp"], m["f1"], r.auroc, r.ap)))
        s = self.summary()
        lines.append(f"{'pooled':<16}" + "".join(fmt(s[k]) for k in ("acc", "se", "sp", "f1", "auroc", "ap")))
        return "\n".join(lines) + "\n"


def _or_none(fn, *args) -> Optional[float]:
    try:
        return fn(*args)
    except DegenerateDataError:
        return None


def evaluate(
    probs: Sequence[np.ndarray],
    truths: Sequence[np.ndarray],
    fovs: Optional[Sequence[Optional[np.ndarray]]] = None,
    threshold: float = 0.5,
    ids: Optional[Sequence[str]] = None,
    grid: Optional[Sequence[float]] = None,
) -> EvalReport:
    """Per-image and pooled metrics; pooled values use the concatenated pixels of all images.

    Single-class images get ``None`` for their own AUROC / AP; the pooled
    values raise :class:`DegenerateDataError` if the whole set is single-class.
    """
    n = len(probs)
    if n == 0 or len(truths) != n:
        raise ShapeError("need equally many (and at least one) probability maps and truths")
    fovs = list(fovs) if fovs is not None else [None] * n
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    per_image, total = [], ConfusionCounts()
    flat_t, flat_p = [], []
    for pid, p, t, f in zip(ids, probs, truths, fovs):
        c = confusion(binarize(p, threshold), t, f)
        total = total + c
        per_image.append(ImageResult(pid, c, scalar_metrics(c), _or_none(auroc, p, t, f),
                                     _or_none(average_precision, p, t, f)))
        tt, pp = _region(t, f, p)
        flat_t.append(tt)
        flat_p.append(pp)
    t_all, p_all = np.concatenate(flat_t), np.concatenate(flat_p)
    return EvalReport(
        threshold=threshold,
        fov_restricted=any(f is not None for f in fovs),
        counts=total,
        metrics=scalar_metrics(total),
        auroc=auroc(p_all, t_all),
        ap=average_precision(p_all, t_all),
        curves=threshold_sweep(p_all, t_all, grid=grid),
        per_image=per_image,
    )


def write_report(report: EvalReport, out_dir: os.PathLike, suffix: str = "") -> None:
    """``report<suffix>.txt`` (table), ``curves<suffix>.csv`` and ``per_image<suffix>.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"report{suffix}.txt").write_text(report.table())
    (out / f"curves{suffix}.csv").write_text(report.curves.csv())
    rows = ["id,tp,fp,tn,fn,acc,se,sp,f1,auroc,ap"]
    for r in report.per_image:
        c, m = r.counts, r.metrics
        vals = [c.tp, c.fp, c.tn, c.fn, *(m[k] for k in METRICS), r.auroc, r.ap]
        rows.append(",".join([r.id] + ["" if v is None else repr(v) for v in vals]))
    (out / f"per_image{suffix}.csv").write_text("\n".join(rows) + "\n")
