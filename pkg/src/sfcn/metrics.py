"""Pixel-wise road detection metrics and the max-F threshold sweep."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from .layers import IGNORE_LABEL


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int
    tau: float

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn, self.tau
        )


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    accuracy: float
    f_measure: float
    fpr: float
    fnr: float
    gamma: float = 1.0

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "\n".join(f"{k}={v!r}" for k, v in self.as_dict().items())


def _valid_and_gt(gt):
    gt = np.asarray(gt)
    valid = gt != IGNORE_LABEL
    return valid, gt == 1


def confusion(scores, gt, tau: float = 0.5) -> ConfusionCounts:
    """Counts for prediction ``scores >= tau``; void pixels in ``gt`` are skipped."""
    scores = np.asarray(scores)
    if scores.shape != np.shape(gt):
        raise ValueError(f"shape mismatch: scores {scores.shape} vs gt {np.shape(gt)}")
    valid, pos = _valid_and_gt(gt)
    pred = scores >= tau
    tp = int(np.count_nonzero(pred & pos & valid))
    fp = int(np.count_nonzero(pred & ~pos & valid))
    fn = int(np.count_nonzero(~pred & pos & valid))
    tn = int(np.count_nonzero(valid)) - tp - fp - fn
    return ConfusionCounts(tp, fp, tn, fn, float(tau))


def _div(num, den):
    return num / den if den else 0.0


def f_measure(precision: float, recall: float, gamma: float = 1.0) -> float:
    g2 = gamma * gamma
    den = g2 * precision + recall
    return (1.0 + g2) * precision * recall / den if den else 0.0


def metrics(c: ConfusionCounts, gamma: float = 1.0) -> MetricsReport:
    """Precision, recall, accuracy, F, FPR and FNR from confusion counts.

    Degenerate quotients: precision with nothing predicted is 1 when there
    was also nothing to find (FN = 0) and 0 otherwise; recall with nothing
    to find is 1 when nothing was predicted (FP = 0) and 0 otherwise; every
    other 0/0 is 0.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if c.tp + c.fp:
        precision = c.tp / (c.tp + c.fp)
    else:
        precision = 1.0 if c.fn == 0 else 0.0
    if c.tp + c.fn:
        recall = c.tp / (c.tp + c.fn)
    else:
        recall = 1.0 if c.fp == 0 else 0.0
    return MetricsReport(
        precision=precision,
        recall=recall,
        accuracy=_div(c.tp + c.tn, c.total),
        f_measure=f_measure(precision, recall, gamma),
        fpr=_div(c.fp, c.fp + c.tn),
        fnr=_div(c.fn, c.tp + c.fn),
        gamma=gamma,
    )


def default_sweep(steps: int = 256) -> np.ndarray:
    """``k / steps`` for ``k = 1 .. steps - 1``."""
    return np.arange(1, steps) / steps


@dataclass
class MaxFResult:
    tau: float
    f: float
    curve: list  # rows (tau, precision, recall, f), in sweep order
    gamma: float = 1.0


def _counts_at_thresholds(scores, gt, thresholds):
    """Vectorised TP/FP/FN/TN for ``scores >= t`` at each threshold."""
    valid, pos = _valid_and_gt(gt)
    s = np.asarray(scores, dtype=np.float64)[valid]
    p = pos[valid]
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    p_sorted = p[order]
    n = s_sorted.size
    total_pos = int(p_sorted.sum())
    # positives/negatives with score < t
    cum_pos = np.concatenate([[0], np.cumsum(p_sorted)])
    below = np.searchsorted(s_sorted, thresholds, side="left")
    pos_below = cum_pos[below]
    neg_below = below - pos_below
    tp = total_pos - pos_below
    fp = (n - total_pos) - neg_below
    fn = pos_below
    tn = neg_below
    return tp, fp, tn, fn


def max_f(scores, gt, gamma: float = 1.0, sweep: Optional[Sequence[float]] = None) -> MaxFResult:
    """Threshold maximising the F-measure.

    Candidates are the ``sweep`` thresholds (default 255 uniform steps) plus
    every distinct score value present, so the maximum is exact rather than
    grid-limited.  Ties go to the smallest threshold.  The returned curve
    holds one row per sweep threshold, in sweep order.
    """
    sweep = default_sweep() if sweep is None else np.asarray(sweep, dtype=np.float64)
    if sweep.size == 0:
        raise ValueError("threshold sweep must be nonempty")
    valid, _ = _valid_and_gt(gt)
    observed = np.unique(np.asarray(scores, dtype=np.float64)[valid])
    taus = np.unique(np.concatenate([sweep, observed]))
    tp, fp, tn, fn = _counts_at_thresholds(scores, gt, taus)
    fs = np.array([
        metrics(ConfusionCounts(int(a), int(b), int(c), int(d), float(t)), gamma).f_measure
        for a, b, c, d, t in zip(tp, fp, tn, fn, taus)
    ])
    best = int(np.argmax(fs))  # first maximum, i.e. smallest tau
    ctp, cfp, ctn, cfn = _counts_at_thresholds(scores, gt, sweep)
    curve = []
    for i, t in enumerate(sweep):
        rep = metrics(ConfusionCounts(int(ctp[i]), int(cfp[i]), int(ctn[i]), int(cfn[i]), float(t)), gamma)
        curve.append((float(t), rep.precision, rep.recall, rep.f_measure))
    return MaxFResult(float(taus[best]), float(fs[best]), curve, gamma)


def write_pr_curve(path, result: MaxFResult) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("tau,precision,recall,f\n")
        for row in result.curve:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def report_csv_row(rep: MetricsReport, extra: Optional[dict] = None) -> tuple[str, str]:
    """Header and value line for one report, with optional leading columns."""
    d = dict(extra or {})
    d.update(rep.as_dict())
    return ",".join(d), ",".join(str(v) for v in d.values())
