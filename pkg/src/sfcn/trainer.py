"""Mini-batch SGD training, validation and convergence comparison."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import layers as L
from .contour import detect_contour, load_contour, replicate3
from .metrics import ConfusionCounts, MetricsReport, confusion, max_f, metrics
from .network import ArchConfig, NetworkGraph, build_network, road_probability

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    optimizer: L.OptimizerConfig = field(default_factory=L.OptimizerConfig)
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    eval_interval: int = 0
    seed: int = 7

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class LossCurve:
    iterations: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)

    def append(self, it, loss, sec, f1=None):
        if self.iterations and it <= self.iterations[-1]:
            raise ValueError("iterations must be strictly increasing")
        if self.seconds and sec < self.seconds[-1]:
            raise ValueError("wall-clock must be nondecreasing")
        self.iterations.append(int(it))
        self.losses.append(float(loss))
        self.seconds.append(float(sec))
        self.val_f1.append(None if f1 is None else float(f1))

    def __len__(self):
        return len(self.iterations)

    def to_csv(self, path, include_seconds: bool = True):
        cols = ["iteration", "loss", "seconds", "val_f1"] if include_seconds else ["iteration", "loss", "val_f1"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for it, loss, sec, f1 in zip(self.iterations, self.losses, self.seconds, self.val_f1):
                row = [it, repr(loss)] + ([f"{sec:.6f}"] if include_seconds else []) + ["" if f1 is None else repr(f1)]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "LossCurve":
        curve = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                f1 = row.get("val_f1") or None
                curve.append(int(row["iteration"]), float(row["loss"]), float(row.get("seconds") or 0.0),
                             None if f1 is None else float(f1))
        return curve


# ------------------------------------------------------------------ data


# subtracted from RGB so it enters the trunk roughly zero-centred; uncentred
# [0, 1] inputs left some seeds stuck on a prior-only solution.  Contour maps
# are sparse (mean near 0.06) and go in unchanged, zero meaning "no edge".
INPUT_OFFSET = 0.5


@dataclass
class Batchable:
    """Samples stacked into arrays the network consumes directly.

    Images are shifted by ``-INPUT_OFFSET``; auxiliary maps are kept as-is.
    """

    images: np.ndarray  # (N, 3, H, W)
    aux: Optional[np.ndarray]  # (N, 3, H, W) or None
    labels: np.ndarray  # (N, H, W)

    def __len__(self):
        return self.images.shape[0]


def contour_for(sample) -> np.ndarray:
    path = sample.meta.get("contour_path")
    if path:
        c = load_contour(path)
        if c.shape != sample.mask.shape:
            raise ValueError(f"{path}: contour extent {c.shape} != image extent {sample.mask.shape}")
        return c
    return detect_contour(sample.image)


def stack_samples(samples: Sequence, with_aux: bool) -> Batchable:
    if not samples:
        raise ValueError("dataset is empty")
    images = np.concatenate([s.image for s in samples], axis=0) - INPUT_OFFSET
    labels = np.stack([s.mask for s in samples]).astype(np.int64)
    aux = None
    if with_aux:
        aux = np.concatenate([replicate3(contour_for(s)) for s in samples], axis=0)
    return Batchable(images, aux, labels)


# ------------------------------------------------------------------ training


def _iteration_seed(seed: int, it: int) -> int:
    return seed * 1_000_003 + it


def predict_probabilities(graph: NetworkGraph, data: Batchable, batch: int = 8) -> np.ndarray:
    """Road probability maps (N, H, W) in inference mode."""
    out = []
    loc = graph.location_prior(data.images.shape[2])
    for i in range(0, len(data), batch):
        aux = None if data.aux is None else data.aux[i:i + batch]
        scores, _ = graph.forward(data.images[i:i + batch], aux, loc, training=False)
        out.append(road_probability(scores))
    return np.concatenate(out, axis=0)


def evaluate(graph: NetworkGraph, data: Batchable, tau: float = 0.5, gamma: float = 1.0):
    """Perspective-space metrics at ``tau`` and the max-F sweep over the whole set."""
    probs = predict_probabilities(graph, data)
    counts = confusion(probs, data.labels, tau)
    return metrics(counts, gamma), max_f(probs, data.labels, gamma), probs


def train(arch: ArchConfig, cfg: TrainConfig, data: Batchable, val: Optional[Batchable] = None,
          store: Optional[L.ParameterStore] = None, progress=None):
    """Train one variant.  Returns ``(graph, curve)``.

    Sampling walks seeded per-epoch permutations of the training set;
    dropout masks are seeded per iteration and stream, so the run is a pure
    function of ``(arch, cfg, data)``.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    if arch.siamesed and data.aux is None:
        raise ValueError(f"variant {arch.variant} needs auxiliary (contour) inputs")
    graph = build_network(arch, store)
    loc = graph.location_prior(data.images.shape[2])
    rng = np.random.default_rng([cfg.seed, 1])
    order = np.empty(0, dtype=np.int64)
    curve = LossCurve()
    elapsed = 0.0
    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        while order.size < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(data))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        aux = None if data.aux is None else data.aux[idx]
        scores, state = graph.forward(data.images[idx], aux, loc, training=True,
                                      seed=_iteration_seed(cfg.seed, it))
        loss, grad = L.softmax_xent_perpixel(scores, data.labels[idx], cfg.loss)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at iteration {it}")
        graph.backward(state, grad)
        L.sgd_momentum_step(graph.store, cfg.optimizer)
        elapsed += time.perf_counter() - t0
        f1 = None
        if val is not None and cfg.eval_interval and (it % cfg.eval_interval == 0 or it == cfg.iterations):
            rep, _, _ = evaluate(graph, val)
            f1 = rep.f_measure
            msg = f"{arch.variant} iter {it} loss {loss:.5f} val_f1 {f1:.4f} ({elapsed:.1f}s)"
            if progress:
                progress(msg)
            else:
                log.info(msg)
        curve.append(it, loss, elapsed, f1)
    return graph, curve


def arch_header(arch: ArchConfig) -> dict:
    return {
        "variant": arch.variant,
        "input_size": arch.input_size,
        "width": arch.width,
        "loc_attach": arch.loc_attach,
        "dropout": arch.dropout,
        "seed": arch.seed,
    }


def arch_from_header(header: dict) -> ArchConfig:
    return ArchConfig(
        variant=header["variant"],
        input_size=int(header["input_size"]),
        width=int(header["width"]),
        loc_attach=header["loc_attach"],
        dropout=float(header["dropout"]),
        seed=int(header["seed"]),
    )


# ------------------------------------------------------------------ convergence


def smoothed(losses: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries average what exists."""
    x = np.asarray(losses, dtype=np.float64)
    if window <= 1:
        return x
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class ConvergenceRow:
    name: str
    iteration: Optional[int]
    seconds: Optional[float]
    iteration_ratio: Optional[float]
    seconds_ratio: Optional[float]

    @property
    def reached(self) -> bool:
        return self.iteration is not None


def first_reach(curve: LossCurve, target: float, window: int = 1):
    """First ``(iteration, seconds)`` at which the (smoothed) loss is <= target."""
    s = smoothed(curve.losses, window)
    hits = np.nonzero(s <= target)[0]
    if hits.size == 0:
        return None, None
    k = int(hits[0])
    return curve.iterations[k], curve.seconds[k]


def compare_convergence(curves: dict, target: float, baseline: Optional[str] = None, window: int = 1):
    """Iterations and wall-clock each curve needs to reach ``target``.

    Ratios are relative to ``baseline`` (default: the first curve); curves
    that never reach the target are reported with ``None`` entries.
    """
    if len(curves) < 2:
        raise ValueError("compare_convergence needs at least two curves")
    names = list(curves)
    baseline = names[0] if baseline is None else baseline
    reach = {n: first_reach(c, target, window) for n, c in curves.items()}
    b_it, b_sec = reach[baseline]
    rows = []
    for n in names:
        it, sec = reach[n]
        it_ratio = sec_ratio = None
        if it is not None and b_it is not None:
            it_ratio = it / b_it
            sec_ratio = sec / b_sec if b_sec > 0 else (1.0 if sec == b_sec else math.inf)
        rows.append(ConvergenceRow(n, it, sec, it_ratio, sec_ratio))
    return rows


def final_loss(curve: LossCurve, window: int = 1) -> float:
    return float(smoothed(curve.losses, window)[-1])
