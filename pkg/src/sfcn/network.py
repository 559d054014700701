"""Baseline FCN-16s, siamesed s-FCN and s-FCN-loc at configurable scale.

Each stream runs the same trunk: five blocks of two 3x3 conv+ReLU layers and
a 2x2 max-pool (widths C, 2C, 4C, 8C, 8C), then ``fc6`` (3x3, 16C) and ``fc7``
(1x1, 16C), each followed by ReLU and dropout.  The stride-16 output of block
four is the ``pool4`` tap and the ``fc7`` output is the ``conv7`` tap.

In the siamesed variants the second stream looks up exactly the same
parameter ids as the first, so the two streams hold one set of weights and
their gradients add up in the shared buffers.  The taps of both streams are
concatenated along channels, optionally extended with the 2-channel location
prior, scored by 1x1 convolutions and fused the FCN-16s way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import layers as L
from .locprior import location_maps
from .tensor import ShapeError, center_crop, concat_channels, crop_offsets

VARIANTS = ("fcn", "s-fcn", "s-fcn-loc")
ATTACH_POINTS = ("pool4", "conv7")
NUM_CLASSES = 2
ROAD = 1


@dataclass
class ArchConfig:
    variant: str = "s-fcn-loc"
    input_size: int = 64
    width: int = 8
    loc_attach: str = "pool4"
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.loc_attach not in ATTACH_POINTS:
            raise ValueError(f"unknown attach point {self.loc_attach!r}")
        if self.input_size < 32 or self.input_size % 32:
            raise ValueError(f"input size must be a positive multiple of 32, got {self.input_size}")
        if self.width < 1:
            raise ValueError("base width must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def siamesed(self) -> bool:
        return self.variant != "fcn"

    @property
    def uses_loc(self) -> bool:
        return self.variant == "s-fcn-loc"


def _trunk_spec(width: int):
    """Ordered trunk ops: ("conv", pid, cin, cout, k, pad) | ("pool",) | ("drop",) | ("tap", name)."""
    widths = [width, 2 * width, 4 * width, 8 * width, 8 * width]
    ops = []
    cin = 3
    for b, cout in enumerate(widths, start=1):
        for i in (1, 2):
            ops.append(("conv", f"conv{b}_{i}", cin, cout, 3, 1))
            cin = cout
        ops.append(("pool",))
        if b == 4:
            ops.append(("tap", "pool4"))
    ops.append(("conv", "fc6", cin, 16 * width, 3, 1))
    ops.append(("drop",))
    ops.append(("conv", "fc7", 16 * width, 16 * width, 1, 0))
    ops.append(("drop",))
    ops.append(("tap", "conv7"))
    return ops


class NetworkGraph:
    """One assembled variant bound to a :class:`~sfcn.layers.ParameterStore`."""

    def __init__(self, cfg: ArchConfig, store: L.ParameterStore):
        self.cfg = cfg
        self.store = store
        self.trunk = _trunk_spec(cfg.width)
        self.streams = ("rgb", "aux") if cfg.siamesed else ("rgb",)
        # every stream references the same trunk ids
        self.stream_params = {s: [op[1] for op in self.trunk if op[0] == "conv"] for s in self.streams}
        self.trunk_params = list(self.stream_params["rgb"])
        self.head_params = ["score_pool4", "score_fr", "upscore2", "upscore16"]
        w = cfg.width
        k = len(self.streams)
        self.tap_channels = {"pool4": 8 * w * k, "conv7": 16 * w * k}
        if cfg.uses_loc:
            self.tap_channels[cfg.loc_attach] += 2
        self.tap_strides = {"pool4": 16, "conv7": 32}

    # ------------------------------------------------------------ construction

    def init_params(self, seed: Optional[int] = None):
        rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        for op in self.trunk:
            if op[0] != "conv":
                continue
            _, pid, cin, cout, k, _ = op
            fan_in = cin * k * k
            self.store.add(pid, rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k)), np.zeros(cout))
        self.store.add("score_pool4", np.zeros((NUM_CLASSES, self.tap_channels["pool4"], 1, 1)), np.zeros(NUM_CLASSES))
        self.store.add("score_fr", np.zeros((NUM_CLASSES, self.tap_channels["conv7"], 1, 1)), np.zeros(NUM_CLASSES))
        self.store.add("upscore2", L.bilinear_kernel(NUM_CLASSES, 2))
        self.store.add("upscore16", L.bilinear_kernel(NUM_CLASSES, 16))
        return self

    def tap_extent(self, tap: str, input_size: Optional[int] = None) -> int:
        size = self.cfg.input_size if input_size is None else input_size
        return size // self.tap_strides[tap]

    def location_prior(self, input_size: Optional[int] = None) -> Optional[np.ndarray]:
        """The prior at this graph's attach resolution, or None without one."""
        if not self.cfg.uses_loc:
            return None
        e = self.tap_extent(self.cfg.loc_attach, input_size)
        return location_maps(e, e)

    # ------------------------------------------------------------ trunk

    def _trunk_forward(self, x, stream_idx, training, seed):
        tape = []
        taps = {}
        h = x
        drop_idx = 0
        for op in self.trunk:
            kind = op[0]
            if kind == "conv":
                _, pid, _, _, _, pad = op
                pre = h
                out, cols = L.conv2d_forward(h, pid, 1, pad, self.store, return_cols=True)
                h = L.relu(out)
                tape.append((pre, cols, h))
            elif kind == "pool":
                h, arg = L.maxpool2_forward(h)
                tape.append(arg)
            elif kind == "drop":
                mask = None
                if training and self.cfg.dropout > 0:
                    mask = L.dropout_mask(h.shape, self.cfg.dropout, [seed, stream_idx, drop_idx])
                    h = h * mask
                drop_idx += 1
                tape.append(mask)
            else:
                taps[op[1]] = h
                tape.append(None)
        return taps, tape

    def _trunk_backward(self, tape, tap_grads):
        g = None
        for k, (op, rec) in enumerate(zip(reversed(self.trunk), reversed(tape))):
            kind = op[0]
            if kind == "tap":
                tg = tap_grads[op[1]]
                g = tg if g is None else g + tg
            elif kind == "drop":
                if rec is not None:
                    g = g * rec
            elif kind == "pool":
                g = L.maxpool2_backward(g, rec)
            else:
                _, pid, _, _, _, pad = op
                pre, cols, post = rec
                g = L.relu_backward(post, g)
                last = k == len(self.trunk) - 1
                g = L.conv2d_backward(pre, g, pid, 1, pad, self.store, cols=cols, input_grad=not last)
        return g

    # ------------------------------------------------------------ full graph

    def _check_inputs(self, rgb, aux, loc):
        n, c, h, w = rgb.shape
        if c != 3:
            raise ShapeError(f"rgb input must have 3 channels, got {c}")
        if h != w or h % 32:
            raise ShapeError(f"input must be square with extent a multiple of 32, got {h}x{w}")
        if self.cfg.siamesed:
            if aux is None:
                raise ValueError(f"variant {self.cfg.variant} needs an auxiliary input")
            if aux.shape != rgb.shape:
                raise ShapeError(f"aux shape {aux.shape} != rgb shape {rgb.shape}")
        elif aux is not None:
            raise ValueError("variant fcn takes no auxiliary input")
        if self.cfg.uses_loc:
            if loc is None:
                raise ValueError("variant s-fcn-loc needs a location prior")
            e = self.tap_extent(self.cfg.loc_attach, h)
            if loc.shape[1:] != (2, e, e):
                raise ShapeError(f"location prior must be (1, 2, {e}, {e}), got {loc.shape}")
        elif loc is not None:
            raise ValueError(f"variant {self.cfg.variant} takes no location prior")

    def forward(self, rgb, aux=None, loc=None, training=False, seed=0):
        """Run the graph.  Returns ``(scores, state)``; scores are (n, 2, H, W) logits."""
        self._check_inputs(rgb, aux, loc)
        n, _, size, _ = rgb.shape
        inputs = (rgb, aux) if self.cfg.siamesed else (rgb,)
        stream_taps, tapes = [], []
        for i, x in enumerate(inputs):
            taps, tape = self._trunk_forward(x, i, training, seed)
            stream_taps.append(taps)
            tapes.append(tape)
        fused = {}
        for tap in ("pool4", "conv7"):
            f = stream_taps[0][tap]
            for other in stream_taps[1:]:
                f = concat_channels(f, other[tap])
            if self.cfg.uses_loc and tap == self.cfg.loc_attach:
                f = concat_channels(f, np.broadcast_to(loc, (n,) + loc.shape[1:]))
            fused[tap] = f
        s7 = L.conv2d_forward(fused["conv7"], "score_fr", 1, 0, self.store)
        up2 = L.tconv2d(s7, "upscore2", 2, self.store)
        s4 = L.conv2d_forward(fused["pool4"], "score_pool4", 1, 0, self.store)
        fuse = up2 + center_crop(s4, up2.shape[2], up2.shape[3])
        up16 = L.tconv2d(fuse, "upscore16", 16, self.store)
        scores = center_crop(up16, size, size)
        state = {
            "taps": stream_taps,
            "tapes": tapes,
            "fused": fused,
            "s7": s7,
            "s4_shape": s4.shape,
            "fuse": fuse,
            "up16_shape": up16.shape,
            "scores_shape": scores.shape,
        }
        return scores, state

    def backward(self, state, grad_scores, streams=None):
        """Accumulate all parameter gradients for ``grad_scores``.

        ``streams`` restricts trunk backpropagation to a subset of stream
        indices; head gradients are always accumulated.  Returns the gradients
        with respect to the fused taps.
        """
        if grad_scores.shape != state["scores_shape"]:
            raise ShapeError(f"grad_scores shape {grad_scores.shape} != {state['scores_shape']}")
        store = self.store
        uh, uw = state["up16_shape"][2:]
        oy, ox = crop_offsets(uh, uw, grad_scores.shape[2], grad_scores.shape[3])
        g_up16 = np.zeros(state["up16_shape"])
        g_up16[:, :, oy:oy + grad_scores.shape[2], ox:ox + grad_scores.shape[3]] = grad_scores
        g_fuse = L.tconv2d_backward(state["fuse"], g_up16, "upscore16", 16, store)
        s4_shape = state["s4_shape"]
        oy, ox = crop_offsets(s4_shape[2], s4_shape[3], g_fuse.shape[2], g_fuse.shape[3])
        g_s4 = np.zeros(s4_shape)
        g_s4[:, :, oy:oy + g_fuse.shape[2], ox:ox + g_fuse.shape[3]] = g_fuse
        g_s7 = L.tconv2d_backward(state["s7"], g_fuse, "upscore2", 2, store)
        g_fused = {
            "pool4": L.conv2d_backward(state["fused"]["pool4"], g_s4, "score_pool4", 1, 0, store),
            "conv7": L.conv2d_backward(state["fused"]["conv7"], g_s7, "score_fr", 1, 0, store),
        }
        if streams is None:
            streams = range(len(state["tapes"]))
        for i in streams:
            tap_grads = {}
            for tap in ("pool4", "conv7"):
                c = state["taps"][i][tap].shape[1]
                tap_grads[tap] = g_fused[tap][:, i * c:(i + 1) * c]
            self._trunk_backward(state["tapes"][i], tap_grads)
        return g_fused


def build_network(cfg: ArchConfig, store: Optional[L.ParameterStore] = None) -> NetworkGraph:
    """Assemble ``cfg`` and initialise its parameters in ``store``."""
    store = L.ParameterStore() if store is None else store
    return NetworkGraph(cfg, store).init_params()


def road_probability(scores: np.ndarray) -> np.ndarray:
    """Softmax probability of the road class, shape (n, H, W)."""
    return L.softmax(scores)[:, ROAD]


def predict(scores: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Binary road mask: road probability >= tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return (road_probability(scores) >= tau).astype(np.uint8)
