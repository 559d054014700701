"""Flat ``key = value`` run configuration shared by every subcommand.

Every key has a default.  A config file may set any subset; command-line
flags override the file.  Unknown keys and malformed values are rejected.
Ranges are written ``lo,hi`` and the BEV correspondences as 16
comma-separated floats (4 source points then 4 destination points).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

from . import layers as L
from .network import ArchConfig
from .synth import SceneParams
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # architecture
    variant: str = "s-fcn-loc"
    width: int = 8
    loc_attach: str = "pool4"
    dropout: float = 0.5
    # training
    iterations: int = 2000
    batch_size: int = 4
    lr_weight: float = 1e-2
    lr_bias: Optional[float] = None  # 2 * lr_weight when unset
    momentum: float = 0.99
    decay: float = 0.0005
    loss: str = "mean"
    eval_interval: int = 0
    seed: int = 7
    # synthetic scenes
    size: int = 64
    vp_jitter: tuple = (-0.15, 0.15)
    horizon: tuple = (0.3, 0.45)
    base_width: tuple = (0.4, 0.9)
    occluders: tuple = (0, 3)
    shadows: tuple = (0, 2)
    noise: float = 0.05
    lane_markings: bool = True
    # evaluation
    tau: float = 0.5
    gamma: float = 1.0
    sweep_size: int = 256
    bev_points: Optional[tuple] = None
    bev_height: int = 800
    bev_width: int = 400
    # convergence comparison
    smoothing_window: int = 50
    # paths
    data: Optional[str] = None
    val: Optional[str] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None

    def arch(self) -> ArchConfig:
        return ArchConfig(variant=self.variant, input_size=self.size, width=self.width,
                          loc_attach=self.loc_attach, dropout=self.dropout, seed=self.seed)

    def train_config(self) -> TrainConfig:
        opt = L.OptimizerConfig(lr_weight=self.lr_weight, lr_bias=self.lr_bias,
                                momentum=self.momentum, decay=self.decay)
        return TrainConfig(iterations=self.iterations, batch_size=self.batch_size, optimizer=opt,
                           loss=L.LossConfig(reduction=self.loss), eval_interval=self.eval_interval,
                           seed=self.seed)

    def scene(self) -> SceneParams:
        return SceneParams(size=self.size, vp_jitter=self.vp_jitter, horizon=self.horizon,
                           base_width=self.base_width, occluders=self.occluders, shadows=self.shadows,
                           noise=self.noise, seed=self.seed, lane_markings=self.lane_markings)


_INT_RANGES = {"occluders", "shadows"}
_FLOAT_RANGES = {"vp_jitter", "horizon", "base_width"}
_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _field_kinds():
    kinds = {}
    for f in dataclasses.fields(RunConfig):
        if f.name in _INT_RANGES:
            kinds[f.name] = "int_range"
        elif f.name in _FLOAT_RANGES:
            kinds[f.name] = "float_range"
        elif f.name == "bev_points":
            kinds[f.name] = "points"
        elif f.name == "lr_bias":
            kinds[f.name] = "opt_float"
        elif isinstance(f.default, bool):
            kinds[f.name] = "bool"
        elif isinstance(f.default, int):
            kinds[f.name] = "int"
        elif isinstance(f.default, float):
            kinds[f.name] = "float"
        else:
            kinds[f.name] = "str"
    return kinds


KINDS = _field_kinds()


def parse_value(key: str, text: str):
    """Convert the text form of ``key`` to its typed value."""
    if key not in KINDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = KINDS[key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "opt_float":
            return None if text.lower() in ("", "none") else float(text)
        if kind == "bool":
            return _BOOL[text.lower()]
        if kind in ("int_range", "float_range"):
            conv = int if kind == "int_range" else float
            parts = [conv(v) for v in text.split(",")]
            if len(parts) != 2:
                raise ValueError("expected lo,hi")
            return tuple(parts)
        if kind == "points":
            if text.lower() in ("", "none"):
                return None
            pts = tuple(float(v) for v in text.replace(",", " ").split())
            if len(pts) != 16:
                raise ValueError(f"expected 16 floats, got {len(pts)}")
            return pts
        return text or None if key in ("data", "val", "out", "checkpoint") else text
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None


def read_config_file(path) -> dict:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key = key.strip()
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            try:
                values[key] = parse_value(key, val)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (``None`` values skipped)."""
    values = read_config_file(path) if path else {}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in KINDS:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = v
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Build every derived config once so range errors surface before any work starts."""
    try:
        cfg.arch()
        cfg.train_config()
        cfg.scene()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not 0.0 < cfg.tau < 1.0:
        raise ConfigError("tau must lie in (0, 1)")
    if cfg.gamma <= 0:
        raise ConfigError("gamma must be positive")
    if cfg.sweep_size < 2:
        raise ConfigError("sweep_size must be >= 2")
    if cfg.smoothing_window < 1:
        raise ConfigError("smoothing_window must be >= 1")
    if cfg.bev_height < 1 or cfg.bev_width < 1:
        raise ConfigError("BEV extents must be positive")


def dump(cfg: RunConfig) -> str:
    """Render ``cfg`` in the file syntax; ``read_config_file`` inverts it."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            text = "none" if KINDS[f.name] in ("opt_float", "points") else ""
        elif isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, tuple):
            text = ",".join(repr(x) for x in v)
        else:
            text = repr(v) if isinstance(v, float) else str(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
