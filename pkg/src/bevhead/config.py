"""Flat ``key = value`` run configuration.

Every knob of a run lives in one flat namespace so that ablation cells are
small override sets and a config file diffs cleanly.  Lines starting with
``#`` are comments.  The canonical text (sorted keys, one per line) is hashed
and the digest is stamped on every artifact a run produces.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from bevhead.decode import DecodeConfig
from bevhead.scene import N_BASE_CHANNELS, BevGrid, SceneConfig
from bevhead.train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    data_seed: int = 0
    n_train: int = 200
    n_eval: int = 50
    min_boxes: int = 3
    max_boxes: int = 8
    base_rate: float = 40000.0
    n_ground: int = 600
    # grid and features
    origin_x: float = 0.0
    origin_y: float = 0.0
    cell: float = 0.5
    grid_h: int = 128
    grid_w: int = 128
    channels: int = 16
    range_scale: float = 50.0
    # assignment and model
    strategy: str = "dar_switch"
    dar_groups: str = "xy"
    n: int = 4
    k: int = 4
    iou_th: float = 0.6
    ema_decay: float = 0.9
    switch_trigger: str = "measured"
    multipos_radius: int = 1
    iqp: str = "v2"
    iou_branch: bool = True
    iou_positives: str = "center"
    obj_thresh: float = 0.2
    # optimization
    epochs: int = 8
    batch_size: int = 4
    lr: float = 5e-3
    momentum: float = 0.9
    clip: float = 5.0
    w_hm: float = 1.0
    w_reg: float = 2.0
    w_obj: float = 1.0
    w_iou: float = 1.0
    weight_ema: float = 0.99
    # decoding and evaluation
    alpha: float = 0.5
    nms_thresh: float = 0.2
    max_dets: int = 100
    min_conf: float = 0.05
    match_iou: float = 0.3
    # run
    seed: int = 0

    def __post_init__(self):
        self.validate()

    # -- derived component configs; building them validates the values
    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            x_range=(self.origin_x, self.origin_x + self.grid_h * self.cell),
            y_range=(self.origin_y, self.origin_y + self.grid_w * self.cell),
            min_boxes=self.min_boxes,
            max_boxes=self.max_boxes,
            base_rate=self.base_rate,
            n_ground=self.n_ground,
        )

    def grid(self) -> BevGrid:
        return BevGrid(self.origin_x, self.origin_y, self.cell, self.grid_h, self.grid_w)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            strategy=self.strategy,
            dar_groups=self.dar_groups,
            n=self.n,
            k=self.k,
            iou_th=self.iou_th,
            ema_decay=self.ema_decay,
            switch_trigger=self.switch_trigger,
            multipos_radius=self.multipos_radius,
            iqp=self.iqp,
            iou_branch=self.iou_branch,
            iou_positives=self.iou_positives,
            obj_thresh=self.obj_thresh,
            channels=self.channels,
            num_classes=self.scene_config().num_classes,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            clip=self.clip,
            w_hm=self.w_hm,
            w_reg=self.w_reg,
            w_obj=self.w_obj,
            w_iou=self.w_iou,
            range_scale=self.range_scale,
            weight_ema=self.weight_ema,
        )

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(self.max_dets, self.min_conf, self.nms_thresh, self.alpha)

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigError(f"{f.name} must be finite")
        if self.n_train < 0 or self.n_eval < 0:
            raise ConfigError("n_train and n_eval must be non-negative")
        if self.channels < N_BASE_CHANNELS:
            raise ConfigError(f"channels must be at least {N_BASE_CHANNELS} (the base feature planes)")
        if not 0.0 <= self.match_iou <= 1.0:
            raise ConfigError("match_iou must lie in [0, 1]")
        try:
            self.scene_config()
            self.grid()
            self.train_config()
            self.decode_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- text form
    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in sorted(fields(self), key=lambda f: f.name))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, overrides) -> "RunConfig":
        return apply_overrides(self, overrides)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = type(getattr(RunConfig, key))
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc
    return raw


def parse_pairs(pairs) -> dict:
    """``["lr=0.01", ...]`` or a dict -> typed overrides."""
    if isinstance(pairs, dict):
        items = [(k, v if isinstance(v, str) else _format(v)) for k, v in pairs.items()]
    else:
        items = []
        for p in pairs:
            if "=" not in p:
                raise ConfigError(f"expected key=value, got {p!r}")
            k, v = p.split("=", 1)
            items.append((k.strip(), v))
    return {k: _coerce(k, v) for k, v in items}


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    try:
        return replace(config, **parse_pairs(overrides))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_text(text: str, where: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{n}: expected key = value")
        k, v = line.split("=", 1)
        try:
            out[k.strip()] = _coerce(k.strip(), v)
        except ConfigError as exc:
            raise ConfigError(f"{where}:{n}: {exc}") from exc
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    base = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = parse_text(text, str(path))
    try:
        cfg = RunConfig(**base)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return apply_overrides(cfg, overrides)
