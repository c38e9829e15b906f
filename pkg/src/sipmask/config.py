"""Run configuration. Loaded from JSON; unknown keys are rejected."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


# (lo, hi] in image pixels on max(l, t, r, b); None means unbounded
DEFAULT_SCALE_WINDOWS = ((0.0, 32.0), (32.0, 64.0), (64.0, 128.0), (128.0, 256.0), (256.0, None))


@dataclass
class ModelConfig:
    num_classes: int = 3
    image_size: int = 64
    base_stride: int = 4
    channels: int = 32
    k: int = 2
    m: int = 32
    tower_convs: int = 2
    feature_align: bool = True
    multi_level_basis: bool = True
    with_tracking: bool = False
    track_dim: int = 32
    prior_prob: float = 0.01

    def validate(self) -> None:
        if self.k < 1 or self.m < 1:
            raise ConfigError("k and m must be >= 1")
        if self.image_size % (self.base_stride * 16):
            raise ConfigError(f"image_size {self.image_size} must be divisible by {self.base_stride * 16}")


@dataclass
class LossConfig:
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    mask_weighting: bool = True
    # divide the weighted mask loss by the summed weights instead of the positive count,
    # so weighting only redistributes the loss across instances
    normalize_by_weight: bool = True
    max_pos_per_image: int = 64
    scale_windows: tuple = DEFAULT_SCALE_WINDOWS


@dataclass
class InferConfig:
    score_threshold: float = 0.05
    pre_nms_top_n: int = 1000
    nms_iou: float = 0.5
    top_n: int = 100
    mask_threshold: float = 0.5


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    steps: int = 1500
    warmup_steps: int = 100
    lr_drops: tuple = (0.75, 0.9)
    grad_clip: float = 10.0
    checkpoint_every: int = 500
    n_train_scenes: int = 2000
    overlap_bias: float = 0.8
    data_seed: int = 0


@dataclass
class TrackConfig:
    lambda_iou: float = 1.0
    lambda_class: float = 1.0
    lambda_score: float = 1.0
    new_track_threshold: float = 0.0
    max_age: int = 8
    feature_momentum: float = 0.9


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return _to_jsonable(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> Config:
        cfg = _build(cls, raw, "config")
        cfg.model.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> Config:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def replace(self, **sections: dict[str, Any]) -> Config:
        """Copy with per-section overrides, e.g. ``cfg.replace(model={"k": 1})``."""
        raw = self.to_dict()
        for name, values in sections.items():
            if name == "seed":
                raw["seed"] = values
                continue
            if name not in raw:
                raise ConfigError(f"unknown section {name!r}")
            raw[name].update(values)
        return Config.from_dict(raw)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return None
    return obj


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = _coerce(default, value, f"{where}.{name}")
    return cls(**kwargs)


def _coerce(default, value, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value
