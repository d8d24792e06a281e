"""Run configuration: one nested, strictly validated structure.

Defaults follow the reference training protocol wherever it pins a value
(M=8, L=4, aggregation 9, 6/6 layers, loss weights 2/5/2, lr 2e-4 decayed
x0.1 after epoch 20, weight decay 1e-4, 25 epochs, 346x260 sensor at 25
FPS). ``RunConfig.desk()`` applies the desk-scale overrides used by the
CLI and the acceptance suite: 128x96 sensor, d=64, 2 encoder + 2 decoder
layers, 25 object queries, and a bounded step budget.

Config files are UTF-8 JSON mirroring the dataclass tree; unknown keys
are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .simulator import CameraModel


@dataclass(frozen=True)
class SensorConfig:
    width: int = 346
    height: int = 260
    theta_th: float = 0.15
    frame_period_us: int = 40_000
    dt_sim_us: int = 1_000
    exposure_us: int = 32_000
    exposure_samples: int = 8
    frame_noise_sigma: float = 0.02
    event_noise_rate: float = 0.0

    def camera(self) -> CameraModel:
        return CameraModel(
            width=self.width,
            height=self.height,
            theta_th=self.theta_th,
            frame_period_us=self.frame_period_us,
            dt_sim_us=self.dt_sim_us,
            exposure_us=self.exposure_us,
            exposure_samples=self.exposure_samples,
            frame_noise_sigma=self.frame_noise_sigma,
            event_noise_rate=self.event_noise_rate,
        )


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    decay_epoch: int = 20
    decay_factor: float = 0.1


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 25
    steps: int = 3000  # desk-override budget; epochs partition this range
    seed: int = 0
    window_length: int = 0  # 0 -> temporal aggregation size
    loss_all_timestamps: bool = False
    random_resize: bool = False
    checkpoint_every: int = 1000
    log_every: int = 25


@dataclass(frozen=True)
class EvalConfig:
    iou_start: float = 0.5
    iou_stop: float = 0.95
    iou_step: float = 0.05
    cadence_hz: float = 25.0
    confidence_threshold: float = 0.5
    small_max_px: float = 20.0
    large_min_px: float = 80.0

    def thresholds(self) -> list[float]:
        out = []
        t = self.iou_start
        while t <= self.iou_stop + 1e-9:
            out.append(round(t, 2))
            t += self.iou_step
        return out


@dataclass(frozen=True)
class RunConfig:
    sensor: SensorConfig = field(default_factory=SensorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def desk(cls) -> "RunConfig":
        """Desk-scale profile: reference values scaled to CPU budgets."""
        return cls(
            sensor=SensorConfig(width=128, height=96),
            model=ModelConfig(d=64, enc_layers=2, dec_layers=2, n_queries=25),
        )

    @property
    def window_length(self) -> int:
        return self.training.window_length or self.model.agg_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "")

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def with_overrides(self, pairs: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` overrides (CLI flags beat file keys)."""
        data = self.to_dict()
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, value = pair.split("=", 1)
            node = data
            parts = key.split(".")
            for part in parts[:-1]:
                if part not in node:
                    raise ConfigError(f"unknown config section {part!r} in {key!r}")
                node = node[part]
            leaf = parts[-1]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = _coerce_like(node[leaf], value, key)
        return RunConfig.from_dict(data)


def _coerce_like(current, raw: str, key: str):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (list, tuple)):
        return type(current)(json.loads(raw))
    return raw


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys in {path or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    for name in known:
        if name not in data:
            continue
        value = data[name]
        if cls is RunConfig and name in _SECTION_TYPES:
            kwargs[name] = _build(_SECTION_TYPES[name], value, f"{path}.{name}" if path else name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config for {path or '<root>'}: {exc}") from None


_SECTION_TYPES = {
    "sensor": SensorConfig,
    "model": ModelConfig,
    "optimizer": OptimizerConfig,
    "training": TrainingConfig,
    "eval": EvalConfig,
}
