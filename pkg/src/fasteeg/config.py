"""Run configuration: defaults < JSON file < command-line overrides."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .model import FastConfig
from .preprocess import SegmentPlan
from .protocols import DESK_FINETUNE_EPOCHS, DESK_OVERRIDES, DESK_PLAN, DESK_PRETRAIN_EPOCHS
from .training import TrainSettings

SEED_ENV = "FAST_SEED"
PRESETS = ("default", "desk")


class RunConfigError(ValueError):
    pass


def _env_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError as e:
        raise RunConfigError(f"{SEED_ENV}={raw!r} is not an integer") from e


@dataclass
class RunConfig:
    # data and outputs
    data: str | None = None
    out: str | None = None
    subjects: list[int] | None = None
    # model
    preset: str = "default"
    partition: str = "M8"
    model: dict = field(default_factory=dict)     # FastConfig overrides
    window_s: float | None = None
    stride_s: float | None = None
    mode: str = "fast"
    utterances: int = 5
    # optimization
    seed: int | None = None
    seeds: list[int] | None = None
    epochs: int | None = None
    pretrain_epochs: int | None = None
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_epochs: int = 10
    floor_fraction: float = 0.1
    clip_norm: float | None = 5.0
    jobs: int = 1
    final_model: bool = True
    save_models: bool = False
    # preprocessing
    bandpass_hz: list[float] = field(default_factory=lambda: [1.0, 40.0])
    notch_hz: float | None = 50.0
    notch_half_width_hz: float = 1.0
    transition_hz: float = 1.0
    target_rate: float = 200.0
    baseline_s: float | None = 1.0
    tmin_s: float = 0.0
    tmax_s: float = 10.0
    reject_uv: float | None = 150.0
    # attribution
    ig_steps: int = 64
    scan_window_s: float = 1.0
    scan_step_s: float = 0.02
    max_trials: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    # derived objects --------------------------------------------------------
    def plan(self) -> SegmentPlan:
        return SegmentPlan(self.window_s, self.stride_s)

    def model_overrides(self) -> dict:
        return {**(DESK_OVERRIDES if self.preset == "desk" else {}), **self.model}

    def train_settings(self, epochs: int | None = None, seed: int | None = None) -> TrainSettings:
        return TrainSettings(epochs=self.epochs if epochs is None else epochs, batch_size=self.batch_size,
                             lr=self.lr, weight_decay=self.weight_decay, warmup_epochs=self.warmup_epochs,
                             floor_fraction=self.floor_fraction, clip_norm=self.clip_norm,
                             seed=self.seed if seed is None else seed, mode=self.mode)


def _materialize(cfg: RunConfig) -> RunConfig:
    """Fill every preset-dependent default so the written config is complete."""
    if cfg.preset not in PRESETS:
        raise RunConfigError(f"unknown preset {cfg.preset!r}; expected one of {PRESETS}")
    desk = cfg.preset == "desk"
    if cfg.window_s is None:
        cfg.window_s = DESK_PLAN.window_s if desk else SegmentPlan().window_s
    if cfg.stride_s is None:
        cfg.stride_s = DESK_PLAN.stride_s if desk else SegmentPlan().stride_s
    if cfg.epochs is None:
        cfg.epochs = DESK_FINETUNE_EPOCHS if desk else 200
    if cfg.pretrain_epochs is None:
        cfg.pretrain_epochs = DESK_PRETRAIN_EPOCHS if desk else 200
    if cfg.seed is None:
        cfg.seed = _env_seed()
    if cfg.seeds is None:
        cfg.seeds = [cfg.seed]
    allowed = {f.name for f in fields(FastConfig)} - {"region_sizes"}
    bad = set(cfg.model) - allowed
    if bad:
        raise RunConfigError(f"unknown model keys: {sorted(bad)}")
    if cfg.mode not in ("fast", "no-te"):
        raise RunConfigError(f"unknown mode {cfg.mode!r}")
    if not 1 <= cfg.utterances <= 5:
        raise RunConfigError("utterances must be in 1..5")
    if cfg.jobs < 1:
        raise RunConfigError("jobs must be >= 1")
    return cfg


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` where value is parsed as JSON when possible."""
    if "=" not in text:
        raise RunConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    merged: dict[str, Any] = {}
    for source, layer in (("config file", _read(path)), ("override", dict(overrides or {}))):
        unknown = set(layer) - known
        if unknown:
            raise RunConfigError(f"unknown {source} key(s): {', '.join(sorted(unknown))}")
        for k, v in layer.items():
            if k == "model" and isinstance(v, dict):
                merged["model"] = {**merged.get("model", {}), **v}
            else:
                merged[k] = v
    return _materialize(RunConfig(**merged))


def _read(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text().strip()
    if not text:
        return {}
    data = json.loads(text)
    if not isinstance(data, dict):
        raise RunConfigError("run config must be a JSON object")
    return data


def write_resolved(cfg: RunConfig, directory: str | Path) -> Path:
    p = Path(directory) / "config.json"
    p.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return p
