"""Run configuration: defaults, JSON parsing, strict validation.

Configs are plain JSON with one object per section; unknown keys are
rejected so typos cannot silently fall back to defaults. Every field
defaults to the desk-scale acceptance run, and each command echoes its
fully resolved configuration into the run directory so results are
self-describing. Environment variables are never consulted.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .unet import UNetConfig


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class TrainingConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    log_every: int = 50


@dataclass
class FinetuneConfig:
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-4
    log_every: int = 50


@dataclass
class BaselineConfig:
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-4
    log_every: int = 50


@dataclass
class DataConfig:
    dims: list[int] = field(default_factory=lambda: [32, 32, 32])
    spacing: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    pretrain_count: int = 60
    finetune_pairs: int = 10
    val_pairs: int = 4
    test_pairs: int = 10
    dose_fraction: float = 0.05
    counts_per_unit: float = 100.0
    background_level: float = 1.0
    smoothing_mm: float = 1.0
    norm_margin: float = 1.0  # vmax = margin * max clean intensity over the dataset


@dataclass
class InferenceSettings:
    patch_edge: int = 32
    stride: int = 16
    sample_stride: int = 10
    dc_strength: float = 0.5


@dataclass
class EvaluationConfig:
    ssim_window_edge: int = 7
    ssim_window_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03


@dataclass
class RunConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    network: UNetConfig = field(default_factory=UNetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    data: DataConfig = field(default_factory=DataConfig)
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _merge_section(cls, data: dict, path: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) under {path}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad values under {path}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    sections = {
        "schedule": ScheduleConfig,
        "network": UNetConfig,
        "training": TrainingConfig,
        "finetune": FinetuneConfig,
        "baseline": BaselineConfig,
        "data": DataConfig,
        "inference": InferenceSettings,
        "evaluation": EvaluationConfig,
    }
    known = set(sections) | {"seed"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {}
    if "seed" in data:
        if not isinstance(data["seed"], int):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = data["seed"]
    for name, cls in sections.items():
        if name in data:
            if not isinstance(data[name], dict):
                raise ConfigError(f"config section {name!r} must be an object")
            kwargs[name] = _merge_section(cls, data[name], name)
    cfg = RunConfig(**kwargs)
    validate_config(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def validate_config(cfg: RunConfig) -> None:
    cfg.network.validate()
    s = cfg.schedule
    if s.T < 1 or not (0 < s.beta_start <= s.beta_end < 1):
        raise ConfigError(f"bad schedule section: T={s.T}, beta=({s.beta_start},{s.beta_end})")
    d = cfg.data
    if len(d.dims) != 3 or any(int(v) < 1 for v in d.dims):
        raise ConfigError(f"data.dims must be 3 positive ints, got {d.dims}")
    if any(n < 0 for n in (d.pretrain_count, d.finetune_pairs, d.val_pairs, d.test_pairs)):
        raise ConfigError("data split counts must be nonnegative")
    if not (0 < d.dose_fraction <= 1):
        raise ConfigError(f"data.dose_fraction must be in (0, 1], got {d.dose_fraction}")
    if d.counts_per_unit <= 0 or d.norm_margin <= 0:
        raise ConfigError("data.counts_per_unit and data.norm_margin must be positive")
    for name, section in (("training", cfg.training), ("finetune", cfg.finetune), ("baseline", cfg.baseline)):
        if section.steps < 0 or section.batch_size < 1 or section.lr < 0:
            raise ConfigError(f"bad {name} section: {section}")
    i = cfg.inference
    if i.patch_edge < 1 or not (1 <= i.stride <= i.patch_edge) or i.sample_stride < 1:
        raise ConfigError(f"bad inference section: {i}")
    if i.dc_strength < 0:
        raise ConfigError("inference.dc_strength must be >= 0")
    e = cfg.evaluation
    if e.ssim_window_edge % 2 == 0 or e.ssim_window_edge < 1 or e.ssim_window_sigma <= 0:
        raise ConfigError(f"bad evaluation section: {e}")


def write_resolved_config(cfg: RunConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "resolved_config.json"
    out.write_text(cfg.to_json(), encoding="utf-8")
    return out
