"""Pipeline configuration: nested dataclasses with strict loading."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Union

import yaml

from .exceptions import ConfigurationError


@dataclass
class DataConfig:
    source: str = "synthetic"          # "synthetic" or "file"
    path: Optional[str] = None         # JSON-lines dataset when source == "file"
    demos_per_task: int = 24
    noise: float = 0.01
    test_fraction: float = 0.2


@dataclass
class Stage1Config:
    n_codes: Optional[int] = None      # default: codes_per_task * n_tasks
    codes_per_task: int = 4
    code_dim: int = 16
    hidden: list = field(default_factory=lambda: [64, 64])
    beta_commit: float = 0.25
    gamma_div: float = 0.01
    learning_rate: float = 1e-3
    n_steps: int = 2000
    batch_size: int = 128
    penalty: Union[str, float] = "bic"
    min_size: int = 10
    bandwidth: Union[str, float] = "median"


@dataclass
class Stage2Config:
    window: int = 10
    stride: int = 2
    latent_dim: int = 8
    hidden: list = field(default_factory=lambda: [64, 64])
    alpha_kl: float = 0.1
    learning_rate: float = 1e-3
    n_steps: int = 2000
    batch_size: int = 64
    smooth_window: int = 1
    prominence: float = 1.0
    min_gap: int = 10
    edge_margin: int = 7


@dataclass
class RefineConfig:
    k_seg: int = 6
    k_int: int = 3
    max_rounds: int = 10


@dataclass
class Stage3Config:
    hidden: list = field(default_factory=lambda: [64, 64])
    learning_rate: float = 1e-3
    bc_steps: int = 4000
    termination_steps: int = 3000
    batch_size: int = 256
    threshold: float = 0.5
    grace_steps: int = 5
    # state columns seen by the skill policies and the unconditioned baseline; None = all
    skill_features: Optional[list] = field(default_factory=lambda: [0, 1])
    timeout_factor: float = 2.0
    n_rollouts: int = 20
    # novel program as fixture indices; mapped to discovered skills for evaluation
    novel_fixtures: list = field(default_factory=lambda: [1, 0, 2, 3])
    boundary_tolerance: int = 4


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    refine: RefineConfig = field(default_factory=RefineConfig)
    stage3: Stage3Config = field(default_factory=Stage3Config)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Hash of everything except the seed."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> "PipelineConfig":
        d, s1, s2, r, s3 = self.data, self.stage1, self.stage2, self.refine, self.stage3
        if d.source not in ("synthetic", "file"):
            raise ConfigurationError(f"data.source must be 'synthetic' or 'file', got {d.source!r}")
        if d.source == "file" and not d.path:
            raise ConfigurationError("data.path is required when data.source is 'file'")
        if not 0 < d.test_fraction < 1:
            raise ConfigurationError("data.test_fraction must lie in (0, 1)")
        if d.demos_per_task < 2:
            raise ConfigurationError("data.demos_per_task must be >= 2")
        if d.noise < 0:
            raise ConfigurationError("data.noise must be >= 0")
        for name, v in (("stage1.beta_commit", s1.beta_commit), ("stage1.gamma_div", s1.gamma_div),
                        ("stage2.alpha_kl", s2.alpha_kl)):
            if not v >= 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if isinstance(s1.penalty, str) and s1.penalty != "bic":
            raise ConfigurationError("stage1.penalty must be 'bic' or a positive number")
        if not isinstance(s1.penalty, str) and not s1.penalty > 0:
            raise ConfigurationError("stage1.penalty must be positive")
        if s1.min_size < 1 or s1.codes_per_task < 1 or s1.code_dim < 1:
            raise ConfigurationError("stage1 sizes must be >= 1")
        if s2.window < 2 or s2.stride < 1 or s2.latent_dim < 1:
            raise ConfigurationError("stage2.window must be >= 2, stride and latent_dim >= 1")
        if s2.edge_margin < 1:
            raise ConfigurationError("stage2.edge_margin must be >= 1")
        if s2.smooth_window < 1 or s2.smooth_window % 2 == 0:
            raise ConfigurationError("stage2.smooth_window must be odd")
        if r.k_seg < 1 or r.k_int < 0 or r.max_rounds < 1:
            raise ConfigurationError("refine.k_seg and max_rounds must be >= 1, k_int >= 0")
        if not 0 <= s3.threshold <= 1:
            raise ConfigurationError("stage3.threshold must lie in [0, 1]")
        if s3.timeout_factor <= 0 or s3.n_rollouts < 1 or s3.grace_steps < 1:
            raise ConfigurationError("stage3.timeout_factor, n_rollouts and grace_steps must be positive")
        for section in (s1, s2, s3):
            if any(int(h) < 1 for h in section.hidden):
                raise ConfigurationError("hidden layer sizes must be >= 1")
            if not section.learning_rate > 0:
                raise ConfigurationError("learning rates must be > 0")
        return self


_SECTIONS = {
    "data": DataConfig, "stage1": Stage1Config, "stage2": Stage2Config,
    "refine": RefineConfig, "stage3": Stage3Config,
}


def _build(cls, raw, where: str, require_all: bool):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{where}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    if require_all:
        missing = sorted(set(fields) - set(raw))
        if missing:
            raise ConfigurationError(f"{where}: missing keys {missing}")
    kwargs = {}
    for name, value in raw.items():
        if where == "config" and name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], value, name, require_all)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(raw: dict, require_all: bool = False) -> PipelineConfig:
    """Build and validate; unknown keys are always rejected, missing keys
    only when ``require_all``."""
    return _build(PipelineConfig, raw, "config", require_all).validate()


def load_config(path, require_all: bool = True) -> PipelineConfig:
    """Read a YAML (or JSON) config file. By default every field must be present."""
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"invalid config {path}: {exc}") from None
    return config_from_dict(raw or {}, require_all=require_all)


def dump_config(config: PipelineConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)
