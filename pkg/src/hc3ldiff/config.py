"""Pipeline configuration: JSON sections with defaults for every field; unknown keys are rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .phantom import PhantomSpec
from .ufe import UfeConfig


class ConfigError(ValueError):
    pass


def _from_dict(cls, data, section):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 0.002
    beta_end: float = 0.02
    ddim_steps: int = 150
    sigma_mode: str = "posterior"
    hfe_th: int | None = None  # None: scale th=30 at width 384 to the slice width
    hfe_mode: str = "or"
    base_width: int = 32
    levels: int = 3
    blocks_per_level: int = 2
    temb_dim: int = 128

    def __post_init__(self):
        if not (isinstance(self.T, int) and self.T >= 1):
            raise ValueError("T must be a positive integer")
        if not (0 < self.beta_start <= self.beta_end < 1):
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        if not (1 <= self.ddim_steps <= self.T):
            raise ValueError("ddim_steps must lie in [1, T]")
        if self.sigma_mode not in ("posterior", "beta"):
            raise ValueError("sigma_mode must be 'posterior' or 'beta'")
        if self.hfe_mode not in ("or", "and"):
            raise ValueError("hfe_mode must be 'or' or 'and'")
        if self.temb_dim % 2:
            raise ValueError("temb_dim must be even")


@dataclass(frozen=True)
class TrainingConfig:
    seed: int = 1234
    stage1_epochs: int = 60
    stage1_batch: int = 8
    stage1_lr: float = 2e-3
    stage2_epochs: int = 200
    stage2_batch: int = 16
    stage2_lr: float = 1e-3
    weight_decay: float = 0.01
    lr_floor: float = 0.05

    def __post_init__(self):
        for name in ("stage1_epochs", "stage2_epochs", "stage1_batch", "stage2_batch"):
            if not (isinstance(getattr(self, name), int) and getattr(self, name) >= 1):
                raise ValueError(f"{name} must be a positive integer")
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class EvaluationConfig:
    ddim_steps: int | None = None  # None: use diffusion.ddim_steps
    pixel_spacing_mm: float = 2.0
    gamma_criteria: tuple = ((3.0, 3.0), (2.0, 2.0))
    thresholds: tuple = (10.0, 50.0, 80.0)
    prescription_gy: float = 60.0
    falloff_mm: float = 12.0
    ptv_margin_mm: float = 4.0
    dosimetry: bool = True

    def __post_init__(self):
        object.__setattr__(self, "gamma_criteria", tuple(tuple(c) for c in self.gamma_criteria))
        if self.pixel_spacing_mm <= 0 or self.falloff_mm <= 0 or self.prescription_gy <= 0:
            raise ValueError("spacing, fall-off and prescription must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    ufe: UfeConfig = field(default_factory=UfeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        sections = {"phantom": PhantomSpec, "ufe": UfeConfig, "diffusion": DiffusionConfig,
                    "training": TrainingConfig, "evaluation": EvaluationConfig}
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(**{name: _from_dict(kind, data.get(name), name) for name, kind in sections.items()})

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def with_overrides(self, **sections) -> "PipelineConfig":
        """Return a copy with some fields replaced, e.g. ``with_overrides(training={"seed": 3})``."""
        data = self.to_dict()
        for name, values in sections.items():
            data[name].update(values)
        return PipelineConfig.from_dict(data)
