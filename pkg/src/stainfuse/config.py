"""Run configuration: nested dataclasses with YAML round-tripping.

Defaults carry the full-scale recipe (encoder 300 epochs / batch 64, GAN
100 epochs / batch 1, 512 crops, fusion strength 0.2, L1 weights 50/50);
config files may override any subset of keys. Unknown keys are rejected so
typos fail loudly, and every checkpoint and report echoes the full config.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple

import yaml

from .encoders import EncoderTrainConfig
from .exceptions import ConfigError
from .generator import GeneratorConfig
from .losses import AdaptiveL1Config


@dataclass
class AblationFlags:
    """Independently toggleable components; all-on is the full model."""

    use_vmfe: bool = True
    use_attention: bool = True
    use_adaptive_l1: bool = True


@dataclass
class GanTrainConfig:
    epochs: int = 100
    batch_size: int = 1
    lr: float = 2e-4
    betas: Tuple[float, float] = (0.5, 0.999)
    lr_linear_decay: bool = True
    lambda_l1: float = 1.0
    crop_size: Optional[int] = 512
    hflip: bool = True
    val_fraction: float = 0.1
    checkpoint_every: int = 10
    sample_every: int = 10
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.lambda_l1 < 0:
            raise ConfigError("lambda_l1 must be >= 0")


@dataclass
class TrainConfig:
    seed: int = 0
    device: str = "cpu"
    encoder: EncoderTrainConfig = field(default_factory=EncoderTrainConfig)
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    adaptive_l1: AdaptiveL1Config = field(default_factory=AdaptiveL1Config)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _build_dataclass(cls, data, path="")


_TUPLE_FIELDS = {"betas", "widths", "patch_grid", "fusion_points", "blob_count_range"}

# postponed annotations make fields() report strings, so nested sections are
# resolved by name
_SECTION_TYPES = {
    "encoder": EncoderTrainConfig,
    "gan": GanTrainConfig,
    "adaptive_l1": AdaptiveL1Config,
    "generator": GeneratorConfig,
    "ablation": AblationFlags,
}


def _build_dataclass(dc_type, data: dict, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at {path or 'top level'}, got {type(data).__name__}")
    known = {f.name for f in fields(dc_type)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        if name in _SECTION_TYPES:
            kwargs[name] = _build_dataclass(_SECTION_TYPES[name], value, sub)
        elif name in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config near {path or 'top level'}: {exc}") from exc


def load_config(path) -> TrainConfig:
    """Read a YAML config file; missing keys fall back to defaults."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return TrainConfig.from_dict(data)


def save_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
