"""
Run configuration: dataclasses for domains, round plans and optimizer
settings, loaded from and saved to JSON.

Unknown keys are rejected so that a typo in a config file never silently
falls back to a default.
"""
import json
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, List, Optional

from bridging import PathConfig
from ckd import AugmentConfig, DistillConfig
from model import ArchSpec
from utils import ConfigurationError, env_flag, load_json, save_json

DEFAULT_SHAPE_FREQUENCIES = {"bus": 0.5, "train": 0.5, "pole": 0.6}


@dataclass
class OptimizerConfig:
    lr_head: float = 1e-2
    lr_backbone: float = 1e-3
    weight_decay: float = 0.01
    warmup_fraction: float = 0.05

    def __post_init__(self):
        if self.lr_head <= 0 or self.lr_backbone <= 0:
            raise ConfigurationError("Learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigurationError("warmup_fraction must lie in [0, 1)")


@dataclass
class DomainSpec:
    """
    One domain of the benchmark.

    Attributes:
        name: Domain id used in the manifest and in reports
        role: 'source' or 'target'
        sample_count: Training images
        eval_count: Labelled held-out images
        oracle_count: Extra labelled training images (targets only, for the
            supervised oracle baseline)
        palette_id: Colour palette of the renderer
        context_rule_id: Vertical order of the two ground bands
        shape_frequencies: Fraction of images containing each object class
        ingest_dir: Read existing images from here instead of rendering
    """
    name: str
    role: str
    sample_count: int = 200
    eval_count: int = 50
    oracle_count: int = 0
    palette_id: int = 0
    context_rule_id: int = 0
    shape_frequencies: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SHAPE_FREQUENCIES))
    ingest_dir: Optional[str] = None

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ConfigurationError(f"Domain '{self.name}': role must be 'source' or 'target', got '{self.role}'")
        if self.sample_count < 1 or self.eval_count < 0 or self.oracle_count < 0:
            raise ConfigurationError(f"Domain '{self.name}': sample counts must be non-negative (train >= 1)")
        if self.role == "source" and self.oracle_count:
            raise ConfigurationError(f"Domain '{self.name}': oracle images are for target domains only")
        for cls, freq in self.shape_frequencies.items():
            if not 0.0 <= float(freq) <= 1.0:
                raise ConfigurationError(f"Domain '{self.name}': frequency of '{cls}' must lie in [0, 1]")


@dataclass
class RoundPlan:
    """Number of alternation rounds, seed and per-stage settings."""
    rounds: int = 2
    seed: int = 0
    region: PathConfig = field(default_factory=lambda: PathConfig(kind="region"))
    class_path: PathConfig = field(default_factory=lambda: PathConfig(kind="class"))
    distill: DistillConfig = field(default_factory=DistillConfig)
    ckd_uses_ema: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {self.rounds}")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}")


def default_domains() -> List[DomainSpec]:
    return [
        DomainSpec(name="synth", role="source", palette_id=0, context_rule_id=0),
        DomainSpec(name="real", role="target", palette_id=1, context_rule_id=1),
    ]


@dataclass
class ExperimentConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    domains: List[DomainSpec] = field(default_factory=default_domains)
    plan: RoundPlan = field(default_factory=RoundPlan)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval_batch_size: int = 16
    progress: Optional[bool] = None

    def __post_init__(self):
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"Domain names must be unique: {names}")
        if not any(d.role == "source" for d in self.domains):
            raise ConfigurationError("At least one source domain is required")
        if not any(d.role == "target" for d in self.domains):
            raise ConfigurationError("At least one target domain is required")
        if self.eval_batch_size < 1:
            raise ConfigurationError("eval_batch_size must be >= 1")

    @property
    def show_progress(self) -> bool:
        return env_flag("DDB_PROGRESS", True) if self.progress is None else self.progress

    def source_domains(self) -> List[DomainSpec]:
        return [d for d in self.domains if d.role == "source"]

    def target_domains(self) -> List[DomainSpec]:
        return [d for d in self.domains if d.role == "target"]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["arch"] = self.arch.to_dict()
        data["plan"]["distill"] = self.plan.distill.to_dict()
        return data


def _check_keys(cls, data: Dict[str, Any], where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigurationError(f"{where}: unknown key '{key}'")


def _build(cls, data: Optional[Dict[str, Any]], where: str, **nested):
    """Instantiate a config dataclass from a dict, converting nested sections first."""
    if data is None:
        data = {}
    _check_keys(cls, data, where)
    data = dict(data)
    for key, convert in nested.items():
        if key in data:
            data[key] = convert(data[key], f"{where}.{key}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigurationError(f"{where}: {e}") from e


def _path_config(data, where):
    return _build(PathConfig, data, where)


def _distill_config(data, where):
    return _build(DistillConfig, data, where, augment=lambda d, w: _build(AugmentConfig, d, w))


def _round_plan(data, where):
    return _build(
        RoundPlan, data, where,
        region=_path_config, class_path=_path_config, distill=_distill_config,
    )


def _arch(data, where):
    _check_keys(ArchSpec, data, where)
    return ArchSpec.from_dict(data)


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Build an ExperimentConfig from parsed JSON.

    Args:
        data: Dictionary with any subset of the config sections

    Returns:
        Validated ExperimentConfig
    """
    return _build(
        ExperimentConfig, data, "config",
        arch=_arch,
        domains=lambda items, where: [_build(DomainSpec, d, f"{where}[{i}]") for i, d in enumerate(items)],
        plan=_round_plan,
        optimizer=lambda d, w: _build(OptimizerConfig, d, w),
    )


def load_config(file_path: str) -> ExperimentConfig:
    try:
        data = load_json(file_path)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{file_path} is not valid JSON: {e}") from e
    return config_from_dict(data)


def save_config(config: ExperimentConfig, file_path: str) -> None:
    save_json(config.to_dict(), file_path)
