"""Declarative run configuration: one YAML tree, dotted CLI overrides.

Short conventional keys (``K``, ``tau``, ``kappa``, ``mu``) are accepted
as input aliases for the descriptive field names; serialisation always
emits the canonical field names with sorted keys, so
serialise -> parse -> serialise is byte-identical.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .bootstrap import BootstrapConfig
from .errors import ConfigError
from .final_train import FinalConfig
from .fixmatch import SSLConfig
from .models import ModelConfig
from .noise import NoiseSpec
from .pretrain import ContrastiveConfig

_ALIASES = {
    "bootstrap": {"K": "selection_fraction", "tau": "confidence_guarantee"},
    "ssl": {"kappa": "threshold", "mu": "unlabeled_ratio"},
}


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic|directory|blob
    root: str | None = None
    classes: int = 4
    train_size: int = 3000
    test_size: int = 600
    image_size: int = 32
    noise_sigma: float = 0.02
    seed: int = 7

    def validate(self) -> list[str]:
        problems = []
        if self.source not in ("synthetic", "directory", "blob"):
            problems.append("data.source must be synthetic|directory|blob")
        if self.source in ("directory", "blob") and not self.root:
            problems.append(f"data.root is required for source={self.source}")
        if self.source == "synthetic" and not 2 <= self.classes <= 6:
            problems.append("data.classes must lie in 2..6 for synthetic data")
        return problems


@dataclass
class EvalConfig:
    tta: bool = True
    n_augs: int = 25
    with_noisy_labels: bool = False

    def validate(self) -> list[str]:
        return [] if self.n_augs >= 1 else ["eval.n_augs must be >= 1"]


@dataclass
class RunConfig:
    run_id: str = "run"
    seed: int = 0
    balancing: str | None = None  # noise|class; None derives from model.variant
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(kind="symmetric", rate=0.0))
    model: ModelConfig = field(default_factory=lambda: ModelConfig(num_classes=DataConfig.classes))
    pretrain: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    final: FinalConfig = field(default_factory=FinalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def effective_balancing(self) -> str:
        if self.balancing is not None:
            return self.balancing
        return "noise" if self.model.variant == "modified" else "class"


_SECTIONS = {
    "data": DataConfig,
    "noise": NoiseSpec,
    "model": ModelConfig,
    "pretrain": ContrastiveConfig,
    "bootstrap": BootstrapConfig,
    "ssl": SSLConfig,
    "final": FinalConfig,
    "eval": EvalConfig,
}


def _coerce_value(value, f: dataclasses.Field):
    # YAML gives dict keys / tuples loosely typed; normalise the common cases.
    if value is None:
        return None
    if f.type in ("tuple[int, ...]",) or isinstance(f.default, tuple):
        return tuple(value)
    if f.name == "mapping" and isinstance(value, dict):
        return {int(k): int(v) for k, v in value.items()}
    return value


def _section_from_dict(cls, payload: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    aliases = _ALIASES.get(section, {})
    kwargs = {}
    for key, value in payload.items():
        name = aliases.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown key '{section}.{key}'")
        kwargs[name] = _coerce_value(value, fields[name])
    return cls(**kwargs)


def config_from_dict(payload: dict) -> RunConfig:
    payload = dict(payload or {})
    kwargs = {}
    for section, cls in _SECTIONS.items():
        if section in payload:
            sub = payload.pop(section)
            if not isinstance(sub, dict):
                raise ConfigError(f"section '{section}' must be a mapping")
            kwargs[section] = _section_from_dict(cls, sub, section)
    for scalar in ("run_id", "seed", "balancing"):
        if scalar in payload:
            kwargs[scalar] = payload.pop(scalar)
    if payload:
        raise ConfigError(f"unknown top-level keys: {sorted(payload)}")
    return RunConfig(**kwargs)


def config_to_dict(config: RunConfig) -> dict:
    out = {"run_id": config.run_id, "seed": config.seed, "balancing": config.balancing}
    for section in _SECTIONS:
        sub = dataclasses.asdict(getattr(config, section))
        for key, value in sub.items():
            if isinstance(value, tuple):
                sub[key] = list(value)
        out[section] = sub
    return out


def canonical_yaml(config: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=True, default_flow_style=False)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        payload = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return config_from_dict(payload or {})


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
    payload = config_to_dict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        parts = dotted.split(".")
        node = payload
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section in override: {dotted}")
            node = node[part]
        leaf = parts[-1]
        if len(parts) > 1:
            leaf = _ALIASES.get(parts[0], {}).get(leaf, leaf)
        node[leaf] = value
    return config_from_dict(payload)


def validate_config(config: RunConfig) -> list[str]:
    """All violations at once; empty list means the config is runnable."""
    problems = []
    problems += config.data.validate()
    problems += config.noise.validate(
        config.data.classes if config.data.source == "synthetic" else None
    )
    problems += config.model.validate()
    problems += config.pretrain.validate()
    problems += config.bootstrap.validate()
    problems += config.ssl.validate()
    problems += config.final.validate()
    problems += config.eval.validate()
    if config.balancing not in (None, "noise", "class"):
        problems.append("balancing must be 'noise' or 'class'")
    if config.data.source == "synthetic" and config.model.num_classes != config.data.classes:
        problems.append("model.num_classes must match data.classes for synthetic data")
    return problems
