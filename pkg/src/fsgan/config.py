"""Run configuration: one nested dataclass tree, read from TOML or JSON.

``None`` values are omitted when writing TOML (which has no null); only fields
whose default is ``None`` may hold it, so omission round-trips exactly.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import DatasetSpec
from .ensemble import EnsembleConfig
from .errors import ConfigError
from .finetune import FinetuneConfig, PretrainConfig
from .gancore import GanConfig
from .sampler import SamplerConfig

VARIANTS = ("gan", "repgan", "en_gan", "en_repgan")
BASELINES = ("ros", "smote")


def uses_ensemble(variant: str) -> bool:
    return variant.startswith("en_")


def uses_sampler(variant: str) -> bool:
    return variant.endswith("repgan")


def check_variant(variant: str) -> str:
    v = variant.lower().replace("-", "_")
    if v not in VARIANTS + BASELINES:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS + BASELINES}")
    return v


@dataclass
class EvalConfig:
    """Episode protocol and per-episode augmentation budget."""

    n_way: int = 2
    k_shot: int = 30
    query_per_class: int | None = None
    episodes: int = 20
    variants: list[str] = field(default_factory=lambda: ["en_repgan"])
    generated_per_class: int = 500
    include_support: bool = True
    reference_epochs: int = 30
    mmd_bandwidth: float | str = "median-heuristic"

    def __post_init__(self):
        if self.n_way < 2:
            raise ConfigError("n_way must be >= 2")
        if self.k_shot < 2:
            raise ConfigError("k_shot must be >= 2 (one row is held out for calibration)")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.generated_per_class < 1:
            raise ConfigError("generated_per_class must be >= 1")
        if self.query_per_class is not None and self.query_per_class < 1:
            raise ConfigError("query_per_class must be >= 1")
        self.variants = [check_variant(v) for v in self.variants]
        if not self.variants:
            raise ConfigError("at least one variant is required")
        if isinstance(self.mmd_bandwidth, str):
            if self.mmd_bandwidth != "median-heuristic":
                raise ConfigError("mmd_bandwidth must be positive or 'median-heuristic'")
        elif not self.mmd_bandwidth > 0:
            raise ConfigError("mmd_bandwidth must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variants"] = list(self.variants)
        return d


def _pipeline_gan() -> GanConfig:
    return GanConfig(steps=300)


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    gan: GanConfig = field(default_factory=_pipeline_gan)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs/latest"

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.to_dict() if hasattr(value, "to_dict") else value
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a table")
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(doc) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
        kwargs = {}
        for name, value in doc.items():
            kind = _SECTION_TYPES.get(name)
            kwargs[name] = _build(kind, value, name) if kind else value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


_SECTION_TYPES = {
    "dataset": DatasetSpec,
    "gan": GanConfig,
    "ensemble": EnsembleConfig,
    "sampler": SamplerConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "evaluation": EvalConfig,
}


def _build(kind, value, section: str):
    if not isinstance(value, dict):
        raise ConfigError(f"[{section}] must be a table")
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"[{section}] has unknown key(s) {sorted(unknown)}")
    try:
        return kind(**value)
    except ConfigError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] invalid value: {exc}") from exc


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_drop_none(v) for v in obj]
    return obj


def dumps_toml(config: RunConfig) -> str:
    return tomli_w.dumps(_drop_none(config.to_dict()))


def loads_toml(text: str) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return RunConfig.from_dict(doc)


def dumps_json(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)


def loads_json(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON config: {exc}") from exc
    if isinstance(doc, dict) and "config" in doc and "stages" in doc:
        doc = doc["config"]  # a run manifest
    return RunConfig.from_dict(doc)


def load_config(path) -> RunConfig:
    """Read a TOML config, a JSON config, or a run's MANIFEST.json."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    if path.suffix.lower() == ".json":
        return loads_json(text)
    return loads_toml(text)


def save_config(config: RunConfig, path) -> None:
    path = Path(path)
    text = dumps_json(config) if path.suffix.lower() == ".json" else dumps_toml(config)
    path.write_text(text)
