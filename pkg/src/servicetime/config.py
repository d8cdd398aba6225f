"""Run configuration: nested dataclasses loaded from TOML, JSON or YAML."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, get_type_hints

from .ingest import IngestSchema

VARIANTS = ("full", "-t", "-ct", "-v")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str = "unknown key"):
        super().__init__(f"{message}: {key}")
        self.key = key


@dataclass
class Paths:
    data: str | None = None
    regions: str | None = None
    region_id_property: str = "id"
    cache: str | None = None
    checkpoint: str | None = None
    output: str = "runs/latest"


@dataclass
class IngestConfig:
    schema: IngestSchema = field(default_factory=IngestSchema)
    type_vocabulary: list[str] | None = None
    train_fraction: float = 0.8
    max_service_days: float = 80.0


@dataclass
class ModelConfig:
    window: int = 14
    d_model: int = 32
    temporal_heads: int = 4
    temporal_layers: int = 1
    ff_mult: int = 4
    pooling: str = "mean"
    positional: bool = True
    temporal: str = "transformer"
    share_temporal: bool = False
    conv_kernel: int = 3
    conv_activation: str = "relu"
    region_order: list[int] | None = None
    inter_hidden: int = 64
    inter_heads: int = 4
    inter_layer_norm: bool = True
    mlp_hidden: int = 64
    mlp_layers: int = 1
    output_activation: str = "softplus"
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError("model.variant", f"variant must be one of {VARIANTS}")
        if self.d_model % self.temporal_heads:
            raise ConfigError("model.temporal_heads", "d_model must be divisible by")
        if self.inter_hidden % self.inter_heads:
            raise ConfigError("model.inter_heads", "inter_hidden must be divisible by")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("model.conv_kernel", "kernel width must be odd")


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 256
    epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("train.lr", "learning rate must be positive")


@dataclass
class GprConfig:
    lengthscale: float = 1.0
    grid_search: bool = False
    cap: int = 2000
    crossfit_folds: int = 5
    use_region: bool = True
    use_weekday: bool = True
    use_season: bool = True
    use_demand: bool = True
    use_workload: bool = True


@dataclass
class WorkloadConfig:
    use_llm: bool = False
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "meta-llama/Meta-Llama-3-8B-Instruct"
    prompt_template_path: str | None = None
    timeout: float = 30.0
    max_retries: int = 2
    parallelism: int = 4


@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8311


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gpr: GprConfig = field(default_factory=GprConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    serve: ServeConfig = field(default_factory=ServeConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data or {}, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(read_config_file(path))


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config file ({exc.strerror})") from exc
    try:
        if path.suffix in (".toml", ".tml"):
            try:
                import tomllib
            except ModuleNotFoundError:  # Python 3.10
                import tomli as tomllib
            return tomllib.loads(text)
        if path.suffix in (".yaml", ".yml"):
            import yaml

            return yaml.safe_load(text) or {}
        return json.loads(text)
    except ValueError as exc:  # TOML and JSON decode errors subclass ValueError
        raise ConfigError(str(path), f"unparseable config ({exc})") from exc
    except Exception as exc:
        if type(exc).__module__.startswith("yaml"):
            raise ConfigError(str(path), f"unparseable config ({exc})") from exc
        raise


def _build(cls, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a table")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(prefix + key)
    kwargs = {}
    for key, value in data.items():
        typ = hints[key]
        if isinstance(typ, type) and is_dataclass(typ):
            kwargs[key] = _build(typ, value, prefix + key + ".")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(prefix.rstrip(".") or "<root>", str(exc)) from exc


def apply_override(cfg: RunConfig, dotted: str, value) -> RunConfig:
    """Return a copy of ``cfg`` with ``section.key`` set to ``value``."""
    data = cfg.to_dict()
    node = data
    parts = dotted.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(dotted)
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(dotted)
    node[parts[-1]] = value
    return RunConfig.from_dict(data)
