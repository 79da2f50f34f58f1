"""YAML run configuration, validated against ``schemas/run_config.schema.json``."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .distill import DistillConfig
from .errors import ConfigError, ContractError
from .model import EncoderConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "MIXQ_OUTPUT_ROOT"


def load_schema() -> dict:
    text = resources.files("mixq").joinpath("schemas/run_config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


@dataclass
class DataConfig:
    kind: str = "synthetic"
    path: str | None = None
    vocab: str | None = None
    split: dict = field(default_factory=lambda: {"train": 0.8, "dev": 0.2})
    seed: int = 0
    # synthetic generator only
    num_examples: int = 3000
    task: str = "order"
    min_len: int | None = None
    label_noise: float = 0.0


@dataclass
class BenchConfig:
    # batches[i] runs with valid_tokens[i] tokens in total
    batches: list = field(default_factory=lambda: [16, 64])
    valid_tokens: list = field(default_factory=lambda: [440, 1691])
    precisions: list = field(default_factory=lambda: ["float32", "int8", "int4"])
    rounds: int = 100
    warmup: int = 3
    gemm_sizes: list = field(default_factory=lambda: [512, 1024])
    gemm_rounds: int = 10
    seed: int = 0


@dataclass
class RunConfig:
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    output_dir: str = "runs/default"

    @property
    def distill(self) -> DistillConfig:
        return self.train.distill

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_dict(self) -> dict:
        train = asdict(self.train)
        distill = train.pop("distill")
        return {"model": self.model.to_dict(), "train": train, "distill": distill,
                "data": asdict(self.data), "bench": asdict(self.bench), "output_dir": self.output_dir}


def _key_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        parts += extra[:1]
    elif err.validator == "required":
        parts.append(err.message.split("'")[1])
    return ".".join(parts) or "<root>"


def validate(raw: dict) -> None:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        raise ConfigError(f"invalid config key '{_key_path(e)}': {e.message}")


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        path, value = item.split("=", 1)
        keys = path.strip().split(".")
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"invalid config key '{path}': '{k}' is not a section")
        node[keys[-1]] = yaml.safe_load(value)
    return out


def from_dict(raw: dict) -> RunConfig:
    validate(raw)
    distill = DistillConfig(**raw.get("distill", {}))
    try:
        return RunConfig(
            model=EncoderConfig(**raw.get("model", {})),
            train=TrainConfig(**raw.get("train", {}), distill=distill),
            data=DataConfig(**raw.get("data", {})),
            bench=BenchConfig(**raw.get("bench", {})),
            output_dir=raw.get("output_dir", RunConfig.output_dir),
        )
    except ContractError as e:
        raise ConfigError(f"invalid config: {e}") from e


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    cfg = from_dict(apply_overrides(raw, overrides or []))
    b = cfg.bench
    if len(b.batches) != len(b.valid_tokens):
        raise ConfigError("invalid config key 'bench.valid_tokens': needs one entry per batch size")
    return cfg


def dataclass_keys(cls) -> set[str]:
    return {f.name for f in fields(cls)}
