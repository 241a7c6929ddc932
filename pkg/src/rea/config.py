"""Run configuration: a JSON file with strict keys, overridable with ``--set section.key=value``."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import CsvSchema, SynthConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "REA_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class SplitSection:
    mode: str = "temporal"
    offset_years: float = 3.0
    train_frac: float = 0.8
    val_frac: float = 0.1
    seed: int = 0


@dataclass
class TrainSection:
    variant: str = "REA"
    k1: int = 5
    mode: str = "hybrid"
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    decay: float = 0.98
    seed: int = 0
    embed_dim: int = 16
    encoder_hidden: list = field(default_factory=lambda: [16])
    gate_hidden: int = 8
    decoder_hidden: int = 16

    def __post_init__(self):
        self.to_train_config()

    def to_train_config(self, **overrides) -> TrainConfig:
        kw = dict(k1=self.k1, mode=self.mode, epochs=self.epochs, batch_size=self.batch_size,
                  base_lr=self.lr, encoder_decay=self.decay, seed=self.seed, variant=self.variant,
                  embed_dim=self.embed_dim, encoder_hidden=tuple(self.encoder_hidden),
                  gate_hidden=self.gate_hidden, decoder_hidden=self.decoder_hidden)
        kw.update(overrides)
        return TrainConfig(**kw)


@dataclass
class SweepSection:
    k1_list: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    modes: list = field(default_factory=lambda: ["geo_only", "hybrid", "vector_only"])
    partition: str = "val"
    n_jobs: int = 1


@dataclass
class TableSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    knn_k: int = 10
    partition: str = "test"
    erea: dict = field(default_factory=dict)  # TrainSection overrides for the EREA row


@dataclass
class PredictSection:
    target_id: int | None = None
    record_csv: str | None = None


@dataclass
class RunConfig:
    dataset: str | None = None
    schema: dict | None = None
    target_kind: str = "log_price"
    output_dir: str = "runs/default"
    split_file: str | None = None
    checkpoint: str | None = None
    eval_partition: str = "test"
    split: SplitSection = field(default_factory=SplitSection)
    train: TrainSection = field(default_factory=TrainSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    sweep: SweepSection = field(default_factory=SweepSection)
    table: TableSection = field(default_factory=TableSection)
    predict: PredictSection = field(default_factory=PredictSection)

    def csv_schema(self) -> CsvSchema | None:
        if self.schema is None:
            return None
        return _build(CsvSchema, self.schema, "schema")

    def out_dir(self) -> Path:
        p = Path(self.output_dir)
        if not p.is_absolute():
            p = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p
        return p

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kw = {}
    for name, value in raw.items():
        default = cls.__dataclass_fields__[name]
        proto = default.default_factory() if default.default_factory is not dataclasses.MISSING else default.default
        if dataclasses.is_dataclass(proto) and value is not None:
            kw[name] = _build(type(proto), value, f"{where}.{name}")
        elif isinstance(proto, tuple) and isinstance(value, list):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip().split("."), parsed


def load_config(path=None, overrides=()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    for text in overrides:
        keys, value = parse_override(text)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {text}: {k} is not a section")
        node[keys[-1]] = value
    return _build(RunConfig, raw, "config")
