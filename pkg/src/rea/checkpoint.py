"""Checkpoint directory: final and penultimate parameter files plus a JSON manifest."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .data import ScalerParams, TargetTransform
from .model import RELATIVE_SCHEMA, ModelParams
from .neural import load_params, save_params
from .trainer import AppraisalData, EmbeddingTable, TrainConfig, TrainResult, config_dict, refresh_embeddings

FINAL = "final.params"
PENULTIMATE = "penultimate.params"
MANIFEST = "manifest.json"


class CheckpointError(FileNotFoundError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    penultimate: ModelParams
    config: TrainConfig
    transform: TargetTransform
    scaler: ScalerParams
    manifest: dict

    @property
    def epochs(self) -> int:
        return int(self.manifest["epochs"])

    def history(self, data: AppraisalData) -> list[EmbeddingTable]:
        """Rebuild the tables evaluation needs: [penultimate refresh, final refresh]."""
        if self.epochs == 0:
            return [refresh_embeddings(self.params, data, 0)]
        prev = refresh_embeddings(self.penultimate, data, self.epochs - 1)
        return [prev, refresh_embeddings(self.params, data, self.epochs, prev)]


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def save_checkpoint(directory, result: TrainResult, data: AppraisalData, config: TrainConfig) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    epochs = config.epochs
    save_params(d / FINAL, result.params.stacks(), {"variant": config.variant, "after_epoch": epochs - 1})
    save_params(d / PENULTIMATE, result.penultimate.stacks(), {"variant": config.variant, "after_epoch": epochs - 2})
    manifest = {
        "variant": config.variant,
        "embed_dim": result.params.embed_dim,
        "n_features": result.params.n_features,
        "feature_names": data.dataset.feature_names,
        "relative_schema": list(RELATIVE_SCHEMA),
        "transform": {"kind": data.transform.kind, "scale": data.transform.scale},
        "scaler": {"mean": list(data.scaler.mean), "std": list(data.scaler.std)},
        "train_config": config_dict(config),
        "epochs": epochs,
        "skipped_train_targets": result.skipped_targets,
    }
    (d / MANIFEST).write_text(_dump(manifest), encoding="utf-8")
    return d


def _params_from(stacks: dict, variant: str) -> ModelParams:
    return ModelParams(variant, stacks["encoder"], stacks.get("gate"), stacks.get("decoder"))


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    for name in (MANIFEST, FINAL, PENULTIMATE):
        if not (d / name).is_file():
            raise CheckpointError(f"missing checkpoint file: {d / name}")
    manifest = json.loads((d / MANIFEST).read_text(encoding="utf-8"))
    variant = manifest["variant"]
    final, _ = load_params(d / FINAL)
    pen, _ = load_params(d / PENULTIMATE)
    tc = manifest["train_config"]
    config = TrainConfig(**{**tc, "encoder_hidden": tuple(tc["encoder_hidden"])})
    return Checkpoint(
        _params_from(final, variant), _params_from(pen, variant), config,
        TargetTransform(**manifest["transform"]),
        ScalerParams(tuple(manifest["scaler"]["mean"]), tuple(manifest["scaler"]["std"])),
        manifest,
    )
