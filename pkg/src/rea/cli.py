"""``rea <gen-synth|split|train|eval|sweep|predict|table> --config FILE [--set key=value ...]``

Exit status: 0 success, 1 invalid input (config, data, missing files), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import evaluation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, TrainSection, load_config, _build
from .data import DataError, SplitSpec, generate_synthetic, load_csv, random_split, temporal_split, write_csv, \
    write_latents
from .trainer import candidate_pools, evaluate, evaluation_table, predict_pools, prepare, train

log = logging.getLogger("rea")


class UsageError(ValueError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _load_dataset(cfg: RunConfig):
    if not cfg.dataset:
        raise ConfigError("config.dataset is required")
    path = Path(cfg.dataset)
    if not path.is_file():
        raise ConfigError(f"dataset not found: {path}")
    return load_csv(path, cfg.csv_schema())


def _make_split(cfg: RunConfig, dataset) -> SplitSpec:
    s = cfg.split
    if s.mode == "temporal":
        return temporal_split(dataset, s.offset_years, s.train_frac, s.val_frac)
    if s.mode == "random":
        return random_split(dataset, s.seed, s.train_frac, s.val_frac)
    raise ConfigError(f"split.mode must be 'temporal' or 'random', got {s.mode!r}")


def _get_split(cfg: RunConfig, dataset) -> SplitSpec:
    if cfg.split_file:
        p = Path(cfg.split_file)
        if not p.is_file():
            raise ConfigError(f"split file not found: {p}")
        return SplitSpec.load(p)
    return _make_split(cfg, dataset)


def _checkpoint_dir(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else cfg.out_dir() / "checkpoint"


# ------------------------------------------------------------------- commands


def cmd_gen_synth(cfg: RunConfig) -> dict:
    ds, latents = generate_synthetic(cfg.synth)
    path = Path(cfg.dataset) if cfg.dataset else cfg.out_dir() / "synthetic.csv"
    write_csv(ds, path)
    latent_path = path.with_suffix(".latent.json")
    write_latents(latents, latent_path)
    return {"dataset": str(path), "latents": str(latent_path), "records": len(ds)}


def cmd_split(cfg: RunConfig) -> dict:
    ds = _load_dataset(cfg)
    split = _make_split(cfg, ds)
    path = cfg.out_dir() / "split.json"
    split.save(path)
    return {"split": str(path), **{k: len(split.partition(k)) for k in ("offset", "train", "val", "test")}}


def cmd_train(cfg: RunConfig) -> dict:
    ds = _load_dataset(cfg)
    split = _get_split(cfg, ds)
    out = cfg.out_dir()
    split.save(out / "split.json")
    tc = cfg.train.to_train_config()
    data = prepare(ds, split, cfg.target_kind, tc.variant)
    result = train(data, tc, log_path=out / "train_log.jsonl")
    ckpt = save_checkpoint(_checkpoint_dir(cfg), result, data, tc)
    last = result.log[-1] if result.log else {}
    return {"checkpoint": str(ckpt), "log": str(out / "train_log.jsonl"), "epochs": tc.epochs,
            "val_mdae": last.get("val_mdae"), "val_mdabre": last.get("val_mdabre")}


def _prepared_from_checkpoint(cfg: RunConfig):
    ckpt = load_checkpoint(_checkpoint_dir(cfg))
    ds = _load_dataset(cfg)
    if ds.feature_names != ckpt.manifest["feature_names"]:
        raise DataError(f"dataset features {ds.feature_names} do not match checkpoint "
                        f"{ckpt.manifest['feature_names']}")
    split_path = cfg.out_dir() / "split.json"
    if cfg.split_file:
        split = _get_split(cfg, ds)
    elif split_path.is_file():
        split = SplitSpec.load(split_path)
    else:
        split = _make_split(cfg, ds)
    data = prepare(ds, split, ckpt.transform.kind, ckpt.config.variant, ckpt.transform, ckpt.scaler)
    return ckpt, data


def cmd_eval(cfg: RunConfig) -> dict:
    ckpt, data = _prepared_from_checkpoint(cfg)
    part = cfg.eval_partition
    report = evaluate(ckpt.params, ckpt.history(data), data, part, ckpt.config)
    out = report.to_dict()
    base = prepare(data.dataset, data.split, data.transform.kind, "REA", scaler=data.scaler)
    out["baselines"] = {
        "LR": evaluation.baseline_linear(base, part).to_dict(),
        "kNN": evaluation.baseline_knn(base, cfg.table.knn_k, part).to_dict(),
    }
    path = cfg.out_dir() / f"metrics_{part}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(out), encoding="utf-8")
    return {"metrics": str(path), "mdae": report.mdae, "mdabre": report.mdabre, "n": report.n}


def cmd_sweep(cfg: RunConfig) -> dict:
    ds = _load_dataset(cfg)
    split = _get_split(cfg, ds)
    data = prepare(ds, split, cfg.target_kind, "REA")
    sw = cfg.sweep
    rows = evaluation.sweep_retrieval(data, cfg.train.to_train_config(variant="REA"), sw.k1_list, sw.seeds,
                                      sw.modes, sw.partition, sw.n_jobs)
    out = cfg.out_dir()
    evaluation.write_rows(rows, evaluation.SWEEP_FIELDS, out / "sweep_runs.csv")
    summary = evaluation.summarize_sweep(rows)
    evaluation.write_rows(summary, evaluation.SUMMARY_FIELDS, out / "sweep_summary.csv")
    return {"runs": str(out / "sweep_runs.csv"), "summary": str(out / "sweep_summary.csv"), "cells": len(rows)}


def cmd_table(cfg: RunConfig) -> dict:
    ds = _load_dataset(cfg)
    split = _get_split(cfg, ds)
    rea = cfg.train.to_train_config(variant="REA")
    erea_section = _build(TrainSection, {**dataclasses.asdict(cfg.train), **cfg.table.erea}, "table.erea")
    erea = erea_section.to_train_config(variant="EREA")
    rows = evaluation.comparison_table(ds, split, cfg.target_kind, rea, erea, cfg.table.seeds,
                                       cfg.table.knn_k, cfg.table.partition)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.json").write_text(_dump([r.as_dict() for r in rows]), encoding="utf-8")
    md = evaluation.format_table(rows)
    (out / "table.md").write_text(md, encoding="utf-8")
    return {"table": str(out / "table.md"), "rows": [r.as_dict() for r in rows]}


def predict_record(ckpt, data, record) -> dict:
    """Prediction for one record with its comparables, most attended first."""
    cfg = ckpt.config
    table = evaluation_table(ckpt.history(data))
    feats = data.scaler.apply(np.array([record.features], dtype=np.float64))
    pools = candidate_pools(data, [record], cfg.k1, feats)
    pred = predict_pools(ckpt.params, table, data, pools, cfg)
    b = pred.batch
    o = pred.outputs
    tr = data.transform
    m = np.flatnonzero(b.mask[0])
    comps = []
    for j in m:
        cid = int(b.ids[0, j])
        row = data.dataset.row_of(cid)
        comps.append({
            "id": cid,
            "source": "vector" if b.source[0, j] == 1 else "geo",
            "distance_m": float(b.relative[0, j, 0] * 1000.0),
            "time_delta_years": float(b.relative[0, j, 1]),
            "value": float(tr.to_value_units(b.values[0, j])),
            "price": float(data.dataset.price[row]),
            "date": None if np.isnan(data.dataset.dates[row]) else int(data.dataset.dates[row]),
            "attention": float(o["gamma"][0, j]),
            "alpha": float(o["alpha"][0, j]),
        })
    comps.sort(key=lambda c: (-c["attention"], c["id"]))
    v_star = float(o["v_star"][0])
    value = float(tr.to_value_units(v_star))
    if tr.kind == "log_price":
        price = value
    else:
        price = value * record.surface if record.surface else None
    return {
        "target_id": record.id,
        "variant": cfg.variant,
        "v_star": v_star,
        "value": value,
        "price": price,
        "v_hat": float(o["v_hat"][0]),
        "adj": float(o["adj"][0]),
        "table_epoch": table.epoch,
        "comparables": comps,
    }


def cmd_predict(cfg: RunConfig) -> dict:
    ckpt, data = _prepared_from_checkpoint(cfg)
    p = cfg.predict
    if p.record_csv:
        adhoc = load_csv(p.record_csv, cfg.csv_schema(), allow_missing_price=True)
        if len(adhoc) != 1:
            raise DataError(f"{p.record_csv}: expected exactly one record, found {len(adhoc)}")
        if adhoc.feature_names != data.dataset.feature_names:
            raise DataError("ad-hoc record columns do not match the training schema")
        record = adhoc[0]
    elif p.target_id is not None:
        try:
            record = data.dataset[data.dataset.row_of(int(p.target_id))]
        except KeyError:
            raise UsageError(f"unknown target id {p.target_id}") from None
    else:
        raise ConfigError("predict needs predict.target_id or predict.record_csv")
    result = predict_record(ckpt, data, record)
    path = cfg.out_dir() / f"prediction_{record.id}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(result), encoding="utf-8")
    return result


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "predict": cmd_predict,
    "table": cmd_table,
}

VALIDATION_ERRORS = (ConfigError, DataError, CheckpointError, UsageError, FileNotFoundError)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rea", description="Retrieval-enhanced real estate appraisal")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config field, e.g. train.k1=3 (value parsed as JSON when possible)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if cfg.target_kind not in ("log_price", "log_price_per_sqm"):
            raise ConfigError(f"target_kind must be log_price or log_price_per_sqm, got {cfg.target_kind!r}")
        out = cfg.out_dir()
        out.mkdir(parents=True, exist_ok=True)
        with FileLock(str(out / ".rea.lock"), timeout=0):
            result = COMMANDS[args.command](cfg)
    except VALIDATION_ERRORS as exc:
        print(f"rea {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Timeout:
        print(f"rea {args.command}: error: another command holds the lock on {cfg.out_dir()}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"rea {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=1, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
