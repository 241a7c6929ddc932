"""Baselines, the retrieval-count sweep, the multi-seed comparison table and a redundancy diagnostic."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .geo import GeoIndex, RetrievalFilter
from .metrics import MetricsReport, ci95
from .trainer import AppraisalData, EmptyPoolError, TrainConfig, evaluate, prepare, record_filter, train

log = logging.getLogger(__name__)

RIDGE_JITTER = 1e-8


# -------------------------------------------------------------------- linear


def fit_linear(X, y) -> np.ndarray:
    """Least squares with intercept via the normal equations; slopes get a 1e-8 ridge jitter.

    Returns [intercept, *slopes].
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("cannot fit on an empty training set")
    A = np.column_stack([np.ones(len(X)), X])
    gram = A.T @ A
    gram[1:, 1:] += RIDGE_JITTER * np.eye(X.shape[1])
    try:
        coef = np.linalg.solve(gram, A.T @ y)
    except np.linalg.LinAlgError:
        raise ValueError("singular normal equations after jitter") from None
    if not np.isfinite(coef).all():
        raise ValueError("singular normal equations after jitter")
    return coef


def predict_linear(coef, X) -> np.ndarray:
    return coef[0] + np.asarray(X, dtype=np.float64) @ coef[1:]


def baseline_linear(data: AppraisalData, partition: str = "test") -> MetricsReport:
    tr = data.rows("train")
    rows = data.rows(partition)
    coef = fit_linear(data.X[tr], data.v[tr])
    est = data.transform.to_value_units(predict_linear(coef, data.X[rows]))
    return MetricsReport.from_predictions(est, data.value_units(rows), {"model": "LR", "partition": partition})


# ----------------------------------------------------------------------- kNN


def knn_predict(data: AppraisalData, rows, k: int, space: str = "geo") -> np.ndarray:
    """Mean transformed target of the k nearest admissible pool records.

    ``space="geo"`` ranks by haversine distance, ``"feature"`` by Euclidean distance on
    scaled features; both apply the no-self and strictly-past filters.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    out = np.empty(len(rows))
    pool_X = data.X[data.pool_rows]
    pool_dates = data.dataset.dates[data.pool_rows]
    for t, r in enumerate(rows):
        rec = data.dataset[int(r)]
        flt = record_filter(data, rec)
        if space == "geo":
            ids, _ = data.index.query(rec.lat, rec.lon, k, flt)
            picked = np.searchsorted(data.pool_ids, ids)
        elif space == "feature":
            ok = data.pool_ids != rec.id
            if flt.max_date is not None:
                ok &= pool_dates < flt.max_date
            cand = np.flatnonzero(ok)
            d = np.sum((pool_X[cand] - data.X[r]) ** 2, axis=1)
            picked = cand[np.lexsort((data.pool_ids[cand], d))[:k]]
        else:
            raise ValueError(f"unknown kNN space {space!r}")
        if len(picked) == 0:
            raise EmptyPoolError(f"target {rec.id}: empty neighbourhood")
        out[t] = np.mean(data.v[data.pool_rows[picked]])
    return out


def baseline_knn(data: AppraisalData, k: int = 10, partition: str = "test", space: str = "geo") -> MetricsReport:
    rows = data.rows(partition)
    est = data.transform.to_value_units(knn_predict(data, rows, k, space))
    return MetricsReport.from_predictions(est, data.value_units(rows),
                                          {"model": "kNN", "k": k, "space": space, "partition": partition})


# --------------------------------------------------------------------- sweep

SWEEP_FIELDS = ["mode", "total_comparables", "seed", "mdae", "mdabre"]
SUMMARY_FIELDS = ["mode", "total_comparables", "n", "mdae_mean", "mdae_ci95", "mdabre_mean", "mdabre_ci95"]


def _sweep_cell(args):
    data, cfg, partition = args
    res = train(data, cfg, evaluate_val=False)
    rep = evaluate(res.params, res.history, data, partition, cfg, compare_latest=False)
    return {"mode": cfg.mode, "total_comparables": 2 * cfg.k1, "seed": cfg.seed,
            "mdae": rep.mdae, "mdabre": rep.mdabre}


def sweep_retrieval(data: AppraisalData, base: TrainConfig, k1_list, seeds,
                    modes=("geo_only", "hybrid", "vector_only"), partition: str = "val",
                    n_jobs: int = 1) -> list[dict]:
    """Train one REA model per (mode, k1, seed) and score it on ``partition``.

    Every mode reuses the same split and the same per-seed initialisation stream.
    Rows come back in (mode, k1, seed) order whatever ``n_jobs`` is.
    """
    if not list(k1_list):
        raise ValueError("k1_list must be non-empty")
    cells = [(data, replace(base, mode=m, k1=int(k), seed=int(s), variant="REA"), partition)
             for m in modes for k in k1_list for s in seeds]
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(n_jobs) as pool:
            return list(pool.map(_sweep_cell, cells))
    return [_sweep_cell(c) for c in cells]


def summarize_sweep(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["mode"], r["total_comparables"]), []).append(r)
    out = []
    for (mode, total), rs in groups.items():
        mdae_m, mdae_c = ci95([r["mdae"] for r in rs])
        ab_m, ab_c = ci95([r["mdabre"] for r in rs])
        out.append({"mode": mode, "total_comparables": total, "n": len(rs), "mdae_mean": mdae_m,
                    "mdae_ci95": mdae_c, "mdabre_mean": ab_m, "mdabre_ci95": ab_c})
    return out


def write_rows(rows: list[dict], fields: list[str], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------- comparison


@dataclass
class TableRow:
    model: str
    mdae: float
    mdae_ci95: float
    mdabre: float
    mdabre_ci95: float
    n_seeds: int
    n_params: int | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def comparison_table(dataset: Dataset, split, target_kind: str, rea: TrainConfig, erea: TrainConfig,
                     seeds, knn_k: int = 10, partition: str = "test") -> list[TableRow]:
    """LR, kNN, REA and EREA on one partition; the learned models are averaged over ``seeds``
    with a 95% interval."""
    from .model import param_count

    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    base = prepare(dataset, split, target_kind, "REA")
    lr = baseline_linear(base, partition)
    knn = baseline_knn(base, knn_k, partition)
    rows = [TableRow("LR", lr.mdae, 0.0, lr.mdabre, 0.0, 1, dataset.n_features + 1),
            TableRow("kNN", knn.mdae, 0.0, knn.mdabre, 0.0, 1, 0)]
    for cfg in (replace(rea, variant="REA"), replace(erea, variant="EREA")):
        data = base if cfg.variant == "REA" else prepare(dataset, split, target_kind, "EREA")
        per = []
        n_params = None
        for s in seeds:
            c = replace(cfg, seed=int(s))
            res = train(data, c, evaluate_val=False)
            rep = evaluate(res.params, res.history, data, partition, c, compare_latest=False)
            per.append(rep)
            n_params = param_count(res.params)
            log.info("%s seed %s: mdae=%.6g mdabre=%.4f", cfg.variant, s, rep.mdae, rep.mdabre)
        mdae_m, mdae_c = ci95([r.mdae for r in per])
        ab_m, ab_c = ci95([r.mdabre for r in per])
        rows.append(TableRow(cfg.variant, mdae_m, mdae_c, ab_m, ab_c, len(seeds), n_params))
    return rows


def format_table(rows: list[TableRow]) -> str:
    lines = ["| Model | MdAE | MdABRE (%) | seeds | params |", "|---|---|---|---|---|"]
    for r in rows:
        mdae = f"{r.mdae:.2f}" + (f" ± {r.mdae_ci95:.2f}" if r.n_seeds > 1 else "")
        ab = f"{100 * r.mdabre:.2f}" + (f" ± {100 * r.mdabre_ci95:.2f}" if r.n_seeds > 1 else "")
        lines.append(f"| {r.model} | {mdae} | {ab} | {r.n_seeds} | {r.n_params if r.n_params is not None else ''} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- redundancy


def redundancy_report(dataset: Dataset, threshold: float = 1.0, past_only: bool = False):
    """Fraction of records whose geographically closest other record has |price diff| < threshold.

    Returns (fraction, flags) with one boolean flag per dataset row.
    """
    n = len(dataset)
    flags = np.zeros(n, dtype=bool)
    if n < 2:
        return 0.0, flags
    index = GeoIndex.from_dataset(dataset)
    for r in range(n):
        max_date = float(dataset.dates[r]) if past_only and not np.isnan(dataset.dates[r]) else None
        ids, _ = index.query(dataset.lat[r], dataset.lon[r], 1,
                             RetrievalFilter(exclude_id=int(dataset.ids[r]), max_date=max_date))
        if len(ids):
            flags[r] = abs(dataset.price[dataset.row_of(ids[0])] - dataset.price[r]) < threshold
    return float(flags.mean()), flags
