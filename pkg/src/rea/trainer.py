"""Alternating optimisation: refresh the embedding index, resample comparables, train an epoch.

Geographic candidates never change during a run (coordinates are fixed), so each
target's N-nearest pool is computed once; only the vector re-ranking uses the
per-epoch embedding table.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DAYS_PER_YEAR, Dataset, PropertyRecord, ScalerParams, SplitSpec, TargetTransform, \
    fit_scaler, fit_target_transform
from .geo import GeoIndex, RetrievalFilter, pool_size
from .metrics import MetricsReport
from .model import Batch, ComparableEntry, ComparableSet, ModelParams, forward_batch, loss_and_grads
from .neural import AdamState, DenseStack, adam_step

log = logging.getLogger(__name__)

MODES = ("geo_only", "vector_only", "hybrid")


class TrainingDiverged(RuntimeError):
    pass


class EmptyPoolError(ValueError):
    pass


@dataclass
class TrainConfig:
    k1: int = 5
    mode: str = "hybrid"
    epochs: int = 50
    batch_size: int = 64
    base_lr: float = 1e-3
    encoder_decay: float = 0.98
    seed: int = 0
    variant: str = "REA"
    embed_dim: int = 16
    encoder_hidden: tuple[int, ...] = (16,)
    gate_hidden: int = 8
    decoder_hidden: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.k1 < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("k1 and epochs must be >= 0, batch_size >= 1")
        if self.variant not in ("REA", "EREA"):
            raise ValueError("variant must be REA or EREA")
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)

    @property
    def counts(self) -> tuple[int, int]:
        """(geo, vector) comparable counts; 2*k1 in total."""
        k = self.k1
        return {"geo_only": (2 * k, 0), "vector_only": (0, 2 * k), "hybrid": (k, k)}[self.mode]

    @property
    def pool_size(self) -> int:
        return pool_size(self.k1)

    def encoder_lr(self, epoch: int) -> float:
        return self.base_lr * self.encoder_decay ** epoch

    def init_params(self, n_features: int, rng) -> ModelParams:
        return ModelParams.init(self.variant, n_features, rng, embed_dim=self.embed_dim,
                                encoder_hidden=self.encoder_hidden, gate_hidden=self.gate_hidden,
                                decoder_hidden=self.decoder_hidden)


# ------------------------------------------------------------------ prepared data


@dataclass
class AppraisalData:
    """A dataset bound to its split, target transform, scaler and retrieval pool."""

    dataset: Dataset
    split: SplitSpec
    transform: TargetTransform
    scaler: ScalerParams
    X: np.ndarray
    v: np.ndarray
    pool_ids: np.ndarray  # ascending
    pool_rows: np.ndarray
    index: GeoIndex

    @property
    def temporal(self) -> bool:
        return self.dataset.has_dates

    def rows(self, partition: str) -> np.ndarray:
        return self.dataset.rows_of(self.split.partition(partition))

    def value_units(self, rows) -> np.ndarray:
        ds = self.dataset
        return self.transform.value_units(ds.price[rows], ds.surface[rows])


def prepare(dataset: Dataset, split: SplitSpec, target_kind: str = "log_price", variant: str = "REA",
            transform: TargetTransform | None = None, scaler: ScalerParams | None = None) -> AppraisalData:
    """Fit scaler and target transform on the train partition (unless given)."""
    if not split.train_ids:
        raise ValueError("empty training partition")
    train_rows = dataset.rows_of(split.train_ids)
    if scaler is None:
        scaler = fit_scaler(dataset.features[train_rows])
    if transform is None:
        transform = fit_target_transform(dataset, split.train_ids, target_kind, normalize=variant == "EREA")
    X = scaler.apply(dataset.features)
    with np.errstate(invalid="ignore"):
        v = np.log(transform.value_units(dataset.price, dataset.surface)) / transform.scale
    pool_ids = np.sort(np.asarray(split.pool_ids(), dtype=np.int64))
    pool_rows = dataset.rows_of(pool_ids)
    index = GeoIndex.from_dataset(dataset, pool_rows)
    return AppraisalData(dataset, split, transform, scaler, X, v, pool_ids, pool_rows, index)


def record_filter(data: AppraisalData, record: PropertyRecord) -> RetrievalFilter:
    max_date = float(record.date) if (data.temporal and record.date is not None) else None
    return RetrievalFilter(exclude_id=record.id, max_date=max_date)


# --------------------------------------------------------------- candidate pools


@dataclass
class CandidatePools:
    """Per-target N-nearest admissible pool members, ordered by (distance, id).

    ``pos`` indexes ``data.pool_ids``; padding is -1.
    """

    pos: np.ndarray  # (T, N)
    dist: np.ndarray  # (T, N) meters
    target_dates: np.ndarray  # (T,)
    target_features: np.ndarray  # (T, f) scaled
    target_ids: np.ndarray  # (T,)

    def __len__(self) -> int:
        return self.pos.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return (self.pos >= 0).sum(axis=1)

    def take(self, idx) -> "CandidatePools":
        return CandidatePools(self.pos[idx], self.dist[idx], self.target_dates[idx],
                              self.target_features[idx], self.target_ids[idx])


def candidate_pools(data: AppraisalData, records: list[PropertyRecord], k1: int,
                    features_scaled=None) -> CandidatePools:
    N = pool_size(k1)
    T = len(records)
    pos = np.full((T, N), -1, dtype=np.int64)
    dist = np.full((T, N), np.nan)
    for t, rec in enumerate(records):
        ids, d = data.index.query(rec.lat, rec.lon, N, record_filter(data, rec))
        pos[t, : len(ids)] = np.searchsorted(data.pool_ids, ids)
        dist[t, : len(ids)] = d
    dates = np.array([np.nan if r.date is None else r.date for r in records], dtype=np.float64)
    if features_scaled is None:
        features_scaled = data.scaler.apply(np.array([r.features for r in records], dtype=np.float64))
    ids = np.array([r.id for r in records], dtype=np.int64)
    return CandidatePools(pos, dist, dates, np.asarray(features_scaled).reshape(T, -1), ids)


def pools_for_rows(data: AppraisalData, rows, k1: int) -> CandidatePools:
    rows = np.asarray(rows, dtype=np.int64)
    return candidate_pools(data, [data.dataset[r] for r in rows], k1, data.X[rows])


# ----------------------------------------------------------------- embeddings


@dataclass
class EmbeddingTable:
    """Embeddings of every retrieval-pool record (rows follow ``AppraisalData.pool_ids``)."""

    epoch: int
    Z: np.ndarray
    encoder: DenseStack
    previous: "EmbeddingTable | None" = None

    def query(self, features) -> np.ndarray:
        """Embed targets with the same weights that produced this table."""
        return self.encoder.forward(features)[0]


def refresh_embeddings(params: ModelParams, data: AppraisalData, epoch: int,
                       previous: EmbeddingTable | None = None) -> EmbeddingTable:
    if len(data.pool_rows) == 0:
        raise EmptyPoolError("retrieval pool is empty")
    Z, _ = params.encoder.forward(data.X[data.pool_rows])
    prev = None if previous is None else replace(previous, previous=None)
    return EmbeddingTable(epoch, Z, params.encoder, prev)


# ------------------------------------------------------------------ sampling


@dataclass
class Selection:
    """Chosen pool columns per target (-1 padded) and their source (0 geo, 1 vector)."""

    cols: np.ndarray  # (T, m) indices into CandidatePools columns
    source: np.ndarray  # (T, m) int8

    @property
    def counts(self) -> np.ndarray:
        return (self.cols >= 0).sum(axis=1)


def select_comparables(pools: CandidatePools, table: EmbeddingTable | None, config: TrainConfig) -> Selection:
    """Geo entries are the k_geo nearest; vector entries are the top-k_vec dot products among the
    remaining pool members (ties to the lower id)."""
    k_geo, k_vec = config.counts
    T, N = pools.pos.shape
    k_geo = min(k_geo, N)
    geo_cols = np.broadcast_to(np.arange(k_geo), (T, k_geo)).copy()
    geo_cols[pools.pos[:, :k_geo] < 0] = -1
    parts_cols, parts_src = [geo_cols], [np.zeros((T, k_geo), dtype=np.int8)]
    if k_vec > 0:
        if table is None:
            raise ValueError("vector retrieval needs an embedding table")
        rest = pools.pos[:, k_geo:]
        valid = rest >= 0
        zq = table.query(pools.target_features)
        zc = table.Z[np.where(valid, rest, 0)]
        scores = np.einsum("tnd,td->tn", zc, zq)
        neg = np.where(valid, -scores, np.inf)
        tie = np.where(valid, rest, np.iinfo(np.int64).max)
        order = np.lexsort((tie, neg), axis=-1)[:, :k_vec]
        picked_valid = np.take_along_axis(valid, order, axis=1)
        vec_cols = np.where(picked_valid, order + k_geo, -1)
        if vec_cols.shape[1] < k_vec:
            vec_cols = np.pad(vec_cols, ((0, 0), (0, k_vec - vec_cols.shape[1])), constant_values=-1)
        parts_cols.append(vec_cols)
        parts_src.append(np.ones((T, k_vec), dtype=np.int8))
    return Selection(np.concatenate(parts_cols, axis=1), np.concatenate(parts_src, axis=1))


def make_batch(data: AppraisalData, pools: CandidatePools, sel: Selection, idx=None, targets=None) -> Batch:
    """Gather padded model inputs; each row is ordered by ascending comparable id."""
    if idx is None:
        idx = np.arange(len(pools))
    cols = sel.cols[idx]
    src = sel.source[idx]
    pos_all = pools.pos[idx]
    ok = cols >= 0
    safe_cols = np.where(ok, cols, 0)
    pos = np.where(ok, np.take_along_axis(pos_all, safe_cols, axis=1), -1)
    # id order == pool position order
    order = np.argsort(np.where(ok, pos, np.iinfo(np.int64).max), axis=1, kind="stable")
    pos = np.take_along_axis(pos, order, axis=1)
    safe_cols = np.take_along_axis(safe_cols, order, axis=1)
    ok = np.take_along_axis(ok, order, axis=1)
    src = np.take_along_axis(src, order, axis=1)
    keep = ok.any(axis=0)
    pos, safe_cols, ok, src = pos[:, keep], safe_cols[:, keep], ok[:, keep], src[:, keep]
    if not ok.any(axis=1).all():
        raise EmptyPoolError("a target has no admissible comparables")

    safe_pos = np.where(ok, pos, 0)
    rows = data.pool_rows[safe_pos]
    feats = np.where(ok[..., None], data.X[rows], 0.0)
    dist_km = np.where(ok, np.take_along_axis(pools.dist[idx], safe_cols, axis=1), 0.0) / 1000.0
    if data.temporal:
        dt = (pools.target_dates[idx][:, None] - data.dataset.dates[rows]) / DAYS_PER_YEAR
        dt = np.where(ok, np.nan_to_num(dt), 0.0)
    else:
        dt = np.zeros_like(dist_km)
    rel = np.stack([dist_km, dt], axis=-1)
    vals = np.where(ok, data.v[rows], 0.0)
    ids = np.where(ok, data.pool_ids[safe_pos], -1)
    return Batch(pools.target_features[idx], feats, rel, vals, ok, targets, ids, np.where(ok, src, -1))


def batch_to_sets(batch: Batch, target_ids) -> list[ComparableSet]:
    out = []
    src = batch.source
    for b, tid in enumerate(target_ids):
        entries = []
        for j in np.flatnonzero(batch.mask[b]):
            entries.append(ComparableEntry(
                int(batch.ids[b, j]), "vector" if src is not None and src[b, j] == 1 else "geo",
                batch.features[b, j].copy(), batch.relative[b, j].copy(), float(batch.values[b, j])))
        out.append(ComparableSet(int(tid), entries))
    return out


def sample_comparables(data: AppraisalData, table: EmbeddingTable | None, config: TrainConfig,
                       record: PropertyRecord) -> ComparableSet:
    """Comparables for one target under the configured geo/vector/hybrid policy."""
    pools = candidate_pools(data, [record], config.k1)
    if pools.counts[0] == 0:
        raise EmptyPoolError(f"target {record.id}: no admissible comparables in the retrieval pool")
    sel = select_comparables(pools, table, config)
    batch = make_batch(data, pools, sel)
    return batch_to_sets(batch, [record.id])[0]


# -------------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    history: list[EmbeddingTable]
    penultimate: ModelParams
    skipped_targets: int = 0

    @property
    def eval_table(self) -> EmbeddingTable:
        return evaluation_table(self.history)


def evaluation_table(history: list[EmbeddingTable]) -> EmbeddingTable:
    """Previous-to-last refresh; falls back to the only table when there is one."""
    if not history:
        raise ValueError("no embedding table")
    if len(history) < 2:
        log.warning("fewer than two index refreshes; evaluating with the latest table")
        return history[-1]
    return history[-2]


def encoder_lr_scale(params: ModelParams, decay_factor: float) -> np.ndarray:
    scale = np.ones(sum(s.stop - s.start for s in params.group_slices().values()))
    scale[params.group_slices()["encoder"]] = decay_factor
    return scale


def train(data: AppraisalData, config: TrainConfig, log_path=None, evaluate_val: bool = True) -> TrainResult:
    """Each epoch: refresh embeddings, resample every train target once, shuffle, Adam minibatches.

    The encoder's learning rate is multiplied by ``encoder_decay ** epoch``; gate and
    decoder keep the base rate. After the last epoch one more refresh is made, so the
    history holds ``epochs + 1`` tables and evaluation uses the table the final weights
    were trained against.
    """
    rng = np.random.default_rng(config.seed)
    params = config.init_params(data.X.shape[1], rng)
    state = AdamState.zeros(len(params.to_vector()), config.base_lr)

    train_rows = data.rows("train")
    pools = pools_for_rows(data, train_rows, config.k1)
    has_pool = pools.counts > 0
    skipped = int((~has_pool).sum())
    if skipped:
        log.warning("%d train targets have no admissible comparables and are skipped", skipped)
        pools = pools.take(np.flatnonzero(has_pool))
        train_rows = train_rows[has_pool]
    if len(train_rows) == 0:
        raise EmptyPoolError("no train target has an admissible comparable")
    targets = data.v[train_rows]

    val_rows = data.rows("val") if evaluate_val else np.empty(0, dtype=np.int64)
    val_pools = pools_for_rows(data, val_rows, config.k1) if len(val_rows) else None

    history: list[EmbeddingTable] = []
    records: list[dict] = []
    penultimate = params
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            penultimate = params
            table = refresh_embeddings(params, data, epoch, history[-1] if history else None)
            history.append(table)
            sel = select_comparables(pools, table, config)
            order = rng.permutation(len(train_rows))
            lr_scale = encoder_lr_scale(params, config.encoder_decay ** epoch)
            vec = params.to_vector()
            total = 0.0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                batch = make_batch(data, pools, sel, idx, targets[idx])
                mse, grad = loss_and_grads(params, batch)
                if not np.isfinite(mse) or not np.isfinite(grad).all():
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                vec, state = adam_step(vec, grad, state, lr_scale)
                params = params.with_vector(vec)
                total += mse * len(idx)
            rec = {"epoch": epoch, "train_mse": total / len(order),
                   "val_mdae": None, "val_mdabre": None, "encoder_lr": config.encoder_lr(epoch)}
            if val_pools is not None:
                rep = evaluate_pools(params, table, data, val_pools, config)
                rec["val_mdae"], rec["val_mdabre"] = rep.mdae, rep.mdabre
            rec["wall_time_s"] = time.perf_counter() - t0
            records.append(rec)
            log.info("epoch %d train_mse=%.6g val_mdabre=%s", epoch, rec["train_mse"], rec["val_mdabre"])
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
        history.append(refresh_embeddings(params, data, config.epochs, history[-1] if history else None))
    finally:
        if fh:
            fh.close()
    return TrainResult(params, records, history, penultimate, skipped)


# ------------------------------------------------------------------ evaluation


@dataclass
class PredictionSet:
    pools: CandidatePools
    selection: Selection
    outputs: dict
    batch: Batch

    @property
    def v_star(self) -> np.ndarray:
        return self.outputs["v_star"]


def predict_pools(params: ModelParams, table: EmbeddingTable | None, data: AppraisalData,
                  pools: CandidatePools, config: TrainConfig) -> PredictionSet:
    empty = np.flatnonzero(pools.counts == 0)
    if len(empty):
        raise EmptyPoolError(f"{len(empty)} target(s) have no admissible comparables "
                             f"(first id {int(pools.target_ids[empty[0]])}); retrieval pool is empty for them")
    sel = select_comparables(pools, table, config)
    batch = make_batch(data, pools, sel)
    return PredictionSet(pools, sel, forward_batch(params, batch), batch)


def evaluate_pools(params, table, data: AppraisalData, pools: CandidatePools, config: TrainConfig,
                   rows=None) -> MetricsReport:
    if len(pools) == 0:
        raise ValueError("empty evaluation partition")
    pred = predict_pools(params, table, data, pools, config)
    if rows is None:
        rows = data.dataset.rows_of(pools.target_ids)
    truth = data.value_units(rows)
    est = data.transform.to_value_units(pred.v_star)
    return MetricsReport.from_predictions(est, truth, {"mode": config.mode, "k1": config.k1,
                                                       "variant": config.variant})


def evaluate(params: ModelParams, history: list[EmbeddingTable], data: AppraisalData, partition: str,
             config: TrainConfig, compare_latest: bool = True) -> MetricsReport:
    """Metrics in value units (price, or price per m² for the per-sqm target) on a partition,
    retrieving with the previous-to-last embedding table."""
    rows = data.rows(partition)
    if len(rows) == 0:
        raise ValueError(f"partition {partition!r} is empty")
    pools = pools_for_rows(data, rows, config.k1)
    table = evaluation_table(history)
    rep = evaluate_pools(params, table, data, pools, config, rows)
    rep.config.update(partition=partition, table_epoch=table.epoch)
    if compare_latest and history and history[-1] is not table:
        latest = evaluate_pools(params, history[-1], data, pools, config, rows)
        rep.diagnostics["latest_table"] = {"epoch": history[-1].epoch, "mdae": latest.mdae,
                                           "mdabre": latest.mdabre}
        log.info("previous-to-last vs latest table: mdabre %.6g vs %.6g", rep.mdabre, latest.mdabre)
    return rep


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["encoder_hidden"] = list(config.encoder_hidden)
    return d
