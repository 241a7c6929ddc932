"""Retrieval-enhanced appraisal graph: bi-encoder, dot-product attention, optional gate,
weighted value aggregation and tanh-bounded multiplicative adjustment.

Two variants share the code path:

* ``REA``: encoder + attention + weighted average of comparable values.
* ``EREA``: adds a sigmoid gate on the raw scores and a decoder producing an
  adjustment factor in (-1, 1) applied to the aggregated value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .neural import DenseStack, softmax

RELATIVE_SCHEMA = ("distance_km", "time_delta_years")
VARIANTS = ("REA", "EREA")
SOURCES = ("geo", "vector")

# keeps 1 + adj strictly inside (0, 2) in float64
ADJ_BOUND = 1.0 - 2.0 ** -50


class ModelError(ValueError):
    pass


@dataclass
class ComparableEntry:
    id: int
    source: str
    features: np.ndarray
    relative: np.ndarray
    value: float


@dataclass
class ComparableSet:
    target_id: int
    entries: list[ComparableEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self) -> None:
        ids = [e.id for e in self.entries]
        if self.target_id in ids:
            raise ModelError(f"target {self.target_id} retrieved as its own comparable")
        if len(set(ids)) != len(ids):
            raise ModelError(f"duplicate comparables for target {self.target_id}")
        for e in self.entries:
            if e.source not in SOURCES:
                raise ModelError(f"unknown comparable source {e.source!r}")

    def sorted_entries(self) -> list[ComparableEntry]:
        return sorted(self.entries, key=lambda e: e.id)


@dataclass
class ModelParams:
    variant: str
    encoder: DenseStack
    gate: DenseStack | None = None
    decoder: DenseStack | None = None

    @classmethod
    def init(cls, variant: str, n_features: int, rng: np.random.Generator, embed_dim: int = 16,
             encoder_hidden=(16,), gate_hidden: int = 8, decoder_hidden: int = 16,
             n_relative: int = len(RELATIVE_SCHEMA)) -> "ModelParams":
        if variant not in VARIANTS:
            raise ModelError(f"unknown variant {variant!r}")
        hidden = list(encoder_hidden)
        encoder = DenseStack.init([n_features, *hidden, embed_dim], ["selu"] * len(hidden) + ["linear"], rng)
        if variant == "REA":
            return cls(variant, encoder)
        item_dim = n_features + n_relative + 1
        gate = DenseStack.init([n_features + item_dim, gate_hidden, 1], ["selu", "sigmoid"], rng)
        decoder = DenseStack.init([item_dim + n_features, decoder_hidden, 1], ["selu", "tanh"], rng)
        # start from adj = 0: the untrained model predicts the attention-weighted value
        decoder.layers[-1].weight[:] = 0.0
        return cls(variant, encoder, gate, decoder)

    @property
    def embed_dim(self) -> int:
        return self.encoder.out_dim

    @property
    def n_features(self) -> int:
        return self.encoder.in_dim

    def stacks(self) -> dict[str, DenseStack | None]:
        return {"encoder": self.encoder, "gate": self.gate, "decoder": self.decoder}

    def group_slices(self) -> dict[str, slice]:
        out, p = {}, 0
        for name, s in self.stacks().items():
            if s is not None:
                out[name] = slice(p, p + s.n_params)
                p += s.n_params
        return out

    def to_vector(self) -> np.ndarray:
        return np.concatenate([s.to_vector() for s in self.stacks().values() if s is not None])

    def with_vector(self, vec) -> "ModelParams":
        sl = self.group_slices()
        new = {name: self.stacks()[name].with_vector(vec[s]) for name, s in sl.items()}
        return ModelParams(self.variant, new["encoder"], new.get("gate"), new.get("decoder"))


def param_count(params: ModelParams) -> int:
    return sum(s.n_params for s in params.stacks().values() if s is not None)


@dataclass
class Prediction:
    v_hat: float
    adj: float
    v_star: float
    attention: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    agg: np.ndarray | None
    ids: list[int]


@dataclass
class Batch:
    """Padded comparable tensors; entries of each row sorted by ascending comparable id."""

    target_features: np.ndarray  # (B, f)
    features: np.ndarray  # (B, m, f)
    relative: np.ndarray  # (B, m, r)
    values: np.ndarray  # (B, m)
    mask: np.ndarray  # (B, m) bool
    targets: np.ndarray | None = None  # (B,)
    ids: np.ndarray | None = None  # (B, m), -1 for padding
    source: np.ndarray | None = None  # (B, m), 0 geo / 1 vector / -1 padding

    def __len__(self) -> int:
        return self.features.shape[0]


def pack(target_features, sets: list[ComparableSet], targets=None) -> Batch:
    tf = np.atleast_2d(np.asarray(target_features, dtype=np.float64))
    if len(sets) != tf.shape[0]:
        raise ModelError("one comparable set per target required")
    m = max((len(s) for s in sets), default=0)
    if m == 0 or any(len(s) == 0 for s in sets):
        raise ModelError("empty comparable set; widen retrieval")
    f = tf.shape[1]
    r = len(sets[0].entries[0].relative)
    B = len(sets)
    feats = np.zeros((B, m, f))
    rel = np.zeros((B, m, r))
    vals = np.zeros((B, m))
    mask = np.zeros((B, m), dtype=bool)
    ids = np.full((B, m), -1, dtype=np.int64)
    for b, s in enumerate(sets):
        s.validate()
        for j, e in enumerate(s.sorted_entries()):
            feats[b, j] = e.features
            rel[b, j] = e.relative
            vals[b, j] = e.value
            mask[b, j] = True
            ids[b, j] = e.id
    t = None if targets is None else np.asarray(targets, dtype=np.float64).reshape(B)
    return Batch(tf, feats, rel, vals, mask, t, ids)


# ---------------------------------------------------------------- single steps


def encode(params: ModelParams, features):
    return params.encoder.forward(features)[0]


def attention_scores(z_target, z_comparables):
    """Raw scores: dot product of each comparable embedding with the target embedding."""
    zt = np.asarray(z_target, dtype=np.float64)
    zc = np.asarray(z_comparables, dtype=np.float64)
    return np.einsum("...md,...d->...m", zc, zt)


def _items(features, relative, values):
    return np.concatenate([features, relative, np.asarray(values)[..., None]], axis=-1)


def _gate_input(target_features, items):
    tf = np.broadcast_to(np.asarray(target_features)[..., None, :], items.shape[:-1] + (target_features.shape[-1],))
    return np.concatenate([tf, items], axis=-1)


def gated_scores(params: ModelParams, alpha, target_features, features, relative, values):
    """Scale raw scores by gate(F_t ⊕ F_i ⊕ R_i ⊕ v_i) in (0, 1)."""
    if params.variant != "EREA" or params.gate is None:
        raise ModelError("gated_scores is only defined for EREA")
    tf = np.asarray(target_features, dtype=np.float64)
    g, _ = params.gate.forward(_gate_input(tf, _items(features, relative, values)))
    return np.asarray(alpha) * g[..., 0]


def aggregate(gamma, values, items):
    """Attention-weighted value and item (F ⊕ R ⊕ v) averages."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape[-1] == 0:
        raise ModelError("cannot aggregate an empty comparable set")
    v_hat = np.sum(gamma * np.asarray(values), axis=-1)
    agg = np.sum(gamma[..., None] * np.asarray(items), axis=-2)
    return v_hat, agg


def adjust(params: ModelParams, agg, target_features, v_hat):
    """Returns (adj, v_star) with v_star = (1 + adj) * v_hat."""
    if params.variant != "EREA" or params.decoder is None:
        raise ModelError("adjust is only defined for EREA")
    out, _ = params.decoder.forward(np.concatenate([agg, target_features], axis=-1))
    adj = np.clip(out[..., 0], -ADJ_BOUND, ADJ_BOUND)
    return adj, (1.0 + adj) * v_hat


# --------------------------------------------------------------- full graph


def _forward(params: ModelParams, batch: Batch):
    tf, mask = batch.target_features, batch.mask
    zt, c_enc_t = params.encoder.forward(tf)
    zc, c_enc_c = params.encoder.forward(batch.features)
    alpha = attention_scores(zt, zc)
    items = _items(batch.features, batch.relative, batch.values)
    cache = {"zt": zt, "zc": zc, "enc_t": c_enc_t, "enc_c": c_enc_c, "items": items}
    if params.variant == "EREA":
        g, c_gate = params.gate.forward(_gate_input(tf, items))
        g = g[..., 0]
        beta = alpha * g
        cache.update(g=g, gate=c_gate)
    else:
        beta = alpha
    gamma = softmax(beta, axis=-1, mask=mask)
    v_hat, agg = aggregate(gamma, batch.values, items)
    if params.variant == "EREA":
        raw, c_dec = params.decoder.forward(np.concatenate([agg, tf], axis=-1))
        raw = raw[..., 0]
        adj = np.clip(raw, -ADJ_BOUND, ADJ_BOUND)
        v_star = (1.0 + adj) * v_hat
        cache.update(dec=c_dec, clipped=raw != adj)
    else:
        adj = np.zeros_like(v_hat)
        v_star = v_hat
    out = {"alpha": alpha, "beta": beta, "gamma": gamma, "v_hat": v_hat, "agg": agg, "adj": adj, "v_star": v_star}
    return out, cache


def forward_batch(params: ModelParams, batch: Batch) -> dict:
    return _forward(params, batch)[0]


def model_forward(params: ModelParams, target_features, comparables: ComparableSet) -> Prediction:
    batch = pack(np.asarray(target_features)[None, :], [comparables])
    out = forward_batch(params, batch)
    m = int(batch.mask[0].sum())
    return Prediction(
        v_hat=float(out["v_hat"][0]),
        adj=float(out["adj"][0]),
        v_star=float(out["v_star"][0]),
        attention=out["gamma"][0, :m],
        alpha=out["alpha"][0, :m],
        beta=out["beta"][0, :m],
        agg=out["agg"][0] if params.variant == "EREA" else None,
        ids=[int(i) for i in batch.ids[0, :m]],
    )


def loss_and_grads(params: ModelParams, batch: Batch):
    """Mean squared error of v_star against the batch targets, and its gradient as a flat
    vector in ``params.to_vector()`` layout. Comparable selection is held constant."""
    if batch.targets is None or len(batch) == 0:
        raise ModelError("loss needs a non-empty batch with targets")
    out, cache = _forward(params, batch)
    B = len(batch)
    resid = out["v_star"] - batch.targets
    mse = float(np.mean(resid * resid))
    d_vstar = 2.0 * resid / B

    gamma, v_hat, adj = out["gamma"], out["v_hat"], out["adj"]
    items = cache["items"]
    grads = {}
    if params.variant == "EREA":
        d_adj = np.where(cache["clipped"], 0.0, d_vstar * v_hat)
        d_vhat = d_vstar * (1.0 + adj)
        d_dec_in, grads["decoder"] = params.decoder.backward(cache["dec"], d_adj[:, None])
        d_agg = d_dec_in[:, : items.shape[-1]]
        d_gamma = d_vhat[:, None] * batch.values + np.einsum("bmk,bk->bm", items, d_agg)
    else:
        d_gamma = d_vstar[:, None] * batch.values

    d_beta = gamma * (d_gamma - np.sum(gamma * d_gamma, axis=-1, keepdims=True))
    if params.variant == "EREA":
        d_alpha = d_beta * cache["g"]
        d_g = d_beta * out["alpha"]
        _, grads["gate"] = params.gate.backward(cache["gate"], d_g[..., None])
    else:
        d_alpha = d_beta

    d_zt = np.einsum("bm,bmd->bd", d_alpha, cache["zc"])
    d_zc = d_alpha[..., None] * cache["zt"][:, None, :]
    _, g_t = params.encoder.backward(cache["enc_t"], d_zt)
    _, g_c = params.encoder.backward(cache["enc_c"], d_zc)
    grads["encoder"] = g_t + g_c

    flat = np.concatenate([grads[name] for name in params.group_slices()])
    return mse, flat
