import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rea.model import (
    ADJ_BOUND,
    ComparableEntry,
    ComparableSet,
    ModelError,
    ModelParams,
    adjust,
    aggregate,
    attention_scores,
    encode,
    forward_batch,
    gated_scores,
    loss_and_grads,
    model_forward,
    pack,
    param_count,
)
from rea.neural import grad_check

from .conftest import toy_batch, toy_params


def _set(rng, f, m, target_id=0, ids=None):
    ids = list(range(1, m + 1)) if ids is None else ids
    return ComparableSet(target_id, [
        ComparableEntry(i, "geo" if j % 2 else "vector", rng.normal(size=f), np.abs(rng.normal(size=2)),
                        float(rng.uniform(0.9, 1.1)))
        for j, i in enumerate(ids)
    ])


def test_attention_scores_are_dot_products():
    zt = np.array([1.0, 2.0])
    zc = np.array([[3.0, 4.0], [-1.0, 0.5]])
    assert attention_scores(zt, zc).tolist() == [11.0, 0.0]


def test_gated_scores_by_hand(rng):
    p = toy_params("EREA", 3, 4, rng)
    F_t = rng.normal(size=3)
    F = rng.normal(size=(2, 3))
    R = rng.normal(size=(2, 2))
    v = np.array([1.0, 0.9])
    alpha = np.array([0.7, -1.2])
    out = gated_scores(p, alpha, F_t, F, R, v)
    for i in range(2):
        x = np.concatenate([F_t, F[i], R[i], [v[i]]])
        g = p.gate.forward(x)[0][0]
        assert 0 < g < 1
        assert out[i] == pytest.approx(alpha[i] * g, abs=1e-15)


def test_aggregate_by_hand():
    gamma = np.array([0.25, 0.75])
    items = np.array([[1.0, 2.0, 4.0], [3.0, 0.0, 8.0]])
    v_hat, agg = aggregate(gamma, items[:, -1], items)
    assert v_hat == 7.0
    assert agg.tolist() == [2.5, 0.5, 7.0]


def test_adjust_by_hand(rng):
    p = toy_params("EREA", 3, 4, rng)
    agg = rng.normal(size=6)
    F_t = rng.normal(size=3)
    adj, v_star = adjust(p, agg, F_t, 2.0)
    raw = p.decoder.forward(np.concatenate([agg, F_t]))[0][0]
    assert adj == pytest.approx(raw, abs=1e-15)
    assert v_star == pytest.approx(2.0 * (1 + raw), abs=1e-15)


def test_rea_rejects_eerea_steps(rng):
    p = toy_params("REA", 3, 4, rng)
    with pytest.raises(ModelError):
        gated_scores(p, np.zeros(1), np.zeros(3), np.zeros((1, 3)), np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ModelError):
        adjust(p, np.zeros(6), np.zeros(3), 1.0)


def test_empty_set_rejected(rng):
    p = toy_params("REA", 3, 4, rng)
    with pytest.raises(ModelError, match="empty"):
        model_forward(p, np.zeros(3), ComparableSet(5, []))


def test_self_and_duplicate_rejected(rng):
    s = _set(rng, 3, 3, target_id=2)
    with pytest.raises(ModelError, match="own"):
        s.validate()
    s = _set(rng, 3, 2, ids=[4, 4])
    with pytest.raises(ModelError, match="duplicate"):
        s.validate()


def test_untrained_erea_starts_at_weighted_average(rng):
    from rea.model import ModelParams

    p = ModelParams.init("EREA", 5, rng)
    pred = model_forward(p, rng.normal(size=5), _set(rng, 5, 6))
    assert pred.adj == 0.0
    assert pred.v_star == pred.v_hat


@pytest.mark.parametrize("variant", ["REA", "EREA"])
def test_invariants_random_forwards(variant):
    rng = np.random.default_rng(2)
    for i in range(200):
        f = int(rng.integers(1, 8))
        p = toy_params(variant, f, int(rng.integers(1, 6)), rng)
        b = toy_batch(rng, f, int(rng.integers(1, 9)), B=3, ragged=True)
        out = forward_batch(p, b)
        g = out["gamma"]
        assert np.all(np.abs(g.sum(axis=-1) - 1) <= 1e-6)
        assert np.all(g >= 0) and np.all(g[~b.mask] == 0)
        ratio = out["v_star"] / out["v_hat"]
        assert np.all((ratio > 0) & (ratio < 2))
        if variant == "REA":
            assert np.array_equal(out["v_star"], out["v_hat"])


def test_adj_clip_keeps_ratio_open(rng):
    p = toy_params("EREA", 3, 4, rng)
    vec = p.to_vector()
    sl = p.group_slices()["decoder"]
    vec[sl.stop - 1] = 1e6  # decoder output bias
    p = p.with_vector(vec)
    pred = model_forward(p, rng.normal(size=3), _set(rng, 3, 3))
    assert pred.adj == ADJ_BOUND
    assert pred.v_star / pred.v_hat < 2.0


def test_permutation_bit_invariance(rng):
    for variant in ("REA", "EREA"):
        p = toy_params(variant, 4, 5, rng)
        s = _set(rng, 4, 7, ids=[11, 3, 8, 20, 5, 1, 9])
        F_t = rng.normal(size=4)
        ref = model_forward(p, F_t, s)
        for _ in range(5):
            perm = rng.permutation(7)
            shuffled = ComparableSet(s.target_id, [s.entries[k] for k in perm])
            got = model_forward(p, F_t, shuffled)
            assert got.v_star == ref.v_star
            assert got.ids == ref.ids == sorted(ref.ids)
            assert np.array_equal(got.attention, ref.attention)


def test_bi_encoder_shared_weights(rng):
    p = toy_params("REA", 4, 3, rng)
    s = _set(rng, 4, 1)
    F_t = s.entries[0].features.copy()
    pred = model_forward(p, F_t, s)
    z = encode(p, F_t)
    assert pred.alpha[0] == pytest.approx(float(z @ z), rel=1e-14)


def test_rea_single_comparable_encoder_gradient_zero(rng):
    p = toy_params("REA", 4, 3, rng)
    b = toy_batch(rng, 4, 1, B=5)
    loss, grad = loss_and_grads(p, b)
    assert loss > 0
    assert np.all(grad == 0.0)


@pytest.mark.parametrize("variant", ["REA", "EREA"])
def test_loss_gradient_finite_differences(variant):
    rng = np.random.default_rng(7)
    p = toy_params(variant, 6, 8, rng)
    b = toy_batch(rng, 6, 5, B=6, ragged=True)

    def closure(vec):
        return loss_and_grads(p.with_vector(vec), b)

    assert grad_check(closure, p.to_vector()) < 1e-4


def test_loss_is_mse(rng):
    p = toy_params("EREA", 3, 4, rng)
    b = toy_batch(rng, 3, 4, B=5)
    loss, _ = loss_and_grads(p, b)
    out = forward_batch(p, b)
    assert loss == pytest.approx(float(np.mean((out["v_star"] - b.targets) ** 2)), rel=1e-14)


def test_param_count_by_hand(rng):
    # encoder f->16->16, gate (2f+3)->8->1, decoder (2f+3)->16->1
    assert param_count(ModelParams.init("REA", 8, rng)) == 8 * 16 + 16 + 16 * 16 + 16
    f = 8
    gate = (2 * f + 3) * 8 + 8 + 8 + 1
    dec = (2 * f + 3) * 16 + 16 + 16 + 1
    assert param_count(ModelParams.init("EREA", f, rng)) == 416 + gate + dec


@settings(max_examples=15, deadline=None)
@given(st.integers(8, 22))
def test_rea_budget(f):
    assert param_count(ModelParams.init("REA", f, np.random.default_rng(0))) <= 2000


def test_vector_round_trip(rng):
    p = toy_params("EREA", 5, 4, rng)
    v = p.to_vector()
    assert np.array_equal(p.with_vector(v).to_vector(), v)
    assert v.size == param_count(p)


def test_pack_pads_ragged(rng):
    sets = [_set(rng, 3, 2, target_id=100), _set(rng, 3, 5, target_id=101)]
    b = pack(rng.normal(size=(2, 3)), sets, [1.0, 1.0])
    assert b.mask.sum(axis=1).tolist() == [2, 5]
    assert b.ids[0].tolist() == [1, 2, -1, -1, -1]
