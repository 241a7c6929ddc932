import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rea.metrics import MetricsReport, abre, ci95, mdabre, mdae, median

PREDS = [100.0, 200.0, 150.0, 80.0, 120.0, 300.0, 50.0]
TRUTHS = [110.0, 180.0, 150.0, 100.0, 100.0, 330.0, 40.0]


def test_fixture_hand_values():
    # abs errors 10 20 0 20 20 30 10 -> sorted 0 10 10 20 20 20 30
    assert mdae(PREDS, TRUTHS) == 20.0
    # ABRE: .1, 1/9, 0, .25, .2, .1, .25 -> median 1/9
    assert abs(mdabre(PREDS, TRUTHS) - 1 / 9) <= 1e-12


def test_abre_examples():
    assert abre(100, 110) == pytest.approx(0.1)
    assert abre(110, 100) == pytest.approx(0.1)
    assert abre(5.0, 5.0) == 0.0


def test_abre_rejects_nonpositive():
    for bad in (0.0, -1.0, float("nan")):
        with pytest.raises(ValueError):
            abre(bad, 1.0)


def test_abre_symmetry_bulk(rng):
    x = np.exp(rng.uniform(-10, 15, 10_000))
    y = np.exp(rng.uniform(-10, 15, 10_000))
    assert np.array_equal(abre(x, y), abre(y, x))


@settings(max_examples=300)
@given(st.floats(1e-6, 1e9), st.floats(1e-6, 1e9))
def test_abre_symmetric_and_nonnegative(x, y):
    a = abre(x, y)
    assert a == abre(y, x) and a >= 0


def test_median_even_and_odd():
    assert median([3.0, 1.0, 2.0]) == 2.0
    assert median([4.0, 1.0, 3.0, 2.0]) == 2.5
    with pytest.raises(ValueError):
        median([])


def test_length_mismatch():
    with pytest.raises(ValueError):
        mdae([1.0], [1.0, 2.0])


def test_ci95_by_hand():
    mean, half = ci95([1.0, 2.0, 3.0, 4.0, 5.0])
    assert mean == 3.0
    assert half == pytest.approx(1.96 * np.sqrt(2.5) / np.sqrt(5), rel=1e-14)
    assert ci95([7.0]) == (7.0, 0.0)


def test_report_dict():
    rep = MetricsReport.from_predictions(PREDS, TRUTHS, {"model": "x"})
    d = rep.to_dict()
    assert d["n"] == 7 and d["mdabre_pct"] == pytest.approx(100 / 9)
    assert d["config"] == {"model": "x"}
