import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rea.data import (
    CsvSchema,
    DataError,
    Dataset,
    PropertyRecord,
    RowError,
    SchemaError,
    SplitSpec,
    SynthConfig,
    TargetTransform,
    apply_scaler,
    fit_scaler,
    fit_target_transform,
    format_date,
    generate_synthetic,
    load_csv,
    parse_date,
    random_split,
    spatial_field,
    target_value,
    temporal_split,
    write_csv,
)

from .conftest import make_dataset


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# ------------------------------------------------------------------ CSV


def test_iv_shaped_csv_has_22_features(tmp_path):
    feats = [f"a{j}" for j in range(22)]
    lines = ["id,lat,lon,date,surface,price," + ",".join(feats)]
    for i in range(5):
        lines.append(f"{i},48.1,-1.6,2020-01-0{i + 1},50,200000," + ",".join(str(j * 0.5) for j in range(22)))
    ds = load_csv(_write(tmp_path, "\n".join(lines) + "\n"))
    assert ds.n_features == 22
    assert ds.feature_names == feats
    assert ds.has_dates and ds.has_surface


def test_header_only_is_empty(tmp_path):
    ds = load_csv(_write(tmp_path, "id,lat,lon,price,f1\n"))
    assert len(ds) == 0
    assert ds.n_features == 1


def test_zero_price_is_row_error(tmp_path):
    text = "id,lat,lon,price,f1\n1,48,-1,100,0.5\n2,48,-1,0,0.5\n3,48,-1,5,nan\n"
    with pytest.raises(RowError) as exc:
        load_csv(_write(tmp_path, text))
    rows = [i for i, _ in exc.value.errors]
    assert rows == [1, 2]
    assert "price" in exc.value.errors[0][1]
    assert "NaN" in exc.value.errors[1][1]


def test_missing_column_is_schema_error(tmp_path):
    with pytest.raises(SchemaError, match="missing column"):
        load_csv(_write(tmp_path, "id,lat,price,f1\n1,48,100,0.5\n"))


def test_custom_schema_order(tmp_path):
    text = "key,y,x,amount,b,a\n5,48.1,-1.6,1000,2,1\n"
    schema = CsvSchema(id="key", lat="y", lon="x", price="amount", features=["a", "b"])
    ds = load_csv(_write(tmp_path, text), schema)
    assert ds[0].features == (1.0, 2.0)
    assert ds[0].id == 5


def test_csv_round_trip(tmp_path):
    ds, _ = generate_synthetic(SynthConfig(n=50, seed=2, with_surface=True))
    p = tmp_path / "s.csv"
    write_csv(ds, p)
    back = load_csv(p)
    assert np.array_equal(back.price, ds.price)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.dates, ds.dates)
    assert np.array_equal(back.surface, ds.surface)


def test_date_helpers():
    assert parse_date("1970-01-02") == 1
    assert format_date(parse_date("2016-01-01")) == "2016-01-01"


# -------------------------------------------------------------- targets


def test_log_price_identity():
    r = PropertyRecord(1, 0, 0, None, math.exp(2.0), None, ())
    assert target_value(r, TargetTransform("log_price", 1.0)) == pytest.approx(2.0, abs=1e-15)


def test_log_price_per_sqm():
    r = PropertyRecord(1, 0, 0, None, 200_000.0, 100.0, ())
    assert target_value(r, TargetTransform("log_price_per_sqm", 1.0)) == pytest.approx(math.log(2000.0), abs=1e-15)


def test_per_sqm_requires_surface():
    r = PropertyRecord(1, 0, 0, None, 200_000.0, None, ())
    with pytest.raises(DataError):
        target_value(r, TargetTransform("log_price_per_sqm", 1.0))


def test_normalized_scale_matches_hand_computation():
    prices = [150_000.0, 220_000.0, 310_000.0, 95_000.0, 480_000.0]
    recs = [PropertyRecord(i, 48.0, -1.0, None, p, None, (0.0,)) for i, p in enumerate(prices)]
    ds = Dataset.from_records(recs)
    tr = fit_target_transform(ds, [0, 1, 2, 3, 4], "log_price", normalize=True)
    # spreadsheet-style: mean of natural logs, then divide
    logs = [math.log(p) for p in prices]
    scale = sum(logs) / 5
    assert tr.scale == pytest.approx(scale, rel=1e-14)
    for r, lp in zip(recs, logs):
        assert target_value(r, tr) == pytest.approx(lp / scale, rel=1e-14)


def test_round_trip_1000_records(rng):
    price = np.exp(rng.uniform(8, 15, 1000))
    surface = rng.uniform(10, 300, 1000)
    for tr in (TargetTransform("log_price", 1.0), TargetTransform("log_price", 12.7),
               TargetTransform("log_price_per_sqm", 7.9)):
        v = tr.forward(price, surface)
        back = tr.inverse(v, surface)
        assert np.max(np.abs(back - price) / price) < 1e-9


def test_transform_rejects_bad_scale():
    with pytest.raises(ValueError):
        TargetTransform("log_price", 0.0)


# -------------------------------------------------------------- scaling


def test_constant_feature_scales_to_zero():
    x = np.column_stack([np.full(10, 3.3), np.arange(10.0)])
    out = apply_scaler(fit_scaler(x), x)
    assert np.all(out[:, 0] == 0.0)


def test_two_point_symmetric():
    x = np.array([[0.0], [2.0]])
    assert apply_scaler(fit_scaler(x), x).ravel().tolist() == [-1.0, 1.0]


def test_scaler_moments_vs_brute_force(rng):
    x = rng.normal(3, 2, size=(50, 4)) * np.array([1, 10, 0.1, 5])
    params = fit_scaler(x)
    for j in range(4):
        col = [float(v) for v in x[:, j]]
        assert params.mean[j] == pytest.approx(statistics.fmean(col), rel=1e-12)
        assert params.std[j] == pytest.approx(statistics.pstdev(col), rel=1e-12)
    out = apply_scaler(params, x)
    assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
    assert np.allclose(out.std(axis=0), 1.0, atol=1e-9)


def test_scaler_empty_train():
    with pytest.raises(DataError):
        fit_scaler(np.empty((0, 3)))


def test_scaler_ignores_val_test_perturbation():
    ds = make_dataset(100)
    split = random_split(ds, 0, 0.6, 0.2)
    rows = ds.rows_of(split.train_ids)
    p1 = fit_scaler(ds.features[rows])
    feats = ds.features.copy()
    feats[ds.rows_of(split.test_ids + split.val_ids)] += 1000.0
    ds2 = Dataset(ds.ids, ds.lat, ds.lon, ds.dates, ds.price, ds.surface, feats)
    assert fit_scaler(ds2.features[ds2.rows_of(split.train_ids)]) == p1


# --------------------------------------------------------------- splits


def _ten_records():
    dates = [100, 50, 50, 300, 120, 120, 400, 1300, 1300, 1500]
    ids = [9, 4, 2, 7, 5, 1, 3, 8, 6, 0]
    return Dataset(ids, [48.0] * 10, [-1.0] * 10, dates, [1.0] * 10, [np.nan] * 10, np.zeros((10, 1)))


def test_temporal_split_ten_records_brute_force():
    ds = _ten_records()
    # offset of 1 year from day 50 -> cutoff 415.25
    split = temporal_split(ds, offset_years=1.0, train_frac=0.5, val_frac=0.25)
    rec = sorted(zip(ds.dates.tolist(), ds.ids.tolist()))
    offset = [i for d, i in rec if d < 50 + 365.25]
    rest = [i for d, i in rec if d >= 50 + 365.25]
    assert split.offset_ids == offset == [2, 4, 9, 1, 5, 7, 3]
    assert rest == [6, 8, 0]
    n_train, n_val = round(0.5 * 3), round(0.25 * 3)
    assert split.train_ids == rest[:n_train]
    assert split.val_ids == rest[n_train:n_train + n_val]
    assert split.test_ids == rest[n_train + n_val:]


def test_temporal_split_seven_year_span():
    ds, _ = generate_synthetic(SynthConfig(n=2000, start_date="2016-01-01", end_date="2023-06-30"))
    split = temporal_split(ds, 3.0)
    off = ds.dates[ds.rows_of(split.offset_ids)]
    tr = ds.dates[ds.rows_of(split.train_ids)]
    assert format_date(off.max()) < "2019-01-01" <= format_date(tr.min())
    assert format_date(off.max()) >= "2018-12-01"


def test_temporal_split_degenerate_fracs():
    ds = make_dataset(200)
    split = temporal_split(ds, 0.0, 1 - 1e-9, 0.0)
    assert split.offset_ids == []
    assert len(split.train_ids) == 200


def test_temporal_split_errors():
    with pytest.raises(DataError, match="date"):
        temporal_split(make_dataset(20, dated=False))
    with pytest.raises(DataError, match="empty"):
        temporal_split(make_dataset(20), offset_years=100.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 4.0), st.floats(0.1, 0.8), st.floats(0.0, 0.15))
def test_temporal_split_invariants(seed, offset, tf, vf):
    rng = np.random.default_rng(seed)
    n = 80
    dates = rng.integers(0, 3000, n).astype(float)
    ds = Dataset(rng.permutation(n), np.zeros(n), np.zeros(n), dates, np.ones(n), np.full(n, np.nan),
                 np.zeros((n, 1)))
    try:
        split = temporal_split(ds, offset, tf, vf)
    except DataError:
        return
    parts = [split.offset_ids, split.train_ids, split.val_ids, split.test_ids]
    allids = [i for p in parts for i in p]
    assert sorted(allids) == sorted(ds.ids.tolist())
    assert len(set(allids)) == n
    key = lambda i: (ds.dates[ds.row_of(i)], i)
    for a, b in zip(parts[1:], parts[2:]):
        if a and b:
            assert max(map(key, a)) < min(map(key, b))
    if split.offset_ids and split.train_ids:
        d = lambda ids: ds.dates[ds.rows_of(ids)]
        assert d(split.offset_ids).max() < d(split.train_ids).min()
    early = split.offset_ids + split.train_ids
    if early and split.val_ids:
        assert ds.dates[ds.rows_of(early)].max() <= ds.dates[ds.rows_of(split.val_ids)].min()


def test_random_split_sizes_and_determinism():
    ds = make_dataset(100)
    a = random_split(ds, 7, 0.8, 0.1)
    assert (len(a.train_ids), len(a.val_ids), len(a.test_ids)) == (80, 10, 10)
    assert a.offset_ids == []
    assert a == random_split(ds, 7, 0.8, 0.1)


def test_random_split_seeds_differ():
    ds = make_dataset(100)
    perms = {tuple(random_split(ds, s).train_ids) for s in range(20)}
    assert len(perms) == 20


def test_split_json_round_trip(tmp_path):
    s = temporal_split(make_dataset(60), 1.0)
    s.save(tmp_path / "s.json")
    assert SplitSpec.load(tmp_path / "s.json") == s


def test_bad_fractions():
    with pytest.raises(DataError):
        random_split(make_dataset(10), 0, 0.9, 0.3)


# ------------------------------------------------------------ synthetic


def test_synthetic_location_only():
    ds, lat = generate_synthetic(SynthConfig(n=400, noise=0.0, hedonic_scale=0.0, seed=4))
    logp = np.log(ds.price)
    field = lat["intercept"] + spatial_field(lat, ds.lat, ds.lon)
    assert np.allclose(logp, field, atol=1e-12)


def test_synthetic_features_only():
    ds, lat = generate_synthetic(SynthConfig(n=400, noise=0.0, spatial_amplitude=0.0, seed=4))
    logp = np.log(ds.price)
    assert np.allclose(logp, lat["intercept"] + ds.features @ np.array(lat["coefficients"]), atol=1e-12)


def test_synthetic_variance_decomposition():
    ds, lat = generate_synthetic(SynthConfig(n=5000, seed=11))
    logp = np.log(ds.price)
    coef = np.array(lat["coefficients"])
    spatial = spatial_field(lat, ds.lat, ds.lon)
    hed = ds.features @ coef
    # generator-level variances: features are iid N(0,1), noise N(0, sd^2)
    expected_hed = float(coef @ coef)
    expected_total = spatial.var() + expected_hed + lat["noise"] ** 2
    assert hed.var() == pytest.approx(expected_hed, rel=0.10)
    assert logp.var() == pytest.approx(expected_total, rel=0.10)
    resid = logp - lat["intercept"] - spatial - hed
    assert resid.std() == pytest.approx(lat["noise"], rel=0.10)


def test_synthetic_is_seeded():
    a, _ = generate_synthetic(SynthConfig(n=30, seed=5))
    b, _ = generate_synthetic(SynthConfig(n=30, seed=5))
    assert np.array_equal(a.price, b.price) and np.array_equal(a.lat, b.lat)


def test_synthetic_dates_sequential():
    ds, _ = generate_synthetic(SynthConfig(n=100))
    assert np.all(np.diff(ds.dates) >= 0)
