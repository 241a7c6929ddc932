"""Transaction datasets: CSV ingestion, targets, scaling, splits and a synthetic generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPOCH_ORDINAL = date(1970, 1, 1).toordinal()
DAYS_PER_YEAR = 365.25
STD_FLOOR = 1e-8


class DataError(ValueError):
    """Invalid input data (bad rows, bad schema, impossible split)."""


class SchemaError(DataError):
    pass


class RowError(DataError):
    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        shown = "; ".join(f"row {i}: {msg}" for i, msg in errors[:20])
        more = f" (+{len(errors) - 20} more)" if len(errors) > 20 else ""
        super().__init__(f"{len(errors)} invalid row(s): {shown}{more}")


def parse_date(text: str) -> int:
    return date.fromisoformat(text.strip()).toordinal() - EPOCH_ORDINAL


def format_date(days: int) -> str:
    return date.fromordinal(int(days) + EPOCH_ORDINAL).isoformat()


@dataclass(frozen=True)
class PropertyRecord:
    id: int
    lat: float
    lon: float
    date: int | None
    price: float
    surface: float | None
    features: tuple[float, ...]


class Dataset:
    """Columnar, read-only view of a list of transactions.

    Missing dates and surfaces are stored as NaN.
    """

    def __init__(self, ids, lat, lon, dates, price, surface, features, feature_names=None):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.lat = np.asarray(lat, dtype=np.float64)
        self.lon = np.asarray(lon, dtype=np.float64)
        self.dates = np.asarray(dates, dtype=np.float64)
        self.price = np.asarray(price, dtype=np.float64)
        self.surface = np.asarray(surface, dtype=np.float64)
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(len(self.ids), -1)
        self.features = feats
        n = len(self.ids)
        if not all(len(a) == n for a in (self.lat, self.lon, self.dates, self.price, self.surface, self.features)):
            raise DataError("column lengths differ")
        if feature_names is None:
            feature_names = [f"f{j + 1}" for j in range(self.features.shape[1])]
        self.feature_names = list(feature_names)
        if len(self.feature_names) != self.features.shape[1]:
            raise DataError("feature_names length does not match feature dimension")
        if len(np.unique(self.ids)) != n:
            raise DataError("duplicate ids")
        for arr in (self.ids, self.lat, self.lon, self.dates, self.price, self.surface, self.features):
            arr.setflags(write=False)
        self._row = {int(i): r for r, i in enumerate(self.ids)}

    @classmethod
    def from_records(cls, records: Sequence[PropertyRecord], feature_names=None) -> "Dataset":
        n_feat = len(records[0].features) if records else len(feature_names or [])
        for r in records:
            _check_record(r, n_feat)
        return cls(
            ids=[r.id for r in records],
            lat=[r.lat for r in records],
            lon=[r.lon for r in records],
            dates=[np.nan if r.date is None else r.date for r in records],
            price=[r.price for r in records],
            surface=[np.nan if r.surface is None else r.surface for r in records],
            features=np.array([r.features for r in records], dtype=np.float64).reshape(len(records), n_feat),
            feature_names=feature_names,
        )

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, row: int) -> PropertyRecord:
        d = self.dates[row]
        s = self.surface[row]
        return PropertyRecord(
            id=int(self.ids[row]),
            lat=float(self.lat[row]),
            lon=float(self.lon[row]),
            date=None if np.isnan(d) else int(d),
            price=float(self.price[row]),
            surface=None if np.isnan(s) else float(s),
            features=tuple(float(x) for x in self.features[row]),
        )

    def __iter__(self):
        return (self[r] for r in range(len(self)))

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def has_dates(self) -> bool:
        return len(self) > 0 and not np.isnan(self.dates).any()

    @property
    def has_surface(self) -> bool:
        return len(self) > 0 and not np.isnan(self.surface).any()

    def row_of(self, record_id: int) -> int:
        try:
            return self._row[int(record_id)]
        except KeyError:
            raise KeyError(f"unknown id {record_id}") from None

    def rows_of(self, ids: Iterable[int]) -> np.ndarray:
        return np.array([self.row_of(i) for i in ids], dtype=np.int64)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            self.ids[rows], self.lat[rows], self.lon[rows], self.dates[rows], self.price[rows],
            self.surface[rows], self.features[rows], self.feature_names,
        )


def _check_record(r: PropertyRecord, n_feat: int) -> None:
    if not r.price > 0:
        raise DataError(f"record {r.id}: price must be positive")
    if r.surface is not None and not r.surface > 0:
        raise DataError(f"record {r.id}: surface must be positive")
    if not -90 <= r.lat <= 90 or not -180 <= r.lon <= 180:
        raise DataError(f"record {r.id}: coordinates out of bounds")
    if len(r.features) != n_feat:
        raise DataError(f"record {r.id}: expected {n_feat} features")


# --------------------------------------------------------------------------- CSV


@dataclass
class CsvSchema:
    """Column mapping. ``features=None`` takes every unmapped column, in file order."""

    id: str = "id"
    lat: str = "lat"
    lon: str = "lon"
    price: str = "price"
    date: str | None = None
    surface: str | None = None
    features: list[str] | None = None

    @classmethod
    def infer(cls, header: Sequence[str]) -> "CsvSchema":
        return cls(
            date="date" if "date" in header else None,
            surface="surface" if "surface" in header else None,
        )

    def feature_columns(self, header: Sequence[str]) -> list[str]:
        if self.features is not None:
            return list(self.features)
        mapped = {self.id, self.lat, self.lon, self.price, self.date, self.surface}
        return [h for h in header if h not in mapped]


def load_csv(path, schema: CsvSchema | None = None, allow_missing_price: bool = False) -> Dataset:
    """Parse a transaction CSV. All row problems are collected and raised together."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        schema = schema or CsvSchema.infer(header)
        feat_cols = schema.feature_columns(header)
        required = [schema.id, schema.lat, schema.lon, schema.price]
        required += [c for c in (schema.date, schema.surface) if c]
        missing = [c for c in required + feat_cols if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        col = {h: j for j, h in enumerate(header)}

        ids, lat, lon, dates, price, surface, feats = [], [], [], [], [], [], []
        errors: list[tuple[int, str]] = []
        seen: set[int] = set()
        for i, row in enumerate(reader):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                rid = int(row[col[schema.id]])
                if rid in seen:
                    raise ValueError(f"duplicate id {rid}")
                la = float(row[col[schema.lat]])
                lo = float(row[col[schema.lon]])
                if not (-90 <= la <= 90 and -180 <= lo <= 180):
                    raise ValueError("lat/lon out of bounds")
                p_txt = row[col[schema.price]].strip()
                if allow_missing_price and not p_txt:
                    p = math.nan
                else:
                    p = float(p_txt)
                    if not p > 0:
                        raise ValueError(f"non-positive price {p_txt!r}")
                d = parse_date(row[col[schema.date]]) if schema.date else math.nan
                s = math.nan
                if schema.surface:
                    s = float(row[col[schema.surface]])
                    if not s > 0:
                        raise ValueError("non-positive surface")
                fv = [float(row[col[c]]) for c in feat_cols]
                if any(math.isnan(x) for x in fv):
                    raise ValueError("NaN feature")
            except (ValueError, TypeError) as exc:
                errors.append((i, str(exc)))
                continue
            seen.add(rid)
            ids.append(rid)
            lat.append(la)
            lon.append(lo)
            dates.append(d)
            price.append(p)
            surface.append(s)
            feats.append(fv)
    if errors:
        raise RowError(errors)
    return Dataset(ids, lat, lon, dates, price, surface,
                   np.array(feats, dtype=np.float64).reshape(len(ids), len(feat_cols)), feat_cols)


def write_csv(dataset: Dataset, path) -> None:
    header = ["id", "lat", "lon"]
    if dataset.has_dates:
        header.append("date")
    if dataset.has_surface:
        header.append("surface")
    header.append("price")
    header += dataset.feature_names
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(len(dataset)):
            row = [int(dataset.ids[r]), repr(float(dataset.lat[r])), repr(float(dataset.lon[r]))]
            if dataset.has_dates:
                row.append(format_date(int(dataset.dates[r])))
            if dataset.has_surface:
                row.append(repr(float(dataset.surface[r])))
            row.append(repr(float(dataset.price[r])))
            row += [repr(float(x)) for x in dataset.features[r]]
            w.writerow(row)


# ----------------------------------------------------------------------- targets


@dataclass(frozen=True)
class TargetTransform:
    kind: str = "log_price"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("log_price", "log_price_per_sqm"):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def value_units(self, price, surface=None):
        """Price, or price per square meter for the per-sqm kind."""
        price = np.asarray(price, dtype=np.float64)
        if self.kind == "log_price":
            return price
        if surface is None or np.isnan(np.asarray(surface, dtype=np.float64)).any():
            raise DataError("surface required for log_price_per_sqm target")
        return price / np.asarray(surface, dtype=np.float64)

    def forward(self, price, surface=None):
        return np.log(self.value_units(price, surface)) / self.scale

    def to_value_units(self, v):
        return np.exp(np.asarray(v, dtype=np.float64) * self.scale)

    def inverse(self, v, surface=None):
        """Back to transaction price."""
        out = self.to_value_units(v)
        if self.kind == "log_price_per_sqm":
            if surface is None:
                raise DataError("surface required to recover price")
            out = out * np.asarray(surface, dtype=np.float64)
        return out


def target_value(record: PropertyRecord, transform: TargetTransform) -> float:
    if not record.price > 0:
        raise DataError(f"record {record.id}: price must be positive")
    return float(transform.forward(record.price, record.surface))


def fit_target_transform(dataset: Dataset, train_ids, kind: str, normalize: bool) -> TargetTransform:
    """``normalize`` divides by the mean train log target, keeping values near 1 and positive."""
    if not normalize:
        return TargetTransform(kind, 1.0)
    rows = dataset.rows_of(train_ids)
    logs = TargetTransform(kind, 1.0).forward(dataset.price[rows], dataset.surface[rows])
    scale = float(np.mean(logs))
    if not scale > 0:
        raise DataError("mean train log target must be positive to normalize")
    return TargetTransform(kind, scale)


# ----------------------------------------------------------------------- scaling


@dataclass(frozen=True)
class ScalerParams:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def apply(self, features):
        return (np.asarray(features, dtype=np.float64) - np.array(self.mean)) / np.array(self.std)


def fit_scaler(features) -> ScalerParams:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("cannot fit scaler on an empty training set")
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return ScalerParams(tuple(float(m) for m in mean), tuple(float(s) for s in std))


def apply_scaler(params: ScalerParams, features):
    return params.apply(features)


# ------------------------------------------------------------------------ splits


@dataclass
class SplitSpec:
    mode: str
    offset_ids: list[int]
    train_ids: list[int]
    val_ids: list[int]
    test_ids: list[int]
    offset_years: float = 0.0

    def pool_ids(self) -> list[int]:
        """Retrieval pool shared by every phase: offset and train records."""
        return list(self.offset_ids) + list(self.train_ids)

    def partition(self, name: str) -> list[int]:
        try:
            return {"offset": self.offset_ids, "train": self.train_ids,
                    "val": self.val_ids, "test": self.test_ids}[name]
        except KeyError:
            raise ValueError(f"unknown partition {name!r}") from None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        d = json.loads(text)
        return cls(mode=d["mode"], offset_ids=[int(i) for i in d["offset_ids"]],
                   train_ids=[int(i) for i in d["train_ids"]], val_ids=[int(i) for i in d["val_ids"]],
                   test_ids=[int(i) for i in d["test_ids"]], offset_years=float(d.get("offset_years", 0.0)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _check_fracs(train_frac: float, val_frac: float) -> None:
    if not (0 < train_frac and val_frac >= 0 and train_frac + val_frac < 1 + 1e-12):
        raise DataError(f"invalid split fractions train={train_frac} val={val_frac}")


def _cut(n: int, train_frac: float, val_frac: float) -> tuple[int, int]:
    n_train = min(n, int(round(train_frac * n)))
    n_val = min(n - n_train, int(round(val_frac * n)))
    return n_train, n_val


def temporal_split(dataset: Dataset, offset_years: float = 3.0, train_frac: float = 0.8,
                   val_frac: float = 0.1) -> SplitSpec:
    """Chronological split; the first ``offset_years`` are kept as a retrieval-only pool.

    Records are ordered by (date, id), so same-day ties across a boundary go to the
    lower id first.
    """
    _check_fracs(train_frac, val_frac)
    if offset_years < 0:
        raise DataError("offset_years must be >= 0")
    if not dataset.has_dates:
        raise DataError("temporal split requires a date on every record")
    order = np.lexsort((dataset.ids, dataset.dates))
    ids = dataset.ids[order]
    dates = dataset.dates[order]
    cutoff = dates[0] + offset_years * DAYS_PER_YEAR if len(ids) else 0.0
    n_off = int(np.searchsorted(dates, cutoff, side="left")) if offset_years > 0 else 0
    rest = ids[n_off:]
    if len(rest) == 0:
        raise DataError("offset consumes every record; training set would be empty")
    n_train, n_val = _cut(len(rest), train_frac, val_frac)
    if n_train == 0:
        raise DataError("training set would be empty")
    as_list = lambda a: [int(i) for i in a]
    return SplitSpec("temporal", as_list(ids[:n_off]), as_list(rest[:n_train]),
                     as_list(rest[n_train:n_train + n_val]), as_list(rest[n_train + n_val:]),
                     float(offset_years))


def random_split(dataset: Dataset, seed: int = 0, train_frac: float = 0.8, val_frac: float = 0.1) -> SplitSpec:
    _check_fracs(train_frac, val_frac)
    ids = np.sort(dataset.ids)
    perm = ids[np.random.default_rng(seed).permutation(len(ids))]
    n_train, n_val = _cut(len(ids), train_frac, val_frac)
    if n_train == 0:
        raise DataError("training set would be empty")
    as_list = lambda a: [int(i) for i in a]
    return SplitSpec("random", [], as_list(perm[:n_train]), as_list(perm[n_train:n_train + n_val]),
                     as_list(perm[n_train + n_val:]), 0.0)


# --------------------------------------------------------------------- synthetic


@dataclass
class SynthConfig:
    n: int = 5000
    n_features: int = 8
    lat_min: float = 48.0
    lat_max: float = 48.2
    lon_min: float = -1.8
    lon_max: float = -1.5
    start_date: str = "2016-01-01"
    end_date: str = "2023-06-30"
    intercept: float = 12.5
    spatial_amplitude: float = 0.3
    n_bumps: int = 6
    bump_width_km: tuple[float, float] = (2.0, 6.0)
    hedonic_scale: float = 0.5
    noise: float = 0.05
    with_surface: bool = False
    seed: int = 0


_KM_PER_DEG_LAT = 111.195


def spatial_field(latents: dict, lat, lon):
    """Log-price contribution of location, from stored generator latents."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    out = np.zeros(np.broadcast(lat, lon).shape)
    for b in latents["bumps"]:
        dy = (lat - b["lat"]) * _KM_PER_DEG_LAT
        dx = (lon - b["lon"]) * _KM_PER_DEG_LAT * math.cos(math.radians(b["lat"]))
        out = out + b["amplitude"] * np.exp(-(dx * dx + dy * dy) / (2.0 * b["width_km"] ** 2))
    return out


def generate_synthetic(config: SynthConfig | None = None) -> tuple[Dataset, dict]:
    """Draw a dataset with log price = intercept + spatial bumps + linear hedonic term + noise.

    Returns the dataset and the latent coefficients used to build it.
    """
    cfg = config or SynthConfig()
    if cfg.n < 1:
        raise DataError("n must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    n, f = cfg.n, cfg.n_features
    lat = rng.uniform(cfg.lat_min, cfg.lat_max, n)
    lon = rng.uniform(cfg.lon_min, cfg.lon_max, n)
    feats = rng.standard_normal((n, f))
    coef = rng.standard_normal(f)
    norm = np.linalg.norm(coef)
    coef = coef * (cfg.hedonic_scale / norm) if norm > 0 else coef * 0.0
    bumps = [
        {
            "lat": float(rng.uniform(cfg.lat_min, cfg.lat_max)),
            "lon": float(rng.uniform(cfg.lon_min, cfg.lon_max)),
            "amplitude": float(rng.normal(0.0, cfg.spatial_amplitude)),
            "width_km": float(rng.uniform(*cfg.bump_width_km)),
        }
        for _ in range(cfg.n_bumps)
    ]
    eps = rng.normal(0.0, 1.0, n) * cfg.noise
    start, end = parse_date(cfg.start_date), parse_date(cfg.end_date)
    dates = start + np.floor(np.arange(n) * ((end - start + 1) / n))
    latents = {
        "intercept": cfg.intercept,
        "coefficients": [float(c) for c in coef],
        "bumps": bumps,
        "noise": cfg.noise,
        "feature_distribution": "standard_normal",
        "target": "log_price_per_sqm" if cfg.with_surface else "log_price",
        "config": asdict(cfg),
    }
    log_value = cfg.intercept + spatial_field(latents, lat, lon) + feats @ coef + eps
    if cfg.with_surface:
        surface = np.round(rng.uniform(20.0, 200.0, n), 1)
        price = np.exp(log_value) * surface
    else:
        surface = np.full(n, np.nan)
        price = np.exp(log_value)
    ds = Dataset(np.arange(n), lat, lon, dates, price, surface, feats)
    return ds, latents


def write_latents(latents: dict, path) -> None:
    Path(path).write_text(json.dumps(latents, indent=1, sort_keys=True) + "\n", encoding="utf-8")
