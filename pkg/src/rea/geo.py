"""Exact haversine k-nearest-neighbour retrieval with temporal and identity filters."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_M = 6_371_000.0


def pool_size(k1: int) -> int:
    """Size of the geographic candidate pool the vector retriever re-ranks."""
    if k1 < 0:
        raise ValueError("k1 must be >= 0")
    return 3 * k1 + 25


def haversine(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters on a sphere of radius ``EARTH_RADIUS_M``."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi * 0.5) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb * 0.5) ** 2
    c = 2.0 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return EARTH_RADIUS_M * c


@dataclass(frozen=True)
class RetrievalFilter:
    exclude_id: int | None = None
    max_date: float | None = None  # exclusive
    pool_ids: frozenset | None = None

    def admits(self, record_id: int, record_date: float | None) -> bool:
        if self.exclude_id is not None and record_id == self.exclude_id:
            return False
        if self.max_date is not None:
            if record_date is None or np.isnan(record_date) or not record_date < self.max_date:
                return False
        if self.pool_ids is not None and record_id not in self.pool_ids:
            return False
        return True


class GeoIndex:
    """Records sorted by latitude; queries grow a latitude band until the k-th hit is provably final.

    Any point outside a band of half-width ``h`` radians is at least ``R * h`` away, so once
    the k-th admissible distance inside the band is below that bound the answer is exact.
    """

    def __init__(self, ids, lat, lon, dates=None):
        ids = np.asarray(ids, dtype=np.int64)
        if len(np.unique(ids)) != len(ids):
            raise ValueError("GeoIndex ids must be unique")
        lat = np.asarray(lat, dtype=np.float64)
        order = np.lexsort((ids, lat))
        self.ids = ids[order]
        self.lat = lat[order]
        self.lon = np.asarray(lon, dtype=np.float64)[order]
        self.dates = (np.full(len(ids), np.nan) if dates is None
                      else np.asarray(dates, dtype=np.float64)[order])
        self._lat_rad = np.radians(self.lat)
        self._lat_span = float(self._lat_rad[-1] - self._lat_rad[0]) if len(ids) else 0.0
        self._pos = {int(i): p for p, i in enumerate(self.ids)}

    @classmethod
    def from_dataset(cls, dataset, rows=None) -> "GeoIndex":
        if rows is None:
            return cls(dataset.ids, dataset.lat, dataset.lon, dataset.dates)
        return cls(dataset.ids[rows], dataset.lat[rows], dataset.lon[rows], dataset.dates[rows])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, record_id) -> bool:
        return int(record_id) in self._pos

    def _admissible(self, sl: slice, flt: RetrievalFilter | None) -> np.ndarray:
        ok = np.ones(sl.stop - sl.start, dtype=bool)
        if flt is None:
            return ok
        ids = self.ids[sl]
        if flt.exclude_id is not None:
            ok &= ids != flt.exclude_id
        if flt.max_date is not None:
            ok &= self.dates[sl] < flt.max_date  # NaN dates compare False
        if flt.pool_ids is not None:
            ok &= np.fromiter((int(i) in flt.pool_ids for i in ids), dtype=bool, count=len(ids))
        return ok

    def query(self, lat: float, lon: float, k: int, flt: RetrievalFilter | None = None):
        """Return (ids, distances_m) of the k nearest admissible records, ordered by (distance, id)."""
        if k < 0:
            raise ValueError("k must be >= 0")
        n = len(self.ids)
        if k == 0 or n == 0:
            return np.empty(0, dtype=np.int64), np.empty(0)
        q = math.radians(lat)
        # band expected to hold a few times k records if latitudes were uniform
        half = self._lat_span * min(1.0, 2.0 * (k + 8) / n) if self._lat_span > 0 else math.pi
        half = max(half, 1e-9)
        while True:
            full = half >= math.pi
            if full:
                sl = slice(0, n)
            else:
                lo = int(np.searchsorted(self._lat_rad, q - half, side="left"))
                hi = int(np.searchsorted(self._lat_rad, q + half, side="right"))
                sl = slice(lo, hi)
            ok = self._admissible(sl, flt)
            idx = np.flatnonzero(ok) + sl.start
            if len(idx) >= k or full:
                d = haversine(lat, lon, self.lat[idx], self.lon[idx])
                order = np.lexsort((self.ids[idx], d))[:k]
                if full or d[order[-1]] < EARTH_RADIUS_M * half * (1.0 - 1e-9):
                    return self.ids[idx][order], d[order]
            half *= 2.0


def knn_geo(index: GeoIndex, target, k: int, flt: RetrievalFilter | None = None):
    """k nearest admissible records to ``target`` (anything with ``lat``/``lon``) as (id, meters) pairs."""
    ids, dist = index.query(target.lat, target.lon, k, flt)
    return [(int(i), float(d)) for i, d in zip(ids, dist)]


def candidate_pool(index: GeoIndex, target, k1: int, flt: RetrievalFilter | None = None) -> list[int]:
    ids, _ = index.query(target.lat, target.lon, pool_size(k1), flt)
    return [int(i) for i in ids]


def target_filter(record, pool_ids=None, temporal: bool = True) -> RetrievalFilter:
    """No self-retrieval; strictly earlier comparables when the record is dated."""
    max_date = None
    if temporal and record.date is not None:
        max_date = float(record.date)
    return RetrievalFilter(exclude_id=record.id, max_date=max_date,
                           pool_ids=None if pool_ids is None else frozenset(pool_ids))
