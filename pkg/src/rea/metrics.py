"""Regression metrics in price space."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def abre(x, y):
    """Absolute balanced relative error |x - y| / min(x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(x <= 0) or np.any(y <= 0) or np.isnan(x).any() or np.isnan(y).any():
        raise ValueError("abre requires positive inputs")
    out = np.abs(x - y) / np.minimum(x, y)
    return float(out) if out.ndim == 0 else out


def median(values) -> float:
    """Median; even lengths average the two central order statistics."""
    a = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = a.size
    if n == 0:
        raise ValueError("median of empty input")
    mid = n // 2
    return float(a[mid]) if n % 2 else float((a[mid - 1] + a[mid]) / 2.0)


def _pair(preds, truths):
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def mdae(preds, truths) -> float:
    p, t = _pair(preds, truths)
    return median(np.abs(p - t))


def mdabre(preds, truths) -> float:
    p, t = _pair(preds, truths)
    return median(abre(p, t))


def ci95(values) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width (1.96 sd / sqrt(n), sample sd)."""
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no values")
    if a.size == 1:
        return float(a[0]), 0.0
    return float(a.mean()), float(1.96 * a.std(ddof=1) / math.sqrt(a.size))


@dataclass
class MetricsReport:
    mdae: float
    mdabre: float
    n: int
    config: dict = field(default_factory=dict)
    per_seed: list[dict] | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("MetricsReport needs at least one sample")

    @classmethod
    def from_predictions(cls, preds, truths, config=None, **kw) -> "MetricsReport":
        p, t = _pair(preds, truths)
        return cls(mdae(p, t), mdabre(p, t), int(p.size), dict(config or {}), **kw)

    def to_dict(self) -> dict:
        d = {"mdae": self.mdae, "mdabre": self.mdabre, "mdabre_pct": 100.0 * self.mdabre, "n": self.n,
             "config": self.config}
        if self.per_seed is not None:
            d["per_seed"] = self.per_seed
        if self.diagnostics:
            d["diagnostics"] = self.diagnostics
        return d
