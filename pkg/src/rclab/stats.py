"""Batch-means estimates with confidence intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as _st

MIN_BATCHES = 32


@dataclass(frozen=True)
class Estimate:
    """Point value with a 95% half-width.

    ``batches`` holds the batch means (and ``weights`` their sample
    counts) so that estimates from independent replicas pool exactly.
    ``status`` is ``ok``, ``ci_withheld`` (fewer than 32 batches) or a
    failure label; ``half_width`` is NaN whenever no interval is reported.
    """

    value: float
    half_width: float
    n: int
    n_batches: int
    method: str = "batch_means"
    status: str = "ok"
    batches: tuple = field(default=(), repr=False)
    weights: tuple = field(default=(), repr=False)

    @property
    def lo(self) -> float:
        return self.value - self.half_width

    @property
    def hi(self) -> float:
        return self.value + self.half_width

    @property
    def se(self) -> float:
        return self.half_width / _tcrit(self.n_batches) if self.n_batches > 1 else math.nan

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    def as_dict(self) -> dict:
        return {"value": self.value, "half_width": self.half_width, "n": self.n,
                "n_batches": self.n_batches, "method": self.method, "status": self.status}


def _tcrit(b: int) -> float:
    return float(_st.t.ppf(0.975, b - 1)) if b > 1 else math.inf


def from_batches(means, weights, method: str = "batch_means", min_batches: int = MIN_BATCHES) -> Estimate:
    means = np.asarray(means, dtype=float)
    weights = np.asarray(weights, dtype=float)
    n = int(weights.sum())
    b = means.size
    if b == 0 or n == 0:
        return Estimate(math.nan, math.nan, 0, 0, method, "no_samples")
    value = float(np.dot(means, weights) / weights.sum())
    if b < 2:
        half = math.nan
    else:
        # weighted batch variance; equal weights reduce to the usual formula
        w = weights / weights.sum()
        var = float(np.dot(w, (means - value) ** 2)) * b / (b - 1)
        half = _tcrit(b) * math.sqrt(var / b)
    status = "ok" if b >= min_batches else "ci_withheld"
    if status != "ok":
        half = math.nan
    return Estimate(value, half, n, b, method, status, tuple(means.tolist()), tuple(weights.tolist()))


def batch_means(x, n_batches: int = MIN_BATCHES, method: str = "batch_means") -> Estimate:
    """Split the series ``x`` into ``n_batches`` contiguous batches (remainder dropped)."""
    x = np.asarray(x, dtype=float)
    b = min(n_batches, x.size)
    if b == 0:
        return Estimate(math.nan, math.nan, 0, 0, method, "no_samples")
    size = x.size // b
    means = x[: b * size].reshape(b, size).mean(axis=1)
    return from_batches(means, np.full(b, size), method)


def pool(estimates, method: str | None = None) -> Estimate:
    """Merge replica estimates by concatenating their batches in the given order."""
    estimates = list(estimates)
    if not estimates:
        raise ValueError("nothing to pool")
    means = np.concatenate([np.asarray(e.batches, dtype=float) for e in estimates])
    weights = np.concatenate([np.asarray(e.weights, dtype=float) for e in estimates])
    return from_batches(means, weights, method or estimates[0].method)


def exact(value: float, n: int = 0, method: str = "exact") -> Estimate:
    return Estimate(float(value), 0.0, n, 0, method, "ok")


def failure(status: str, method: str, n: int = 0) -> Estimate:
    return Estimate(math.nan, math.nan, n, 0, method, status)


def with_method(e: Estimate, method: str) -> Estimate:
    return replace(e, method=method)


def strict(o):
    """Strict JSON: NaN becomes null, infinities become strings."""
    if isinstance(o, float) or isinstance(o, np.floating):
        o = float(o)
        if math.isnan(o):
            return None
        if math.isinf(o):
            return "inf" if o > 0 else "-inf"
        return o
    if isinstance(o, dict):
        return {k: strict(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [strict(v) for v in o]
    return o
