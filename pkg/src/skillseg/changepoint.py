"""Penalized change-point detection with an RBF kernel cost.

``pelt`` is the pruned exact dynamic program; ``brute_force_segment``
enumerates every admissible segmentation and exists as a test oracle.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, UsageError

MEDIAN = "median"
BANDWIDTH_FLOOR = 1e-6
_PRUNE_MARGIN = 1e-9


@dataclass
class PeltConfig:
    penalty: Union[float, str] = "bic"  # "bic" -> 3 log T
    min_size: int = 10
    bandwidth: Union[float, str] = MEDIAN

    def __post_init__(self):
        if isinstance(self.penalty, str):
            if self.penalty != "bic":
                raise ConfigurationError(f"unknown penalty rule {self.penalty!r}")
        elif not self.penalty > 0:
            raise ConfigurationError("penalty must be > 0")
        if int(self.min_size) < 1:
            raise ConfigurationError("min_size must be >= 1")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != MEDIAN:
                raise ConfigurationError(f"unknown bandwidth rule {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise ConfigurationError("bandwidth must be > 0")

    def resolve_penalty(self, n: int) -> float:
        if self.penalty == "bic":
            return 3.0 * np.log(max(n, 2))
        return float(self.penalty)


def as_series(series) -> np.ndarray:
    y = np.asarray(series, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or len(y) < 1:
        raise UsageError(f"series must be T x d with T >= 1, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise UsageError("series contains non-finite values")
    return y


def median_bandwidth(series, max_points: int = 512) -> float:
    """Median pairwise distance over an evenly spaced subsample."""
    y = as_series(series)
    if len(y) > max_points:
        y = y[np.linspace(0, len(y) - 1, max_points).round().astype(int)]
    if len(y) < 2:
        return 1.0
    d = np.sqrt(((y[:, None, :] - y[None, :, :]) ** 2).sum(-1))
    iu = np.triu_indices(len(y), 1)
    return max(float(np.median(d[iu])), BANDWIDTH_FLOOR)


def resolve_bandwidth(series, bandwidth) -> float:
    if isinstance(bandwidth, str):
        if bandwidth != MEDIAN:
            raise ConfigurationError(f"unknown bandwidth rule {bandwidth!r}")
        return median_bandwidth(series)
    if not bandwidth > 0:
        raise ConfigurationError("bandwidth must be > 0")
    return float(bandwidth)


class RbfCost:
    """Segment cost ``n - (1/n) sum_{s,t} exp(-|y_s - y_t|^2 / 2h^2)`` in O(1) per query."""

    def __init__(self, series, bandwidth):
        y = as_series(series)
        h = resolve_bandwidth(y, bandwidth)
        self.bandwidth = h
        sq = ((y[:, None, :] - y[None, :, :]) ** 2).sum(-1)
        k = np.exp(-sq / (2.0 * h * h))
        n = len(y)
        self._prefix = np.zeros((n + 1, n + 1))
        self._prefix[1:, 1:] = k.cumsum(0).cumsum(1)
        self.n = n

    def __call__(self, a: int, b: int) -> float:
        if not 0 <= a < b <= self.n:
            raise UsageError(f"invalid segment [{a}, {b}) for series of length {self.n}")
        p = self._prefix
        block = p[b, b] - p[a, b] - p[b, a] + p[a, a]
        return max((b - a) - block / (b - a), 0.0)

    def matrix(self) -> np.ndarray:
        """``C[a, b]`` for all ``0 <= a < b <= n`` (``inf`` elsewhere)."""
        n, p = self.n, self._prefix
        a = np.arange(n + 1)[:, None]
        b = np.arange(n + 1)[None, :]
        length = np.where(b > a, b - a, 1)
        block = p[b, b] - p[a, b] - p[b, a] + p[a, a]
        c = np.maximum(length - block / length, 0.0)
        return np.where(b > a, c, np.inf)


def rbf_cost(series, a: int, b: int, bandwidth) -> float:
    return RbfCost(series, bandwidth)(a, b)


def segmentation_objective(cost, breakpoints, n: int, penalty: float) -> float:
    bounds = [0] + list(breakpoints) + [n]
    return sum(cost(s, e) for s, e in zip(bounds, bounds[1:])) + penalty * len(breakpoints)


def pelt(series, config: PeltConfig | None = None, cost: RbfCost | None = None) -> list:
    """Exact minimizer of ``sum(segment cost) + penalty * #change points``.

    Returns ascending change-point indices (segment starts, excluding 0).
    Candidates are pruned by the usual inequality; a pruned candidate
    stays available for ends closer than ``min_size`` to the pruning time,
    which keeps the result exact under the minimum-length constraint.
    """
    config = config or PeltConfig()
    y = as_series(series)
    n = len(y)
    min_size = int(config.min_size)
    beta = config.resolve_penalty(n)
    if n < 2 * min_size:
        return []
    cost = cost or RbfCost(y, config.bandwidth)
    f = np.full(n + 1, np.inf)
    f[0] = -beta
    last = np.zeros(n + 1, dtype=int)
    candidates = [0]
    pruned_at = {}
    for t in range(min_size, n + 1):
        admissible = [s for s in candidates if s <= t - min_size and pruned_at.get(s, n + 1) > t - min_size]
        best, arg = np.inf, 0
        values = {}
        for s in admissible:
            v = f[s] + cost(s, t)
            values[s] = v
            if v + beta < best:
                best, arg = v + beta, s
        f[t], last[t] = best, arg
        for s, v in values.items():
            if s not in pruned_at and v > f[t] + _PRUNE_MARGIN:
                pruned_at[s] = t
        # forget candidates whose pruning is in force for every future end
        candidates = [s for s in candidates if pruned_at.get(s, n + 1) > t - min_size]
        if t >= min_size and np.isfinite(f[t]):
            candidates.append(t)
    out, t = [], n
    while t > 0:
        s = last[t]
        if s > 0:
            out.append(int(s))
        t = s
    return sorted(out)


BRUTE_FORCE_MAX_T = 24


def brute_force_segment(series, config: PeltConfig | None = None) -> list:
    """Exhaustive search over all change-point sets (T <= 24)."""
    config = config or PeltConfig()
    y = as_series(series)
    n = len(y)
    if n > BRUTE_FORCE_MAX_T:
        raise UsageError(f"brute force limited to T <= {BRUTE_FORCE_MAX_T}, got {n}")
    min_size = int(config.min_size)
    beta = config.resolve_penalty(n)
    if n < 2 * min_size:
        return []
    cmat = RbfCost(y, config.bandwidth).matrix()
    n_masks = 1 << (n - 1)
    masks = np.arange(n_masks, dtype=np.int64)
    start = np.zeros(n_masks, dtype=np.int64)
    total = np.zeros(n_masks)
    valid = np.ones(n_masks, dtype=bool)
    for t in range(1, n + 1):
        cut = np.ones(n_masks, dtype=bool) if t == n else ((masks >> (t - 1)) & 1).astype(bool)
        seg_len = t - start
        valid &= ~cut | (seg_len >= min_size)
        total = np.where(cut, total + cmat[start, t], total)
        start = np.where(cut, t, start)
    n_cps = np.array([bin(m).count("1") for m in range(n_masks)]) if n_masks <= 1 << 12 else _popcount(masks)
    objective = np.where(valid, total + beta * n_cps, np.inf)
    best = int(np.argmin(objective))
    return [t for t in range(1, n) if (best >> (t - 1)) & 1]


def _popcount(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    count = np.zeros_like(x)
    while np.any(x):
        count += x & 1
        x >>= 1
    return count


class KernelPelt(BaseEstimator):
    """Estimator wrapper: ``KernelPelt(penalty=..).fit(y).predict()``."""

    def __init__(self, penalty="bic", min_size=10, bandwidth=MEDIAN):
        self.penalty = penalty
        self.min_size = min_size
        self.bandwidth = bandwidth

    def fit(self, X, y=None):
        X = check_array(np.asarray(X, dtype=np.float64).reshape(len(X), -1))
        self.config_ = PeltConfig(self.penalty, self.min_size, self.bandwidth)
        self.cost_ = RbfCost(X, self.bandwidth)
        self.n_samples_ = len(X)
        self.series_ = X
        return self

    def predict(self, X=None):
        check_is_fitted(self, "cost_")
        return pelt(self.series_, self.config_, self.cost_)

    def fit_predict(self, X, y=None):
        return self.fit(X).predict()


# smoothing and curvature peaks -------------------------------------------------

def smooth(series, window: int) -> np.ndarray:
    """Centered moving average; windows shrink at the edges."""
    if window < 1 or window % 2 == 0:
        raise UsageError(f"window must be odd and >= 1, got {window}")
    y = np.asarray(series, dtype=np.float64).ravel()
    half = window // 2
    c = np.concatenate([[0.0], np.cumsum(y)])
    idx = np.arange(len(y))
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, len(y))
    return (c[hi] - c[lo]) / (hi - lo)


def second_difference(series) -> np.ndarray:
    """``d2[t] = y[t+1] - 2 y[t] + y[t-1]``; zero at the two ends."""
    y = np.asarray(series, dtype=np.float64).ravel()
    d2 = np.zeros_like(y)
    if len(y) >= 3:
        d2[1:-1] = y[2:] - 2 * y[1:-1] + y[:-2]
    return d2


def second_derivative_peaks(series, prominence: float = 1.0, min_gap: int = 5) -> list:
    """Strict local maxima of the second difference above ``prominence * std``.

    Peaks closer than ``min_gap`` are resolved in favour of the larger one.
    """
    y = np.asarray(series, dtype=np.float64).ravel()
    if len(y) < 3:
        raise UsageError("need at least 3 points for a second difference")
    d2 = y[2:] - 2 * y[1:-1] + y[:-2]  # d2[i] belongs to t = i + 1
    # floor relative to the signal scale so round-off on straight lines never counts
    thresh = max(prominence * d2.std(), 1e-9 * max(1.0, float(np.abs(y).max())))
    left = np.concatenate([[-np.inf], d2[:-1]])
    right = np.concatenate([d2[1:], [-np.inf]])
    is_peak = (d2 > left) & (d2 > right) & (d2 >= thresh)
    cand = np.flatnonzero(is_peak)
    order = sorted(cand, key=lambda i: (-d2[i], i))
    kept = []
    for i in order:
        if all(abs(i - j) >= min_gap for j in kept):
            kept.append(i)
    return sorted(int(i) + 1 for i in kept)
