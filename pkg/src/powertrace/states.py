"""Operating-state discovery from measured power.

One-dimensional Gaussian mixtures fitted by EM (k-means++ seeded restarts),
K chosen by BIC, hard labels by posterior argmax, and per-state AR(1)
coefficients estimated inside contiguous runs of a state.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from powertrace.errors import FitError
from powertrace.types import PowerTrace

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)
PHI_CLAMP = 0.99


@dataclass(frozen=True)
class StateCatalog:
    """Ordered operating states of one serving configuration.

    States are sorted by mean power; ``y_min``/``y_max`` is the observed
    range every generated sample is clipped to.
    """

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    phis: np.ndarray
    y_min: float
    y_max: float

    def __post_init__(self):
        arrs = {}
        for name in ("weights", "means", "stds", "phis"):
            a = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            a.flags.writeable = False
            arrs[name] = a
            object.__setattr__(self, name, a)
        k = arrs["means"].size
        if k < 1 or any(a.size != k for a in arrs.values()):
            raise ValueError("catalog arrays must share one length K >= 1")
        if abs(float(arrs["weights"].sum()) - 1.0) > 1e-9 or np.any(arrs["weights"] < 0):
            raise ValueError("state weights must be non-negative and sum to 1")
        if np.any(arrs["stds"] < 0):
            raise ValueError("state standard deviations must be non-negative")
        if np.any(np.abs(arrs["phis"]) >= 1):
            raise ValueError("AR(1) coefficients must satisfy |phi| < 1")
        if np.any(np.diff(arrs["means"]) < 0):
            raise ValueError("states must be sorted by mean power")
        if not self.y_min <= self.y_max:
            raise ValueError("y_min must not exceed y_max")
        object.__setattr__(self, "y_min", float(self.y_min))
        object.__setattr__(self, "y_max", float(self.y_max))

    @property
    def K(self) -> int:
        return self.means.size

    def with_phis(self, phis) -> "StateCatalog":
        return StateCatalog(self.weights, self.means, self.stds, phis, self.y_min, self.y_max)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "phis": self.phis.tolist(),
            "y_min": self.y_min,
            "y_max": self.y_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StateCatalog":
        cat = cls(d["weights"], d["means"], d["stds"], d.get("phis", [0.0] * len(d["means"])),
                  d["y_min"], d["y_max"])
        if "K" in d and int(d["K"]) != cat.K:
            raise ValueError(f"catalog declares K={d['K']} but holds {cat.K} states")
        return cat

    def __eq__(self, other):
        if not isinstance(other, StateCatalog):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in ("weights", "means", "stds", "phis")) \
            and self.y_min == other.y_min and self.y_max == other.y_max

    __hash__ = None


@dataclass(frozen=True)
class GmmFit:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    log_likelihood: float
    n_iter: int
    converged: bool

    @property
    def K(self) -> int:
        return self.means.size


def variance_floor(samples: np.ndarray) -> float:
    """Smallest component std: 0.5 W or 0.1% of the observed range, whichever is larger."""
    return max(0.5, 1e-3 * float(np.max(samples) - np.min(samples)))


def _component_logpdf(y: np.ndarray, weights, means, stds) -> np.ndarray:
    """``log(pi_k) + log N(y | mu_k, sigma_k^2)`` as an ``(n, K)`` array."""
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    z = (y[:, None] - means[None, :]) / stds[None, :]
    return log_w[None, :] - np.log(stds)[None, :] - 0.5 * _LOG_2PI - 0.5 * z * z


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=1)
    return m + np.log(np.sum(np.exp(a - m[:, None]), axis=1))


def _kmeanspp_centers(y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [y[rng.integers(y.size)]]
    d2 = (y - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers.append(y[rng.integers(y.size)])
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            centers.append(y[min(idx, y.size - 1)])
        d2 = np.minimum(d2, (y - centers[-1]) ** 2)
    return np.sort(np.asarray(centers))


def _em(y, k, rng, floor, tol, max_iter):
    centers = _kmeanspp_centers(y, k, rng)
    nearest = np.argmin(np.abs(y[:, None] - centers[None, :]), axis=1)
    resp = np.zeros((y.size, k))
    resp[np.arange(y.size), nearest] = 1.0

    weights = means = stds = None
    prev_ll = -math.inf
    ll = -math.inf
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        nk = resp.sum(axis=0)
        live = nk > 1e-10
        new_means = np.where(live, (resp * y[:, None]).sum(axis=0) / np.where(live, nk, 1.0),
                             centers if means is None else means)
        var = (resp * (y[:, None] - new_means[None, :]) ** 2).sum(axis=0) / np.where(live, nk, 1.0)
        new_stds = np.maximum(np.sqrt(var), floor)
        if stds is not None:
            new_stds = np.where(live, new_stds, stds)
        weights, means, stds = nk / y.size, new_means, new_stds

        logp = _component_logpdf(y, weights, means, stds)
        norm = _logsumexp_rows(logp)
        ll = float(norm.sum())
        # EM with a floored variance is still a constrained coordinate ascent
        assert ll >= prev_ll - 1e-9 * max(1.0, abs(prev_ll)), f"EM log-likelihood decreased at iteration {n_iter}"
        resp = np.exp(logp - norm[:, None])
        if n_iter > 1 and abs(ll - prev_ll) <= tol * abs(ll):
            converged = True
            break
        prev_ll = ll
    return weights, means, stds, ll, n_iter, converged


def fit_gmm(samples, K: int, seed=0, n_restarts: int = 5, tol: float = 1e-6, max_iter: int = 500) -> GmmFit:
    """Fit a K-component 1-D Gaussian mixture; components returned sorted by mean.

    The best of ``n_restarts`` EM runs by log-likelihood wins (ties go to the
    lowest restart index).  Restart ``j`` draws from the stream ``(seed, K, j)``.
    """
    y = np.asarray(samples, dtype=np.float64).reshape(-1)
    if K < 1:
        raise FitError("K must be >= 1")
    if y.size < 10 * K:
        raise FitError(f"need at least {10 * K} samples for K={K}, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise FitError("samples must be finite")
    n_distinct = np.unique(y).size
    if K > n_distinct:
        raise FitError(f"K={K} exceeds the {n_distinct} distinct sample value(s)")
    floor = variance_floor(y)

    if K == 1:
        mean = float(y.mean())
        std = max(float(y.std()), floor)
        ll = float(np.sum(-math.log(std) - 0.5 * _LOG_2PI - 0.5 * ((y - mean) / std) ** 2))
        return GmmFit(np.ones(1), np.array([mean]), np.array([std]), ll, 1, True)

    best = None
    for restart in range(n_restarts):
        rng = np.random.default_rng([int(seed), K, restart])
        result = _em(y, K, rng, floor, tol, max_iter)
        if best is None or result[3] > best[3]:
            best = result
    weights, means, stds, ll, n_iter, converged = best
    order = np.argsort(means, kind="stable")
    weights = weights[order] / weights.sum()
    return GmmFit(weights, means[order], stds[order], ll, n_iter, converged)


def n_parameters(K: int) -> int:
    """Free parameters of a 1-D K-component mixture: K means, K variances, K-1 weights."""
    return 3 * K - 1


def bic(fit: GmmFit, n: int) -> float:
    return -2.0 * fit.log_likelihood + n_parameters(fit.K) * math.log(n)


def bic_curve(samples, k_min: int = 2, k_max: int = 16, seed=0, **fit_kw) -> dict:
    """Map each K that fits successfully to ``(BIC, GmmFit)``."""
    y = np.asarray(samples, dtype=np.float64).reshape(-1)
    out = {}
    for k in range(k_min, k_max + 1):
        try:
            fit = fit_gmm(y, k, seed=seed, **fit_kw)
        except FitError as exc:
            warnings.warn(f"skipping K={k}: {exc}", stacklevel=2)
            continue
        out[k] = (bic(fit, y.size), fit)
    return out


def _argmin_bic(curve: dict) -> int:
    best_k, best_val = None, math.inf
    for k in sorted(curve):
        if curve[k][0] < best_val:
            best_k, best_val = k, curve[k][0]
    return best_k


def select_k_bic(samples, k_min: int = 2, k_max: int = 16, seed=0, **fit_kw) -> int:
    """K minimising ``-2 logL + (3K - 1) ln n``; ties go to the smaller K."""
    y = np.asarray(samples, dtype=np.float64).reshape(-1)
    if y.size < 10 * k_max:
        raise FitError(f"need at least {10 * k_max} samples to scan K up to {k_max}, got {y.size}")
    if np.unique(y).size < k_min:
        # nothing to separate: the penalty alone favours the smallest candidate
        warnings.warn("samples take fewer distinct values than k_min; returning k_min", stacklevel=2)
        return k_min
    curve = bic_curve(y, k_min, k_max, seed, **fit_kw)
    if not curve:
        raise FitError(f"no K in [{k_min}, {k_max}] could be fitted")
    return _argmin_bic(curve)


def _as_samples(trace) -> np.ndarray:
    if isinstance(trace, PowerTrace):
        return trace.samples
    return np.asarray(trace, dtype=np.float64).reshape(-1)


def assign_states(trace, catalog: StateCatalog) -> np.ndarray:
    """Hard label per sample: argmax of ``pi_k N(y | mu_k, sigma_k^2)``, lowest index on ties."""
    y = _as_samples(trace)
    stds = np.where(catalog.stds > 0, catalog.stds, np.finfo(float).tiny)
    logp = _component_logpdf(y, catalog.weights, catalog.means, stds)
    return np.argmax(logp, axis=1).astype(np.int64)


def _run_bounds(labels: np.ndarray):
    """Yield ``(state, start, stop)`` for each maximal run of equal labels."""
    if labels.size == 0:
        return
    cuts = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], cuts])
    stops = np.concatenate([cuts, [labels.size]])
    for a, b in zip(starts.tolist(), stops.tolist()):
        yield int(labels[a]), a, b


def _ar1_sums(y, labels, means, K, min_run):
    """Per-state accumulators: sum of lag products, sum of squares, pair count, values."""
    num = np.zeros(K)
    den = np.zeros(K)
    pairs = np.zeros(K, dtype=np.int64)
    values = [[] for _ in range(K)]
    for k, a, b in _run_bounds(labels):
        if b - a < min_run:
            continue
        d = y[a:b] - means[k]
        num[k] += float(np.dot(d[:-1], d[1:]))
        den[k] += float(np.dot(d[:-1], d[:-1]))
        pairs[k] += b - a - 1
        values[k].append(y[a:b])
    return num, den, pairs, values


def _phis_from_sums(num, den, pairs, values, min_pairs) -> np.ndarray:
    K = num.size
    phis = np.zeros(K)
    for k in range(K):
        if pairs[k] < min_pairs or den[k] <= 0:
            continue
        vals = np.concatenate(values[k])
        if np.var(vals) <= 1e-12 * max(1.0, float(np.mean(vals)) ** 2):
            continue
        phis[k] = float(np.clip(num[k] / den[k], -PHI_CLAMP, PHI_CLAMP))
    return phis


def estimate_ar1(trace, labels, means, min_run: int = 3, min_pairs: int = 30) -> np.ndarray:
    """Per-state lag-1 autocorrelation of ``y - mu_k`` pooled over runs of that state.

    Only pairs inside maximal runs of length >= ``min_run`` count; states with
    fewer than ``min_pairs`` pairs, or with constant values, get 0.
    """
    y = _as_samples(trace)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != y.size:
        raise ValueError("labels must align with the trace")
    means = np.asarray(means, dtype=np.float64)
    return _phis_from_sums(*_ar1_sums(y, labels, means, means.size, min_run), min_pairs)


def build_catalog(traces: Sequence, k_range: Tuple[int, int] = (2, 16), seed=0,
                  k: Optional[int] = None, **fit_kw) -> StateCatalog:
    """Pool the traces, pick K by BIC (unless ``k`` is given), fit, and estimate per-state AR(1)."""
    arrays = [_as_samples(t) for t in traces]
    if not arrays:
        raise FitError("no training traces")
    pooled = np.concatenate(arrays)
    if k is None:
        curve = bic_curve(pooled, k_range[0], k_range[1], seed, **fit_kw) if np.unique(pooled).size >= k_range[0] else {}
        if not curve:
            k = select_k_bic(pooled, k_range[0], k_range[1], seed, **fit_kw)
            fit = fit_gmm(pooled, k, seed=seed, **fit_kw)
        else:
            k = _argmin_bic(curve)
            fit = curve[k][1]
        log.info("BIC selected K=%d over %s", k, k_range)
    else:
        fit = fit_gmm(pooled, k, seed=seed, **fit_kw)

    base = StateCatalog(fit.weights, fit.means, fit.stds, np.zeros(fit.K), float(pooled.min()), float(pooled.max()))
    K = base.K
    num, den, pairs = np.zeros(K), np.zeros(K), np.zeros(K, dtype=np.int64)
    values = [[] for _ in range(K)]
    for y in arrays:
        n_, d_, p_, v_ = _ar1_sums(y, assign_states(y, base), base.means, K, 3)
        num += n_
        den += d_
        pairs += p_
        for kk in range(K):
            values[kk].extend(v_[kk])
    return base.with_phis(_phis_from_sums(num, den, pairs, values, 30))
