"""Trace-fidelity metrics and the median-over-seeds evaluation protocol."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, List, Union

import numpy as np

from powertrace.errors import MetricError
from powertrace.types import PowerTrace

DEFAULT_MAX_LAG = 120


def _values(x) -> np.ndarray:
    if isinstance(x, PowerTrace):
        return x.samples
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _common_length(a: np.ndarray, b: np.ndarray, what: str):
    if a.size != b.size:
        n = min(a.size, b.size)
        warnings.warn(f"{what}: traces differ in length ({a.size} vs {b.size}); truncating to {n}", stacklevel=3)
        return a[:n], b[:n]
    return a, b


def delta_energy(syn, meas) -> float:
    """Signed relative energy error ``(E_syn - E_meas) / E_meas`` with ``E = sum(samples) * dt``."""
    def energy(x):
        if isinstance(x, PowerTrace):
            return x.energy
        v = _values(x)
        if v.size == 0:
            raise MetricError("empty trace")
        return float(np.sum(v))

    e_meas = energy(meas)
    if e_meas <= 0:
        raise MetricError("measured trace has zero energy")
    return (energy(syn) - e_meas) / e_meas


def ks_statistic(syn, meas) -> float:
    """Two-sample Kolmogorov-Smirnov distance between the empirical CDFs."""
    a = np.sort(_values(syn))
    b = np.sort(_values(meas))
    if a.size == 0 or b.size == 0:
        raise MetricError("KS needs non-empty samples")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def acf(x, max_lag: int) -> np.ndarray:
    """Sample autocorrelation at lags 1..max_lag (mean removed, 1/n normalization)."""
    v = _values(x)
    d = v - v.mean()
    c0 = float(np.dot(d, d))
    if c0 <= 0:
        raise MetricError("autocorrelation undefined for a constant trace")
    n = d.size
    return np.array([float(np.dot(d[: n - k], d[k:])) / c0 for k in range(1, max_lag + 1)])


def acf_r2(syn, meas, max_lag: int = DEFAULT_MAX_LAG) -> float:
    """Coefficient of determination of the synthetic ACF against the measured ACF.

    Not clamped: values below zero mean worse than predicting the mean ACF.
    """
    a, b = _common_length(_values(syn), _values(meas), "acf_r2")
    if b.size <= max_lag:
        raise MetricError(f"traces must be longer than max_lag={max_lag}")
    acf_syn = acf(a, max_lag)
    acf_meas = acf(b, max_lag)
    ss_res = float(np.sum((acf_syn - acf_meas) ** 2))
    ss_tot = float(np.sum((acf_meas - acf_meas.mean()) ** 2))
    if ss_tot == 0:
        if ss_res == 0:
            return 1.0
        raise MetricError("measured ACF is flat; R^2 undefined")
    return 1.0 - ss_res / ss_tot


def nrmse(syn, meas) -> float:
    """RMSE normalized by the measured range ``max(meas) - min(meas)``."""
    a, b = _common_length(_values(syn), _values(meas), "nrmse")
    span = float(b.max() - b.min())
    if span <= 0:
        raise MetricError("NRMSE undefined for a constant measured trace")
    return float(np.sqrt(np.mean((a - b) ** 2))) / span


@dataclass
class FidelityReport:
    ks: float
    acf_r2: float
    nrmse: float
    delta_energy: float
    n_seeds: int = 1
    aggregation: str = "median"
    per_seed: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_traces(syn, meas, max_lag: int = DEFAULT_MAX_LAG) -> FidelityReport:
    """All four metrics for one synthetic/measured pair (signed energy error)."""
    return FidelityReport(
        ks=ks_statistic(syn, meas),
        acf_r2=acf_r2(syn, meas, max_lag),
        nrmse=nrmse(syn, meas),
        delta_energy=delta_energy(syn, meas),
    )


def evaluate_multi_seed(reference, generator: Callable[[int], PowerTrace], seeds: Union[int, Iterable[int]] = 5,
                        max_lag: int = DEFAULT_MAX_LAG) -> FidelityReport:
    """Median of each metric over one synthetic trace per seed.

    The energy entry is the median of ``|delta_energy|``.
    """
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if not seed_list:
        raise ValueError("need at least one seed")
    rows = []
    for s in seed_list:
        rep = evaluate_traces(generator(s), reference, max_lag)
        rows.append({"seed": s, "ks": rep.ks, "acf_r2": rep.acf_r2, "nrmse": rep.nrmse,
                     "delta_energy": rep.delta_energy})
    med = lambda key, f=lambda v: v: float(np.median([f(r[key]) for r in rows]))  # noqa: E731
    return FidelityReport(
        ks=med("ks"),
        acf_r2=med("acf_r2"),
        nrmse=med("nrmse"),
        delta_energy=med("delta_energy", abs),
        n_seeds=len(seed_list),
        per_seed=rows,
    )
