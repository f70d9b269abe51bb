"""A known ground-truth server used by closed-loop and end-to-end tests.

Four power states selected by thresholds on the active-request count, a known
latency surrogate, and i.i.d. Gaussian power within each state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from powertrace.types import ArrivalSchedule, PowerTrace, RequestLogRecord
from powertrace.workload import (
    ArrivalSpec,
    LatencySurrogate,
    LengthDist,
    generate_arrivals,
    requests_for_rate,
    sample_lifetimes,
    schedule_features,
)

TRUE_MEANS = np.array([150.0, 300.0, 450.0, 600.0])
TRUE_STDS = np.array([15.0, 15.0, 15.0, 15.0])
THRESHOLDS = np.array([1, 4, 25])  # A_t in [0,1) -> 0, [1,4) -> 1, [4,25) -> 2, >= 25 -> 3
TRUE_SURROGATE = LatencySurrogate(alpha0=-3.0, alpha1=0.5, sigma_ttft=0.1, mu_log_tbt=-3.5, sigma_log_tbt=0.1)
DT = 0.25
BATCH = 64


def state_policy(a: np.ndarray) -> np.ndarray:
    return np.searchsorted(THRESHOLDS, a, side="right")


def arrival_spec(rate: float) -> ArrivalSpec:
    return ArrivalSpec(
        kind="poisson",
        rate=rate,
        n_in=LengthDist("lognormal", mu=6.0, sigma=0.6, cap=4096),
        n_out=LengthDist("lognormal", mu=5.2, sigma=0.5, cap=1024),
    )


@dataclass
class MeasuredRun:
    trace: PowerTrace
    records: List[RequestLogRecord]
    schedule: ArrivalSchedule
    horizon: float


def measure(rate: float, seed: int, phis=None) -> MeasuredRun:
    """One 'measured' trace with its request log, for ``600 * rate`` requests."""
    rng = np.random.default_rng([seed, int(rate * 1000)])
    schedule = generate_arrivals(arrival_spec(rate), n_requests=requests_for_rate(rate), seed=rng)
    lifetimes = sample_lifetimes(schedule, TRUE_SURROGATE, rng)
    horizon = float(np.ceil(schedule.arrivals[-1] / DT) * DT) + 30.0
    feats = schedule_features(schedule, lifetimes, DT, horizon, BATCH)
    z = state_policy(feats.a)
    eps = rng.standard_normal(z.size)
    if phis is None:
        y = TRUE_MEANS[z] + TRUE_STDS[z] * eps
    else:
        y = np.empty(z.size)
        y[0] = TRUE_MEANS[z[0]] + TRUE_STDS[z[0]] * eps[0]
        for t in range(1, z.size):
            k = z[t]
            y[t] = TRUE_MEANS[k] + phis[k] * (y[t - 1] - TRUE_MEANS[k]) + TRUE_STDS[k] * np.sqrt(1 - phis[k] ** 2) * eps[t]
    y = np.maximum(y, 0.0)
    records = [
        RequestLogRecord(float(t), int(i), int(o), float(tt), float(tb))
        for t, i, o, tt, tb in zip(schedule.arrivals, schedule.n_in, schedule.n_out, lifetimes.ttft, lifetimes.tbt)
    ]
    return MeasuredRun(PowerTrace(y, DT), records, schedule, horizon)


def training_runs(rates=(0.25, 1.0, 4.0), per_rate: int = 3, seed: int = 0) -> List[MeasuredRun]:
    return [measure(r, seed * 100 + j) for r in rates for j in range(per_rate)]


def held_out(rate: float, seed: int = 999) -> MeasuredRun:
    return measure(rate, seed)


def dataset(runs) -> List[Tuple]:
    from powertrace.workload import log_features

    return [(log_features(r.records, DT, len(r.trace), 0.0, BATCH), r.trace) for r in runs]
