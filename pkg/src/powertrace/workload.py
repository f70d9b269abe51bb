"""Arrival schedules to workload features.

A log-linear prefill-latency model and a lognormal inter-token latency model
give each request a lifetime; a FIFO queue with ``batch_size`` identical slots
turns lifetimes into active intervals; sampling those intervals on a fixed grid
yields the active-request count ``a`` and its first difference ``da``.
"""

from __future__ import annotations

import heapq
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from powertrace.errors import FitError, FormatError
from powertrace.types import ArrivalSchedule, Lifetimes, RequestLogRecord, SeedLike, as_rng


@dataclass(frozen=True)
class LatencySurrogate:
    """Per-configuration latency parameters.

    ``log(ttft) = alpha0 + alpha1 * log(n_in + 1) + N(0, sigma_ttft^2)`` and
    ``log(tbt) ~ N(mu_log_tbt, sigma_log_tbt^2)``.
    """

    alpha0: float
    alpha1: float
    sigma_ttft: float
    mu_log_tbt: float
    sigma_log_tbt: float

    def __post_init__(self):
        if self.sigma_ttft < 0 or self.sigma_log_tbt < 0:
            raise ValueError("surrogate standard deviations must be non-negative")

    def to_dict(self) -> dict:
        return {
            "alpha0": self.alpha0,
            "alpha1": self.alpha1,
            "sigma_ttft": self.sigma_ttft,
            "mu_log_tbt": self.mu_log_tbt,
            "sigma_log_tbt": self.sigma_log_tbt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatencySurrogate":
        return cls(**{k: float(d[k]) for k in ("alpha0", "alpha1", "sigma_ttft", "mu_log_tbt", "sigma_log_tbt")})


@dataclass(frozen=True)
class QueueConfig:
    batch_size: int = 64
    dt: float = 0.25

    def __post_init__(self):
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class ActiveIntervalSet:
    """Per-request ``[start, end)`` execution intervals in arrival order."""

    start: np.ndarray
    end: np.ndarray

    def __len__(self) -> int:
        return self.start.size

    @classmethod
    def empty(cls) -> "ActiveIntervalSet":
        return cls(np.zeros(0), np.zeros(0))


@dataclass(frozen=True)
class FeatureSeries:
    """Active-request count ``a`` and its first difference ``da`` on a ``dt`` grid."""

    a: np.ndarray
    dt: float = 0.25
    da: np.ndarray = field(default=None)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.int64).reshape(-1)
        da = np.diff(a, prepend=0)
        if self.da is not None and not np.array_equal(np.asarray(self.da), da):
            raise ValueError("da must equal the first difference of a (with a[-1] = 0)")
        a.flags.writeable = False
        da.flags.writeable = False
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "da", da)

    def __len__(self) -> int:
        return self.a.size

    def matrix(self) -> np.ndarray:
        """Features as a ``(T, 2)`` float array of ``(a, da)``."""
        return np.stack([self.a, self.da], axis=1).astype(np.float64)


@dataclass(frozen=True)
class LengthDist:
    """Token-length distribution: ``empirical`` values, or ``lognormal`` truncated to ``[1, cap]``."""

    kind: str = "lognormal"
    mu: float = 5.0
    sigma: float = 1.0
    cap: int = 4096
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("lognormal", "empirical"):
            raise ValueError(f"unknown length distribution {self.kind!r}")
        if self.kind == "lognormal" and int(self.cap) < 1:
            raise ValueError("length cap must be >= 1")
        if self.kind == "empirical" and len(self.values) == 0:
            raise ValueError("empirical length distribution needs values")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "empirical":
            vals = np.asarray(self.values, dtype=np.int64)
            return vals[rng.integers(0, vals.size, size=n)]
        out = np.empty(n, dtype=np.int64)
        todo = np.arange(n)
        # rejection keeps the shape of the lognormal inside [1, cap]
        for _ in range(1000):
            if todo.size == 0:
                break
            draw = np.rint(rng.lognormal(self.mu, self.sigma, size=todo.size))
            ok = (draw >= 1) & (draw <= self.cap)
            out[todo[ok]] = draw[ok]
            todo = todo[~ok]
        if todo.size:
            out[todo] = np.clip(np.rint(rng.lognormal(self.mu, self.sigma, size=todo.size)), 1, self.cap)
        return out

    @classmethod
    def from_dict(cls, d) -> "LengthDist":
        if d is None:
            return cls()
        if isinstance(d, (list, tuple)):
            return cls(kind="empirical", values=tuple(int(v) for v in d))
        kind = d.get("kind", "lognormal")
        if kind == "empirical":
            return cls(kind="empirical", values=tuple(int(v) for v in d["values"]))
        return cls(kind="lognormal", mu=float(d.get("mu", 5.0)), sigma=float(d.get("sigma", 1.0)),
                   cap=int(d.get("cap", 4096)))


@dataclass(frozen=True)
class ArrivalSpec:
    """How to draw a request stream.

    ``poisson``: homogeneous with ``rate`` req/s.  ``intensity``: piecewise-constant
    rates, one per ``intensity_step_s`` seconds, realized by thinning.
    ``explicit``: the given ``requests`` triples are returned unchanged.
    """

    kind: str = "poisson"
    rate: float = 1.0
    intensity: tuple = ()
    intensity_step_s: float = 300.0
    n_in: LengthDist = LengthDist(mu=6.0, sigma=1.0, cap=8192)
    n_out: LengthDist = LengthDist(mu=5.0, sigma=1.0, cap=4096)
    requests: tuple = ()

    def __post_init__(self):
        if self.kind not in ("poisson", "intensity", "explicit"):
            raise ValueError(f"unknown arrival kind {self.kind!r}")
        if self.kind == "poisson" and not self.rate > 0:
            raise ValueError("poisson rate must be positive")
        if self.kind == "intensity":
            if len(self.intensity) == 0 or min(self.intensity) < 0:
                raise ValueError("intensity needs non-negative rates")
            if not self.intensity_step_s > 0:
                raise ValueError("intensity_step_s must be positive")

    def rate_at(self, t) -> np.ndarray:
        """Instantaneous rate (req/s); the intensity series repeats after its end."""
        if self.kind == "poisson":
            return np.full_like(np.asarray(t, dtype=float), self.rate)
        rates = np.asarray(self.intensity, dtype=float)
        idx = np.floor(np.asarray(t, dtype=float) / self.intensity_step_s).astype(np.int64) % rates.size
        return rates[idx]

    @classmethod
    def from_dict(cls, d: dict) -> "ArrivalSpec":
        kind = d.get("kind", "poisson")
        reqs = tuple(tuple(r) for r in d.get("requests", ()))
        return cls(
            kind=kind,
            rate=float(d.get("rate", 1.0)),
            intensity=tuple(float(v) for v in d.get("intensity", ())),
            intensity_step_s=float(d.get("intensity_step_s", 300.0)),
            n_in=LengthDist.from_dict(d.get("n_in")) if "n_in" in d else cls.n_in,
            n_out=LengthDist.from_dict(d.get("n_out")) if "n_out" in d else cls.n_out,
            requests=reqs,
        )


def requests_for_rate(rate: float) -> int:
    """Trace size used for measurement sweeps: 600 * rate prompts (about ten minutes)."""
    return int(round(600 * rate))


def fit_latency_surrogate(records: Sequence[RequestLogRecord]) -> LatencySurrogate:
    """Least-squares fit of log TTFT on log(n_in + 1), plus lognormal TBT moments."""
    recs = [r for r in records if r.ttft_s > 0]
    if len(recs) < 8:
        raise FitError(f"need at least 8 requests with ttft_s > 0, got {len(recs)}")
    x = np.log(np.array([r.n_in for r in recs], dtype=np.float64) + 1.0)
    y = np.log(np.array([r.ttft_s for r in recs], dtype=np.float64))
    if np.unique(x).size < 2:
        raise FitError("need at least 2 distinct input lengths to fit the prefill slope")
    tbt = np.array([r.tbt_s for r in recs if r.tbt_s is not None], dtype=np.float64)
    if tbt.size < 2:
        raise FitError(f"need at least 2 requests with tbt_s, got {tbt.size}")

    xc = x - x.mean()
    alpha1 = float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))
    alpha0 = float(y.mean() - alpha1 * x.mean())
    resid = y - (alpha0 + alpha1 * x)
    sigma_ttft = math.sqrt(float(np.dot(resid, resid)) / (x.size - 2)) if x.size > 2 else 0.0
    log_tbt = np.log(tbt)
    return LatencySurrogate(alpha0, alpha1, sigma_ttft, float(log_tbt.mean()), float(log_tbt.std(ddof=1)))


def sample_lifetimes(schedule: ArrivalSchedule, s: LatencySurrogate, seed: SeedLike = 0) -> Lifetimes:
    """Draw one TTFT and one TBT per request (noise for TTFT first, then TBT)."""
    rng = as_rng(seed)
    n = len(schedule)
    eps = rng.normal(0.0, s.sigma_ttft, size=n)
    z = rng.normal(s.mu_log_tbt, s.sigma_log_tbt, size=n)
    ttft = np.exp(s.alpha0 + s.alpha1 * np.log(schedule.n_in + 1.0) + eps)
    return Lifetimes(ttft, np.exp(z))


def request_durations(schedule: ArrivalSchedule, lifetimes: Lifetimes) -> np.ndarray:
    return lifetimes.ttft + schedule.n_out * lifetimes.tbt


def simulate_queue(schedule: ArrivalSchedule, lifetimes: Lifetimes, q: QueueConfig = QueueConfig()) -> ActiveIntervalSet:
    """FIFO admission into ``batch_size`` slots; each request holds one slot for its lifetime."""
    n = len(schedule)
    if len(lifetimes) != n:
        raise ValueError("lifetimes must be index-aligned with the schedule")
    if n == 0:
        return ActiveIntervalSet.empty()
    durations = request_durations(schedule, lifetimes)
    start = np.empty(n)
    end = np.empty(n)
    slots = [-math.inf] * min(int(q.batch_size), n)
    for i, (t, d) in enumerate(zip(schedule.arrivals.tolist(), durations.tolist())):
        free = slots[0]
        s = t if t >= free else free
        start[i] = s
        end[i] = s + d
        heapq.heapreplace(slots, end[i])
    return ActiveIntervalSet(start, end)


def compute_features(intervals: ActiveIntervalSet, dt: float = 0.25, horizon: Optional[float] = None) -> FeatureSeries:
    """Count intervals with ``start <= t*dt < end`` at each grid point below ``horizon``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if horizon is None:
        horizon = float(intervals.end.max()) + dt if len(intervals) else dt
    n_steps = max(int(math.ceil(horizon / dt - 1e-9)), 1)
    if len(intervals) and horizon < float(intervals.end.max()):
        warnings.warn(f"horizon {horizon:g}s ends before the last request completes; features truncated",
                      stacklevel=2)
    times = np.arange(n_steps) * dt
    started = np.searchsorted(np.sort(intervals.start), times, side="right")
    ended = np.searchsorted(np.sort(intervals.end), times, side="right")
    return FeatureSeries(started - ended, dt)


def schedule_features(schedule: ArrivalSchedule, lifetimes: Lifetimes, dt: float = 0.25,
                      horizon: Optional[float] = None, batch_size: int = 64) -> FeatureSeries:
    """Queue + feature extraction in one call."""
    intervals = simulate_queue(schedule, lifetimes, QueueConfig(batch_size, dt))
    return compute_features(intervals, dt, horizon)


def log_features(records: Sequence[RequestLogRecord], dt: float, n_steps: int, origin: float = 0.0,
                 batch_size: int = 64) -> FeatureSeries:
    """Features for a measured trace, replaying the logged latencies through the queue.

    ``origin`` is the trace's first timestamp so arrivals land on the trace grid.
    """
    recs = sorted(records, key=lambda r: r.arrival_s)
    schedule = ArrivalSchedule.from_requests((r.arrival_s - origin, r.n_in, r.n_out) for r in recs)
    return schedule_features(schedule, Lifetimes.from_log(recs), dt, n_steps * dt, batch_size)


def _thinned_arrivals(spec: ArrivalSpec, rng: np.random.Generator, horizon: float,
                      n_requests: Optional[int]) -> np.ndarray:
    rates = np.asarray(spec.intensity, dtype=float)
    lam_max = float(rates.max())
    if lam_max <= 0:
        return np.zeros(0)
    accepted = []
    t = 0.0
    block = 1024
    while True:
        gaps = rng.exponential(1.0 / lam_max, size=block)
        cand = t + np.cumsum(gaps)
        u = rng.random(block)
        keep = cand[u * lam_max < spec.rate_at(cand)]
        t = float(cand[-1])
        keep = keep[keep < horizon]
        accepted.append(keep)
        got = sum(a.size for a in accepted)
        if t >= horizon or (n_requests is not None and got >= n_requests):
            break
    out = np.concatenate(accepted)
    return out[:n_requests] if n_requests is not None else out


def generate_arrivals(spec: ArrivalSpec, n_requests: Optional[int] = None, horizon: Optional[float] = None,
                      seed: SeedLike = 0) -> ArrivalSchedule:
    """Draw a schedule with ``n_requests`` arrivals, or all arrivals before ``horizon``."""
    if spec.kind == "explicit":
        return ArrivalSchedule.from_requests(spec.requests)
    if n_requests is None and horizon is None:
        raise ValueError("give n_requests or horizon")
    rng = as_rng(seed)
    if spec.kind == "poisson":
        if n_requests is not None:
            t = np.cumsum(rng.exponential(1.0 / spec.rate, size=n_requests))
            if horizon is not None:
                t = t[t < horizon]
        else:
            chunks, last = [], 0.0
            while last < horizon:
                c = last + np.cumsum(rng.exponential(1.0 / spec.rate, size=max(int(spec.rate * horizon), 16)))
                chunks.append(c)
                last = float(c[-1])
            t = np.concatenate(chunks)
            t = t[t < horizon]
    else:
        if horizon is None:
            horizon = math.inf if n_requests else len(spec.intensity) * spec.intensity_step_s
        t = _thinned_arrivals(spec, rng, horizon, n_requests)
    n = t.size
    return ArrivalSchedule(t, spec.n_in.sample(rng, n), spec.n_out.sample(rng, n))


def parse_requests_fragment(rows) -> tuple:
    try:
        return tuple((float(t), int(a), int(b)) for t, a, b in rows)
    except (TypeError, ValueError):
        raise FormatError("explicit requests must be [arrival_s, n_in, n_out] triples") from None
