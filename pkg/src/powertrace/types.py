"""Shared domain types: serving configurations, power traces, request data."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from powertrace.errors import FormatError

SeedLike = Union[int, Sequence[int], np.random.SeedSequence, np.random.Generator, None]


def as_rng(seed: SeedLike) -> np.random.Generator:
    """Return a Generator for ``seed`` (passes Generators through untouched)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ServingConfig:
    """Hardware / model / tensor-parallel triple keying every fitted artifact.

    ``is_moe`` selects AR(1) generation by default.
    """

    hardware: str
    model: str
    tensor_parallel: int = 1
    is_moe: bool = False

    def __post_init__(self):
        if int(self.tensor_parallel) < 1:
            raise ValueError(f"tensor_parallel must be >= 1, got {self.tensor_parallel}")
        object.__setattr__(self, "hardware", str(self.hardware).strip().lower())
        object.__setattr__(self, "model", str(self.model).strip().lower())
        object.__setattr__(self, "tensor_parallel", int(self.tensor_parallel))
        object.__setattr__(self, "is_moe", bool(self.is_moe))

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.hardware, self.model, self.tensor_parallel)

    def to_dict(self) -> dict:
        return {
            "hardware": self.hardware,
            "model": self.model,
            "tensor_parallel": self.tensor_parallel,
            "is_moe": self.is_moe,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ServingConfig":
        return cls(d["hardware"], d["model"], int(d.get("tensor_parallel", 1)), bool(d.get("is_moe", False)))


@dataclass(frozen=True)
class PowerTrace:
    """Uniformly sampled wattage series."""

    samples: np.ndarray
    dt: float = 0.25
    start_time: float = 0.0

    def __post_init__(self):
        samples = _frozen_array(self.samples, np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ValueError("a power trace needs at least one sample")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("power samples must be finite")
        if np.any(samples < 0):
            raise ValueError("power samples must be non-negative")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "start_time", float(self.start_time))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size * self.dt

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_time + np.arange(self.samples.size) * self.dt

    @property
    def energy(self) -> float:
        """Energy in joules (sum of samples times dt)."""
        return float(np.sum(self.samples) * self.dt)

    def __eq__(self, other):
        if not isinstance(other, PowerTrace):
            return NotImplemented
        return (
            self.dt == other.dt
            and self.start_time == other.start_time
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


@dataclass(frozen=True)
class ArrivalSchedule:
    """Requests as parallel arrays of arrival time and token counts, sorted by arrival."""

    arrivals: np.ndarray
    n_in: np.ndarray
    n_out: np.ndarray

    def __post_init__(self):
        t = _frozen_array(self.arrivals, np.float64).reshape(-1)
        n_in = np.asarray(self.n_in).reshape(-1)
        n_out = np.asarray(self.n_out).reshape(-1)
        if not (t.size == n_in.size == n_out.size):
            raise ValueError("arrivals, n_in and n_out must have equal length")
        for name, arr in (("n_in", n_in), ("n_out", n_out)):
            if arr.size and not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ValueError(f"{name} must hold integer token counts")
            if np.any(arr < 0):
                raise ValueError(f"{name} must be non-negative")
        if t.size and (not np.all(np.isfinite(t)) or np.any(np.diff(t) < 0)):
            raise ValueError("arrival times must be finite and sorted non-decreasing")
        object.__setattr__(self, "arrivals", t)
        object.__setattr__(self, "n_in", _frozen_array(n_in, np.int64))
        object.__setattr__(self, "n_out", _frozen_array(n_out, np.int64))

    def __len__(self) -> int:
        return self.arrivals.size

    @classmethod
    def empty(cls) -> "ArrivalSchedule":
        return cls(np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def from_requests(cls, requests: Iterable[Sequence[float]]) -> "ArrivalSchedule":
        """Build from ``(t, n_in, n_out)`` triples, stably sorted by arrival time."""
        rows = sorted(((float(t), int(a), int(b)) for t, a, b in requests), key=lambda r: r[0])
        if not rows:
            return cls.empty()
        t, n_in, n_out = zip(*rows)
        return cls(np.array(t), np.array(n_in), np.array(n_out))

    def shifted(self, offset: float) -> "ArrivalSchedule":
        return ArrivalSchedule(self.arrivals + offset, self.n_in, self.n_out)

    def __eq__(self, other):
        if not isinstance(other, ArrivalSchedule):
            return NotImplemented
        return (
            np.array_equal(self.arrivals, other.arrivals)
            and np.array_equal(self.n_in, other.n_in)
            and np.array_equal(self.n_out, other.n_out)
        )

    __hash__ = None


@dataclass(frozen=True)
class RequestLogRecord:
    """One measured request: arrival, token counts, and observed latencies."""

    arrival_s: float
    n_in: int
    n_out: int
    ttft_s: float
    tbt_s: Optional[float] = None

    def __post_init__(self):
        if self.n_in < 0 or self.n_out < 0:
            raise FormatError("token counts must be non-negative")
        if not self.ttft_s > 0:
            raise FormatError("ttft_s must be positive")
        if self.tbt_s is not None and not self.tbt_s > 0:
            raise FormatError("tbt_s must be positive")
        if self.n_out > 0 and self.tbt_s is None:
            raise FormatError("tbt_s is required when n_out > 0")


def schedule_from_log(records: Sequence[RequestLogRecord]) -> ArrivalSchedule:
    return ArrivalSchedule.from_requests((r.arrival_s, r.n_in, r.n_out) for r in records)


@dataclass(frozen=True)
class Lifetimes:
    """Per-request prefill latency and inter-token latency, index-aligned with a schedule."""

    ttft: np.ndarray
    tbt: np.ndarray = field(default=None)

    def __post_init__(self):
        ttft = _frozen_array(self.ttft, np.float64).reshape(-1)
        tbt = np.zeros_like(ttft) if self.tbt is None else np.asarray(self.tbt, np.float64).reshape(-1)
        if tbt.size != ttft.size:
            raise ValueError("ttft and tbt must have equal length")
        object.__setattr__(self, "ttft", ttft)
        object.__setattr__(self, "tbt", _frozen_array(tbt, np.float64))

    def __len__(self) -> int:
        return self.ttft.size

    @classmethod
    def from_log(cls, records: Sequence[RequestLogRecord]) -> "Lifetimes":
        """Measured lifetimes in arrival order (absent tbt counts as zero)."""
        recs = sorted(records, key=lambda r: r.arrival_s)
        return cls(
            np.array([r.ttft_s for r in recs], dtype=np.float64),
            np.array([r.tbt_s or 0.0 for r in recs], dtype=np.float64),
        )
