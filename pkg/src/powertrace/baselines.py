"""Comparison power models: nameplate TDP, training-set mean, and a phase look-up table.

The LUT consumes the same active intervals as the learned pipeline, so any
difference between the two comes from the power abstraction alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from powertrace.types import ArrivalSchedule, Lifetimes, PowerTrace
from powertrace.workload import QueueConfig, simulate_queue

PHASES = ("idle", "prompt", "decode", "mixed")


def tdp_trace(nameplate_w: float, length: int, dt: float = 0.25) -> PowerTrace:
    if not nameplate_w > 0:
        raise ValueError("nameplate_w must be positive")
    return PowerTrace(np.full(int(length), float(nameplate_w)), dt)


def mean_trace(training_traces: Sequence, length: int, dt: float = 0.25) -> PowerTrace:
    """Constant trace at the pooled mean of every training sample."""
    arrays = [t.samples if isinstance(t, PowerTrace) else np.asarray(t, float) for t in training_traces]
    if not arrays:
        raise ValueError("need at least one training trace")
    pooled = np.concatenate(arrays)
    return PowerTrace(np.full(int(length), float(pooled.mean())), dt)


@dataclass(frozen=True)
class LutSpec:
    """Phase power ratios relative to the GPU nameplate, plus fixed non-GPU watts.

    ``mixed_penalty`` stretches a request's prefill span when it overlaps other
    requests' decoding (1.1 is a guess; the source gives no number).
    """

    nameplate_w: float
    ratios: Dict[str, float] = field(default_factory=lambda: {"prompt": 0.9, "decode": 0.5, "mixed": 0.92, "idle": 0.12})
    overhead_w: float = 0.0
    mixed_penalty: float = 1.1
    enforce_order: bool = True

    def __post_init__(self):
        missing = set(PHASES) - set(self.ratios)
        if missing:
            raise ValueError(f"LUT ratios missing {sorted(missing)}")
        r = self.ratios
        if any(not 0 <= r[p] <= 1 for p in PHASES):
            raise ValueError("LUT ratios must lie in [0, 1]")
        # mixed is prompt-like plus a penalty, so it may sit above prompt
        if self.enforce_order and not r["idle"] <= r["decode"] <= min(r["mixed"], r["prompt"]):
            raise ValueError("LUT ratios must satisfy idle <= decode <= min(mixed, prompt)")
        if not self.nameplate_w > 0 or self.overhead_w < 0:
            raise ValueError("nameplate_w must be positive and overhead_w non-negative")
        if self.mixed_penalty < 1:
            raise ValueError("mixed_penalty must be >= 1")

    def level(self, phase: str) -> float:
        return self.nameplate_w * self.ratios[phase] + self.overhead_w

    @classmethod
    def from_dict(cls, d: dict) -> "LutSpec":
        return cls(
            nameplate_w=float(d["nameplate_w"]),
            ratios={k: float(v) for k, v in d.get("ratios", {"prompt": 0.9, "decode": 0.5, "mixed": 0.92, "idle": 0.12}).items()},
            overhead_w=float(d.get("overhead_w", 0.0)),
            mixed_penalty=float(d.get("mixed_penalty", 1.1)),
            enforce_order=bool(d.get("enforce_order", True)),
        )


def _overlap_counts(a0, a1, b0, b1):
    """For each span ``[a0, a1)`` the number of non-empty spans ``[b0, b1)`` it intersects."""
    keep = b1 > b0
    b0, b1 = np.sort(b0[keep]), np.sort(b1[keep])
    # a non-empty span ending at or before a0 also starts before a1
    return np.searchsorted(b0, a1, side="left") - np.searchsorted(b1, a0, side="right")


def lut_phases(schedule: ArrivalSchedule, lifetimes: Lifetimes, q: QueueConfig, n_steps: int,
               mixed_penalty: float = 1.0) -> np.ndarray:
    """Phase index (into ``PHASES``) of the batch at each sample time ``t * q.dt``.

    Intervals come from :func:`simulate_queue`.  A request whose prefill span
    overlaps another request's decoding has its prefill stretched by
    ``mixed_penalty`` inside its fixed interval (the decode share shrinks).
    """
    iv = simulate_queue(schedule, lifetimes, q)
    times = np.arange(int(n_steps)) * q.dt
    if len(iv) == 0:
        return np.zeros(times.size, dtype=np.int64)
    start, end = iv.start, iv.end
    prefill_end = np.minimum(start + lifetimes.ttft, end)
    if mixed_penalty != 1.0:
        mixed = _overlap_counts(start, prefill_end, prefill_end, end) > 0
        stretched = np.minimum(start + lifetimes.ttft * mixed_penalty, end)
        prefill_end = np.where(mixed, stretched, prefill_end)

    def active(lo, hi):
        return (np.searchsorted(np.sort(lo), times, side="right")
                - np.searchsorted(np.sort(hi), times, side="right"))

    n_prompt = active(start, prefill_end)
    n_decode = active(prefill_end, end)
    phase = np.zeros(times.size, dtype=np.int64)
    phase[(n_prompt > 0) & (n_decode == 0)] = PHASES.index("prompt")
    phase[(n_prompt == 0) & (n_decode > 0)] = PHASES.index("decode")
    phase[(n_prompt > 0) & (n_decode > 0)] = PHASES.index("mixed")
    return phase


def lut_trace(schedule: ArrivalSchedule, lifetimes: Lifetimes, q: QueueConfig, lut: LutSpec,
              n_steps: int) -> PowerTrace:
    """``nameplate * ratio(phase) + overhead`` per step of ``q.dt``."""
    phase = lut_phases(schedule, lifetimes, q, n_steps, lut.mixed_penalty)
    levels = np.array([lut.level(p) for p in PHASES])
    return PowerTrace(levels[phase], q.dt)
