"""CSV readers and writers for traces and request logs.

``trace.csv`` holds ``timestamp_s,power_w``; ``requests.csv`` holds
``arrival_s,n_in,n_out,ttft_s,tbt_s`` with ``tbt_s`` empty for prefill-only
requests.  Every malformed input raises :class:`FormatError` naming the row
(1-based, header excluded).
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from typing import List, Sequence

import numpy as np

from powertrace.errors import FormatError
from powertrace.types import ArrivalSchedule, PowerTrace, RequestLogRecord

TRACE_COLUMNS = ("timestamp_s", "power_w")
REQUEST_COLUMNS = ("arrival_s", "n_in", "n_out", "ttft_s", "tbt_s")

# spacing deviations beyond this fraction of dt are reported as jitter
UNIFORMITY_TOL = 0.01


def _open_rows(path, required: Sequence[str]):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FormatError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in required if c not in header]
        if missing:
            raise FormatError(f"{path}: missing column(s) {', '.join(missing)}")
        reader.fieldnames = header
        return list(reader)


def _float(path, row_no, row, col, allow_empty=False):
    raw = (row.get(col) or "").strip()
    if raw == "":
        if allow_empty:
            return None
        raise FormatError(f"{path}: row {row_no}: empty {col}")
    try:
        val = float(raw)
    except ValueError:
        raise FormatError(f"{path}: row {row_no}: {col}={raw!r} is not a number") from None
    if not math.isfinite(val):
        raise FormatError(f"{path}: row {row_no}: {col} is not finite")
    return val


def _int(path, row_no, row, col):
    val = _float(path, row_no, row, col)
    if val != int(val):
        raise FormatError(f"{path}: row {row_no}: {col} must be an integer")
    return int(val)


def read_power_trace(path) -> PowerTrace:
    """Read a ``timestamp_s,power_w`` CSV; dt is the median timestamp spacing."""
    rows = _open_rows(path, TRACE_COLUMNS)
    if not rows:
        raise FormatError(f"{path}: no samples")
    ts = np.empty(len(rows))
    power = np.empty(len(rows))
    for i, row in enumerate(rows):
        row_no = i + 1
        ts[i] = _float(path, row_no, row, "timestamp_s")
        power[i] = _float(path, row_no, row, "power_w")
        if power[i] < 0:
            raise FormatError(f"{path}: row {row_no}: negative power {power[i]}")
        if i and ts[i] <= ts[i - 1]:
            raise FormatError(f"{path}: row {row_no}: timestamp {ts[i]} is not after {ts[i - 1]}")
    if len(rows) == 1:
        return PowerTrace(power, dt=0.25, start_time=ts[0])
    gaps = np.diff(ts)
    dt = float(np.median(gaps))
    jitter = np.abs(gaps - dt) > UNIFORMITY_TOL * dt
    if np.any(jitter):
        warnings.warn(
            f"{path}: {int(jitter.sum())} of {gaps.size} intervals deviate from dt={dt:g}s by more than 1%",
            stacklevel=2,
        )
    return PowerTrace(power, dt=dt, start_time=ts[0])


def write_power_trace(trace: PowerTrace, path) -> None:
    """Write ``trace`` as trace.csv; floats use repr so reads round-trip exactly."""
    _ensure_parent(path)
    with open(path, "w", newline="") as fh:
        fh.write("timestamp_s,power_w\n")
        for t, p in zip(trace.timestamps.tolist(), trace.samples.tolist()):
            fh.write(f"{t!r},{p!r}\n")


def write_wide_traces(path, timestamps, columns: dict) -> None:
    """Write several equally sampled series side by side: ``timestamp_s,<name>,...``."""
    _ensure_parent(path)
    names = list(columns)
    data = [np.asarray(columns[n], dtype=np.float64).tolist() for n in names]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["timestamp_s"] + names) + "\n")
        for i, t in enumerate(np.asarray(timestamps).tolist()):
            fh.write(",".join([repr(t)] + [repr(col[i]) for col in data]) + "\n")


def read_request_log(path) -> List[RequestLogRecord]:
    """Read measured requests, validated and sorted by arrival time."""
    rows = _open_rows(path, REQUEST_COLUMNS)
    records = []
    for i, row in enumerate(rows):
        row_no = i + 1
        arrival = _float(path, row_no, row, "arrival_s")
        n_in = _int(path, row_no, row, "n_in")
        n_out = _int(path, row_no, row, "n_out")
        ttft = _float(path, row_no, row, "ttft_s")
        tbt = _float(path, row_no, row, "tbt_s", allow_empty=True)
        if n_in < 0 or n_out < 0:
            raise FormatError(f"{path}: row {row_no}: negative token count")
        if ttft <= 0:
            raise FormatError(f"{path}: row {row_no}: ttft_s must be positive")
        if tbt is not None and tbt <= 0:
            raise FormatError(f"{path}: row {row_no}: tbt_s must be positive")
        if n_out > 0 and tbt is None:
            raise FormatError(f"{path}: row {row_no}: tbt_s is required when n_out > 0")
        records.append(RequestLogRecord(arrival, n_in, n_out, ttft, tbt))
    records.sort(key=lambda r: r.arrival_s)
    return records


def write_request_log(records: Sequence[RequestLogRecord], path) -> None:
    _ensure_parent(path)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(REQUEST_COLUMNS) + "\n")
        for r in records:
            tbt = "" if r.tbt_s is None else repr(float(r.tbt_s))
            fh.write(f"{float(r.arrival_s)!r},{r.n_in},{r.n_out},{float(r.ttft_s)!r},{tbt}\n")


def read_schedule(path) -> ArrivalSchedule:
    """Read an arrival schedule from any CSV with ``arrival_s,n_in,n_out`` columns."""
    rows = _open_rows(path, REQUEST_COLUMNS[:3])
    reqs = []
    for i, row in enumerate(rows):
        n_in = _int(path, i + 1, row, "n_in")
        n_out = _int(path, i + 1, row, "n_out")
        if n_in < 0 or n_out < 0:
            raise FormatError(f"{path}: row {i + 1}: negative token count")
        reqs.append((_float(path, i + 1, row, "arrival_s"), n_in, n_out))
    return ArrivalSchedule.from_requests(reqs)


def write_schedule(schedule: ArrivalSchedule, path) -> None:
    _ensure_parent(path)
    with open(path, "w", newline="") as fh:
        fh.write("arrival_s,n_in,n_out\n")
        for t, a, b in zip(schedule.arrivals.tolist(), schedule.n_in.tolist(), schedule.n_out.tolist()):
            fh.write(f"{t!r},{a},{b}\n")


def _ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
