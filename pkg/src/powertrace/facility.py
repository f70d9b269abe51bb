"""Facility scenarios: hierarchy, traffic correlation, aggregation and planning analyses.

Servers are indexed in (row, rack, server) order; every fold over servers
follows that order so floating-point sums are reproducible.
"""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from powertrace.errors import AggregationError, FormatError, MetricError, ResampleError
from powertrace.types import ArrivalSchedule, PowerTrace
from powertrace.workload import ArrivalSpec, generate_arrivals

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FacilityTopology:
    rows: int = 1
    racks_per_row: int = 1
    servers_per_rack: int = 1

    def __post_init__(self):
        if min(self.rows, self.racks_per_row, self.servers_per_rack) < 1:
            raise ValueError("rows, racks_per_row and servers_per_rack must all be >= 1")

    @property
    def n_racks(self) -> int:
        return self.rows * self.racks_per_row

    @property
    def n_servers(self) -> int:
        return self.rows * self.racks_per_row * self.servers_per_rack

    def server_id(self, index: int) -> str:
        row, rem = divmod(index, self.racks_per_row * self.servers_per_rack)
        rack, srv = divmod(rem, self.servers_per_rack)
        return f"row{row}_rack{rack}_srv{srv}"

    def rack_id(self, index: int) -> str:
        row, rack = divmod(index, self.racks_per_row)
        return f"row{row}_rack{rack}"


@dataclass(frozen=True)
class SiteAssumptions:
    p_base_w: float = 1000.0
    pue: float = 1.3

    def __post_init__(self):
        if self.p_base_w < 0:
            raise ValueError("p_base_w must be non-negative")
        if self.pue < 1:
            raise ValueError("pue must be >= 1")


@dataclass(frozen=True)
class TrafficMode:
    """How request streams reach servers.

    ``independent``: each server draws its own process from ``spec``.
    ``shared_intensity``: one stream from the common rate in ``spec``, each
    arrival routed to server i with probability ``thinning[i]`` (dropped with
    the remainder).  ``offset_replay``: one schedule shared by every server,
    shifted by Uniform(0, ``max_offset_s``) and wrapped modulo the horizon.
    """

    kind: str = "independent"
    spec: ArrivalSpec = ArrivalSpec()
    thinning: Optional[tuple] = None
    max_offset_s: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("independent", "shared_intensity", "offset_replay"):
            raise ValueError(f"unknown traffic mode {self.kind!r}")
        if self.thinning is not None:
            p = np.asarray(self.thinning, dtype=float)
            if np.any(p <= 0) or np.any(p > 1) or p.sum() > 1 + 1e-12:
                raise ValueError("thinning probabilities must lie in (0, 1] and sum to <= 1")


def _server_rng(seed, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def build_schedules(topology: FacilityTopology, traffic: TrafficMode, seed: int = 0,
                    horizon: float = 600.0) -> List[ArrivalSchedule]:
    """One arrival schedule per server, in server index order."""
    n = topology.n_servers
    if traffic.kind == "independent":
        return [generate_arrivals(traffic.spec, horizon=horizon, seed=_server_rng(seed, i)) for i in range(n)]

    if traffic.kind == "shared_intensity":
        probs = np.full(n, 1.0 / n) if traffic.thinning is None else np.asarray(traffic.thinning, float)
        if probs.size != n:
            raise ValueError(f"thinning has {probs.size} entries for {n} servers")
        rng = np.random.default_rng([int(seed), 0x5A17])
        master = generate_arrivals(traffic.spec, horizon=horizon, seed=rng)
        # route each arrival to at most one server; the leftover mass drops it
        cum = np.cumsum(probs)
        dest = np.searchsorted(cum, rng.random(len(master)), side="right")
        return [ArrivalSchedule(master.arrivals[dest == i], master.n_in[dest == i], master.n_out[dest == i])
                for i in range(n)]

    base = generate_arrivals(traffic.spec, horizon=horizon, seed=np.random.default_rng([int(seed), 0x0FF5]))
    max_off = horizon if traffic.max_offset_s is None else float(traffic.max_offset_s)
    out = []
    for i in range(n):
        off = _server_rng(seed, i).uniform(0.0, max_off) if max_off > 0 else 0.0
        t = np.mod(base.arrivals + off, horizon)
        order = np.argsort(t, kind="stable")
        out.append(ArrivalSchedule(t[order], base.n_in[order], base.n_out[order]))
    return out


def compensated_sum(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Neumaier-compensated elementwise sum of equally shaped arrays, folded in order."""
    it = iter(rows)
    try:
        s = np.array(next(it), dtype=np.float64, copy=True)
    except StopIteration:
        raise ValueError("nothing to sum") from None
    c = np.zeros_like(s)
    for x in it:
        x = np.asarray(x, dtype=np.float64)
        t = s + x
        big = np.abs(s) >= np.abs(x)
        c += np.where(big, (s - t) + x, (x - t) + s)
        s = t
    return s + c


@dataclass
class HierarchyTraces:
    """Server, rack, row and site power arrays, each ``(entities, T)`` except site."""

    topology: FacilityTopology
    site: SiteAssumptions
    dt: float
    servers: np.ndarray
    racks: np.ndarray
    rows: np.ndarray
    site_it: np.ndarray
    facility: np.ndarray
    start_time: float = 0.0

    def trace(self, level: str, index: int = 0) -> PowerTrace:
        if level == "site":
            return PowerTrace(self.site_it, self.dt, self.start_time)
        if level == "facility":
            return PowerTrace(self.facility, self.dt, self.start_time)
        arr = {"server": self.servers, "rack": self.racks, "row": self.rows}[level]
        return PowerTrace(arr[index], self.dt, self.start_time)

    def level_ids(self, level: str) -> List[str]:
        topo = self.topology
        if level == "server":
            return [topo.server_id(i) for i in range(topo.n_servers)]
        if level == "rack":
            return [topo.rack_id(i) for i in range(topo.n_racks)]
        if level == "row":
            return [f"row{i}" for i in range(topo.rows)]
        return [level]


def aggregate(server_traces: Sequence[PowerTrace], topology: FacilityTopology,
              site: SiteAssumptions = SiteAssumptions()) -> HierarchyTraces:
    """Partial sums of ``server + p_base`` per rack and row, site IT power, and PUE-scaled facility power.

    Server-level arrays keep GPU power only; every aggregate includes ``p_base``.
    """
    if len(server_traces) != topology.n_servers:
        raise AggregationError(f"{len(server_traces)} traces for {topology.n_servers} servers")
    dts = {t.dt for t in server_traces}
    lengths = {len(t) for t in server_traces}
    if len(dts) != 1 or len(lengths) != 1:
        raise AggregationError("server traces must share dt and length; resample first")
    dt = dts.pop()
    servers = np.stack([t.samples for t in server_traces])
    with_base = servers + site.p_base_w
    n = topology.servers_per_rack
    racks = np.stack([compensated_sum(with_base[j * n:(j + 1) * n]) for j in range(topology.n_racks)])
    per_row = topology.racks_per_row * n
    rows = np.stack([compensated_sum(with_base[i * per_row:(i + 1) * per_row]) for i in range(topology.rows)])
    site_it = compensated_sum(with_base)
    return HierarchyTraces(topology, site, dt, servers, racks, rows, site_it, site.pue * site_it,
                           server_traces[0].start_time)


def resample(trace: PowerTrace, interval: float) -> PowerTrace:
    """Average consecutive blocks of samples to a coarser ``interval`` (energy preserving)."""
    factor = _resample_factor(trace.dt, interval)
    return PowerTrace(_block_mean(trace.samples, factor), trace.dt * factor, trace.start_time)


def _resample_factor(dt: float, interval: float) -> int:
    ratio = interval / dt
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9 * max(1.0, ratio):
        raise ResampleError(f"interval {interval:g}s is not a positive integer multiple of dt={dt:g}s")
    return factor


def _block_mean(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return np.array(x, copy=True)
    n_full = x.shape[-1] // factor
    if n_full == 0:
        raise ResampleError("trace is shorter than one resampling window")
    if n_full * factor != x.shape[-1]:
        warnings.warn(f"dropping {x.shape[-1] - n_full * factor} trailing sample(s) that do not fill a window",
                      stacklevel=3)
    blocks = x[..., : n_full * factor].reshape(x.shape[:-1] + (n_full, factor))
    return blocks.mean(axis=-1)


def resample_hierarchy(h: HierarchyTraces, interval: float) -> HierarchyTraces:
    factor = _resample_factor(h.dt, interval)
    if factor == 1:
        return h
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        parts = [_block_mean(a, factor) for a in (h.servers, h.racks, h.rows, h.site_it, h.facility)]
    if h.servers.shape[-1] % factor:
        warnings.warn("dropping trailing samples that do not fill a resampling window", stacklevel=2)
    return HierarchyTraces(h.topology, h.site, h.dt * factor, *parts, start_time=h.start_time)


@dataclass(frozen=True)
class PlanningMetrics:
    peak_w: float
    average_w: float
    peak_to_average: float
    max_ramp_w: Optional[float]
    ramp_window_s: float
    load_factor: float
    p95_w: float
    cv: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def planning_metrics(trace: PowerTrace, ramp_window: float = 900.0, strict: bool = True) -> PlanningMetrics:
    """Peak, average, PAR, max window-to-window ramp, load factor, P95 and CV.

    A trace shorter than two ramp windows is an error, or with ``strict=False``
    yields ``max_ramp_w=None``.
    """
    y = trace.samples
    mean = float(np.mean(y))
    if mean <= 0:
        raise MetricError("coefficient of variation undefined for a zero-mean trace")
    peak = float(np.max(y))
    w = int(round(ramp_window / trace.dt))
    if w < 1 or y.size < 2 * w:
        if strict:
            raise MetricError(f"trace of {trace.duration:g}s does not cover two {ramp_window:g}s ramp windows")
        ramp = None
    else:
        window_means = y[: (y.size // w) * w].reshape(-1, w).mean(axis=1)
        ramp = float(np.max(np.abs(np.diff(window_means))))
    return PlanningMetrics(
        peak_w=peak,
        average_w=mean,
        peak_to_average=peak / mean,
        max_ramp_w=ramp,
        ramp_window_s=max(w, 1) * trace.dt,
        load_factor=mean / peak,
        p95_w=float(np.percentile(y, 95)),
        cv=float(np.std(y)) / mean,
    )


def coefficient_of_variation(x) -> float:
    y = x.samples if isinstance(x, PowerTrace) else np.asarray(x, float)
    mean = float(np.mean(y))
    if mean == 0:
        raise MetricError("coefficient of variation undefined for a zero-mean trace")
    return float(np.std(y)) / mean


@dataclass
class OversubscriptionResult:
    max_racks: int
    nameplate_racks: Optional[int]
    quantile: float
    row_limit_w: float
    curve: List[dict] = field(default_factory=list)


def oversubscription_search(rack_trace_generator: Callable[[int, int], PowerTrace], row_limit_w: float,
                            quantile: float = 0.95, seeds=5, rack_nameplate_w: Optional[float] = None,
                            max_racks: int = 1000) -> OversubscriptionResult:
    """Add racks one at a time until the row's ``quantile`` power exceeds the limit for some seed.

    ``rack_trace_generator(rack_index, seed)`` returns that rack's power.  The
    curve records, per rack count, the worst-case quantile over the seeds.
    """
    if not row_limit_w > 0:
        raise ValueError("row_limit_w must be positive")
    if not 0 < quantile <= 1:
        raise ValueError("quantile must lie in (0, 1]")
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    nameplate = None if rack_nameplate_w is None else int(math.floor(row_limit_w / rack_nameplate_w + 1e-12))
    rows: Dict[int, np.ndarray] = {}
    comps: Dict[int, np.ndarray] = {}
    curve = []
    best = 0
    for count in range(1, max_racks + 1):
        worst = -math.inf
        for s in seed_list:
            rack = rack_trace_generator(count - 1, s).samples
            if s not in rows:
                rows[s] = np.array(rack, dtype=np.float64, copy=True)
                comps[s] = np.zeros_like(rows[s])
            else:
                if rack.size != rows[s].size:
                    raise AggregationError("rack traces must share one length")
                t = rows[s] + rack
                big = np.abs(rows[s]) >= np.abs(rack)
                comps[s] += np.where(big, (rows[s] - t) + rack, (rack - t) + rows[s])
                rows[s] = t
            worst = max(worst, float(np.percentile(rows[s] + comps[s], 100 * quantile)))
        curve.append({"racks": count, "row_quantile_w": worst})
        if worst > row_limit_w:
            break
        best = count
    else:
        warnings.warn(f"row limit not reached within {max_racks} racks", stacklevel=2)
    if best == 0:
        warnings.warn("a single rack already exceeds the row limit", stacklevel=2)
    return OversubscriptionResult(best, nameplate, quantile, row_limit_w, curve)


# --------------------------------------------------------------------------- #
# scenario documents
# --------------------------------------------------------------------------- #

LEVELS = ("server", "rack", "row", "site", "facility")


@dataclass(frozen=True)
class Scenario:
    """Parsed ``scenario.json``.

    Layout::

        {"topology": {"rows", "racks_per_row", "servers_per_rack"},
         "assignments": [{"bundle": "path.json", "servers": [0, 1, ...]}],
         "traffic": {"mode": "independent|shared_intensity|offset_replay",
                     "params": {...ArrivalSpec..., "thinning", "max_offset_s"}, "seed": 0},
         "site": {"p_base_w": 1000, "pue": 1.3},
         "generation": {"mode": "iid|ar1", "dt_s": 0.25, "horizon_s": 600},
         "output": {"resolution_s": 0.25, "levels": ["site", "facility"], "ramp_window_s": 900},
         "baseline": {"lut": {...}},
         "planning": {"rack_nameplate_w": 26000}}
    """

    topology: FacilityTopology
    traffic: TrafficMode
    site: SiteAssumptions = SiteAssumptions()
    seed: Optional[int] = None
    mode: Optional[str] = None
    dt: float = 0.25
    horizon: float = 600.0
    resolution: Optional[float] = None
    levels: tuple = ("site", "facility")
    ramp_window: float = 900.0
    assignments: tuple = ()
    lut: Optional[dict] = None
    rack_nameplate_w: Optional[float] = None
    base_dir: str = "."

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str = ".") -> "Scenario":
        try:
            topo = doc.get("topology", {})
            topology = FacilityTopology(int(topo.get("rows", 1)), int(topo.get("racks_per_row", 1)),
                                        int(topo.get("servers_per_rack", 1)))
            tr = doc.get("traffic", {})
            params = dict(tr.get("params", {}))
            thinning = params.pop("thinning", None)
            max_off = params.pop("max_offset_s", None)
            traffic = TrafficMode(
                kind=tr.get("mode", "independent"),
                spec=ArrivalSpec.from_dict(params),
                thinning=None if thinning is None else tuple(float(p) for p in thinning),
                max_offset_s=None if max_off is None else float(max_off),
            )
            st = doc.get("site", {})
            site = SiteAssumptions(float(st.get("p_base_w", 1000.0)), float(st.get("pue", 1.3)))
            gen = doc.get("generation", {})
            out = doc.get("output", {})
            levels = tuple(out.get("levels", ["site", "facility"]))
            bad = [lv for lv in levels if lv not in LEVELS]
            if bad:
                raise FormatError(f"unknown output level(s) {bad}; expected a subset of {list(LEVELS)}")
            mode = gen.get("mode")
            if mode is not None and mode not in ("iid", "ar1"):
                raise FormatError(f"generation.mode must be iid or ar1, got {mode!r}")
            assignments = tuple((a["bundle"], tuple(int(s) for s in a["servers"])) for a in doc.get("assignments", []))
            return cls(
                topology=topology,
                traffic=traffic,
                site=site,
                seed=tr.get("seed"),
                mode=mode,
                dt=float(gen.get("dt_s", 0.25)),
                horizon=float(gen.get("horizon_s", 600.0)),
                resolution=None if out.get("resolution_s") is None else float(out["resolution_s"]),
                levels=levels,
                ramp_window=float(out.get("ramp_window_s", 900.0)),
                assignments=assignments,
                lut=doc.get("baseline", {}).get("lut"),
                rack_nameplate_w=doc.get("planning", {}).get("rack_nameplate_w"),
                base_dir=base_dir,
            )
        except FormatError:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise FormatError(f"invalid scenario: {exc}") from None


def load_scenario(path) -> Scenario:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise FormatError(f"{path}: cannot read scenario ({exc.strerror})") from None
    except ValueError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    return Scenario.from_dict(doc, os.path.dirname(os.path.abspath(path)))


def generate_server_traces(bundles: Sequence, schedules: Sequence[ArrivalSchedule], horizon: float,
                           seed: int, mode: Optional[str] = None, dt: Optional[float] = None,
                           threads: int = 1, index_offset: int = 0) -> List[PowerTrace]:
    """Per-server generation sharing classifier passes across servers with the same bundle.

    Server ``i`` draws from streams keyed by ``(seed, index_offset + i)``, so the
    output does not depend on ``threads``.
    """
    from powertrace.classifier import predict_state_probs_batch
    from powertrace.generator import power_from_probs, server_features, stage_seeds

    n = len(schedules)
    if len(bundles) != n:
        raise ValueError("one bundle per schedule is required")
    streams = [stage_seeds(seed, index_offset + i) for i in range(n)]

    def feats(i):
        return server_features(bundles[i], schedules[i], horizon, streams[i][0], dt)

    workers = max(1, int(threads))
    if workers > 1 and n > 1:
        with ThreadPoolExecutor(workers) as pool:
            features = list(pool.map(feats, range(n)))
    else:
        features = [feats(i) for i in range(n)]

    probs: List[Optional[np.ndarray]] = [None] * n
    groups: Dict[int, List[int]] = {}
    for i, b in enumerate(bundles):
        groups.setdefault(id(b), []).append(i)
    for members in groups.values():
        model = bundles[members[0]].classifier
        for i, p in zip(members, predict_state_probs_batch(model, [features[i] for i in members])):
            probs[i] = p

    def power(i):
        b = bundles[i]
        return power_from_probs(b, probs[i], mode, streams[i][1], streams[i][2], b.dt if dt is None else dt)

    if workers > 1 and n > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(power, range(n)))
    return [power(i) for i in range(n)]


def resolve_bundles(scenario: Scenario, default_bundle, loader) -> list:
    """Bundle per server: scenario assignments first, then the default."""
    n = scenario.topology.n_servers
    out = [default_bundle] * n
    cache = {}
    for path, servers in scenario.assignments:
        full = path if os.path.isabs(path) else os.path.join(scenario.base_dir, path)
        if full not in cache:
            cache[full] = loader(full)
        for s in servers:
            if not 0 <= s < n:
                raise FormatError(f"assignment names server {s}, but the topology has {n}")
            out[s] = cache[full]
    if any(b is None for b in out):
        raise FormatError("some servers have no bundle; pass --bundle or cover them in assignments")
    return out


def run_scenario(scenario: Scenario, bundles: Sequence, seed: Optional[int] = None, threads: int = 1,
                 mode: Optional[str] = None) -> HierarchyTraces:
    """Schedules -> per-server traces -> hierarchy, at the generation dt."""
    seed = scenario.seed if seed is None else seed
    seed = 0 if seed is None else int(seed)
    schedules = build_schedules(scenario.topology, scenario.traffic, seed, scenario.horizon)
    traces = generate_server_traces(bundles, schedules, scenario.horizon, seed, mode or scenario.mode,
                                    scenario.dt, threads)
    return aggregate(traces, scenario.topology, scenario.site)


def scenario_rack_generator(scenario: Scenario, bundles: Sequence, mode: Optional[str] = None) -> Callable[[int, int], PowerTrace]:
    """Rack power (servers + p_base) for a growing row: rack ``j`` under seed ``s``.

    Rack ``j`` reuses the scenario's per-rack bundle assignment cyclically and
    draws traffic from streams keyed by ``(s, j)``.
    """
    n = scenario.topology.servers_per_rack
    rack_topo = FacilityTopology(1, 1, n)
    n_racks = scenario.topology.n_racks

    def gen(rack_index: int, seed: int) -> PowerTrace:
        key = np.random.SeedSequence([int(seed), int(rack_index)]).generate_state(1)[0]
        schedules = build_schedules(rack_topo, scenario.traffic, int(key), scenario.horizon)
        slot = rack_index % n_racks
        rb = list(bundles[slot * n:(slot + 1) * n])
        traces = generate_server_traces(rb, schedules, scenario.horizon, int(key), mode or scenario.mode, scenario.dt)
        total = compensated_sum([t.samples + scenario.site.p_base_w for t in traces])
        return PowerTrace(total, traces[0].dt)

    return gen
