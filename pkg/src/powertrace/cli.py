"""Command-line interface: ``powertrace <command> [flags]``.

Offline commands fit the three model parts and pack them into a bundle;
online commands generate, aggregate, evaluate and plan.  Every random draw is
controlled by ``--seed`` and identical inputs give byte-identical outputs.

Exit status: 0 on success, 1 on a user or configuration error (one-line
diagnostic on stderr), 2 on an internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from typing import List, Optional

import numpy as np

from powertrace import io as pio
from powertrace.baselines import LutSpec, lut_trace, mean_trace, tdp_trace
from powertrace.bundle import ModelBundle, load_bundle, save_bundle
from powertrace.classifier import ClassifierModel, TrainingConfig, train_classifier
from powertrace.errors import FormatError, MetricError, PowerTraceError
from powertrace.facility import (
    LEVELS,
    FacilityTopology,
    HierarchyTraces,
    SiteAssumptions,
    aggregate,
    load_scenario,
    oversubscription_search,
    planning_metrics,
    resample,
    resample_hierarchy,
    resolve_bundles,
    run_scenario,
    scenario_rack_generator,
)
from powertrace.fidelity import DEFAULT_MAX_LAG, FidelityReport, evaluate_traces
from powertrace.generator import MODES, GenerationRequest, generate_server_trace, stage_seeds
from powertrace.states import StateCatalog, assign_states, bic_curve, build_catalog
from powertrace.types import ServingConfig
from powertrace.workload import LatencySurrogate, QueueConfig, fit_latency_surrogate, log_features, sample_lifetimes

log = logging.getLogger("powertrace")

METRIC_NAMES = ("ks", "acf_r2", "nrmse", "delta_energy")


class UsageError(Exception):
    """Bad flags or inconsistent inputs detected by the CLI itself."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------- #
# small file helpers
# --------------------------------------------------------------------------- #

def _write_json(obj, path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _read_json(path, what: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise FormatError(f"{path}: cannot read {what} ({exc.strerror})") from None
    except ValueError as exc:
        raise FormatError(f"{path}: invalid {what} JSON ({exc})") from None


def _write_rows(path, header, rows) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _json_safe(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


def _threads(value: Optional[int]) -> int:
    return value if value else (os.cpu_count() or 1)


# --------------------------------------------------------------------------- #
# offline commands
# --------------------------------------------------------------------------- #

def cmd_fit_surrogate(args) -> int:
    records = [r for path in args.requests for r in pio.read_request_log(path)]
    s = fit_latency_surrogate(records)
    _write_json(s.to_dict(), args.out)
    log.info("surrogate fitted on %d requests", len(records))
    return 0


def cmd_fit_states(args) -> int:
    traces = [pio.read_power_trace(p) for p in args.trace]
    if args.k_min > args.k_max:
        raise UsageError("--k-min must not exceed --k-max")
    catalog = build_catalog(traces, (args.k_min, args.k_max), seed=args.seed, k=args.k)
    _write_json(catalog.to_dict(), args.out)
    if args.bic_out:
        pooled = np.concatenate([t.samples for t in traces])
        curve = bic_curve(pooled, args.k_min, args.k_max, args.seed)
        _write_rows(args.bic_out, ["K", "bic"], [(k, float(curve[k][0])) for k in sorted(curve)])
    return 0


def _training_set(pairs, catalog: StateCatalog, batch_size: int):
    data = []
    for trace_path, log_path in pairs:
        trace = pio.read_power_trace(trace_path)
        records = pio.read_request_log(log_path)
        feats = log_features(records, trace.dt, len(trace), trace.start_time, batch_size)
        data.append((feats, assign_states(trace, catalog)))
    return data


def cmd_train_classifier(args) -> int:
    catalog = StateCatalog.from_dict(_read_json(args.catalog, "catalog"))
    data = _training_set(args.pair, catalog, args.queue_batch)
    hyper = TrainingConfig(epochs=args.epochs, lr=args.lr, chunk_len=args.chunk_len, batch_size=args.batch_size,
                           hidden_size=args.hidden_size, patience=args.patience, val_fraction=args.val_fraction,
                           seed=args.seed)
    model, report = train_classifier(data, catalog.K, hyper)
    _write_json(model.to_dict(), args.out)
    if args.report:
        _write_json(_json_safe(report.to_dict()), args.report)
    log.info("trained %d epochs, best validation accuracy %.3f", report.epochs_run, report.val_accuracy)
    return 0


def cmd_build_bundle(args) -> int:
    bundle = ModelBundle(
        config=ServingConfig(args.hardware, args.model, args.tensor_parallel, args.moe),
        catalog=StateCatalog.from_dict(_read_json(args.catalog, "catalog")),
        classifier=ClassifierModel.from_dict(_read_json(args.classifier, "classifier")),
        surrogate=LatencySurrogate.from_dict(_read_json(args.surrogate, "surrogate")),
        dt=args.dt,
        batch_size=args.queue_batch,
    )
    save_bundle(bundle, args.out)
    return 0


# --------------------------------------------------------------------------- #
# online commands
# --------------------------------------------------------------------------- #

def _level_metrics(h: HierarchyTraces, level: str, ramp_window: float) -> dict:
    out = {}
    ids = h.level_ids(level)
    for i, name in enumerate(ids):
        try:
            out[name] = planning_metrics(h.trace(level, i), ramp_window, strict=False).to_dict()
        except MetricError as exc:
            log.warning("%s %s: %s", level, name, exc)
            out[name] = None
    return out


def write_hierarchy(h: HierarchyTraces, levels, out_dir, ramp_window: float, extra: Optional[dict] = None) -> None:
    """One CSV per level plus metrics.json; multi-entity levels are written wide."""
    os.makedirs(out_dir, exist_ok=True)
    metrics = {}
    for level in levels:
        if level in ("site", "facility"):
            pio.write_power_trace(h.trace(level), os.path.join(out_dir, f"{level}.csv"))
        else:
            arr = {"server": h.servers, "rack": h.racks, "row": h.rows}[level]
            ts = h.start_time + np.arange(arr.shape[1]) * h.dt
            pio.write_wide_traces(os.path.join(out_dir, f"{level}.csv"), ts, dict(zip(h.level_ids(level), arr)))
        metrics[level] = _level_metrics(h, level, ramp_window)
    doc = {"dt_s": h.dt, "ramp_window_s": ramp_window, "levels": metrics}
    doc.update(extra or {})
    _write_json(doc, os.path.join(out_dir, "metrics.json"))


def cmd_generate(args) -> int:
    if args.mode is not None and args.mode not in MODES:
        raise UsageError(f"--mode must be one of {MODES}")
    if (args.scenario is None) == (args.schedule is None):
        raise UsageError("give exactly one of --scenario or --schedule")
    if args.scenario is not None:
        scenario = load_scenario(args.scenario)
        default = load_bundle(args.bundle) if args.bundle else None
        bundles = resolve_bundles(scenario, default, load_bundle)
        if args.dt is not None or args.horizon is not None:
            from dataclasses import replace
            scenario = replace(scenario, dt=args.dt if args.dt is not None else scenario.dt,
                               horizon=args.horizon if args.horizon is not None else scenario.horizon)
        seed = args.seed if args.seed is not None else (scenario.seed or 0)
        h = run_scenario(scenario, bundles, seed, _threads(args.threads), args.mode)
        resolution = args.resolution or scenario.resolution
        if resolution:
            h = resample_hierarchy(h, resolution)
        write_hierarchy(h, scenario.levels, args.out, scenario.ramp_window, {"seed": seed})
        return 0

    if args.bundle is None:
        raise UsageError("--schedule needs --bundle")
    if args.horizon is None:
        raise UsageError("--schedule needs --horizon")
    bundle = load_bundle(args.bundle)
    schedule = pio.read_schedule(args.schedule)
    trace = generate_server_trace(GenerationRequest(bundle, schedule, args.horizon, args.mode, args.seed or 0, args.dt))
    if args.resolution:
        trace = resample(trace, args.resolution)
    pio.write_power_trace(trace, os.path.join(args.out, "trace.csv"))
    return 0


def cmd_aggregate(args) -> int:
    traces = [pio.read_power_trace(p) for p in args.trace]
    topo = FacilityTopology(args.rows, args.racks_per_row, args.servers_per_rack)
    h = aggregate(traces, topo, SiteAssumptions(args.p_base_w, args.pue))
    if args.resolution:
        h = resample_hierarchy(h, args.resolution)
    write_hierarchy(h, args.levels, args.out, args.ramp_window)
    return 0


def cmd_evaluate(args) -> int:
    meas = pio.read_power_trace(args.meas)
    rows = []
    for i, path in enumerate(args.syn):
        rep = evaluate_traces(pio.read_power_trace(path), meas, args.max_lag)
        rows.append({"seed": i, "file": os.path.basename(path), "ks": rep.ks, "acf_r2": rep.acf_r2,
                     "nrmse": rep.nrmse, "delta_energy": rep.delta_energy})
    if len(rows) == 1:
        r = rows[0]
        report = FidelityReport(r["ks"], r["acf_r2"], r["nrmse"], r["delta_energy"], per_seed=rows)
    else:
        med = lambda key, f=lambda v: v: float(np.median([f(r[key]) for r in rows]))  # noqa: E731
        report = FidelityReport(med("ks"), med("acf_r2"), med("nrmse"), med("delta_energy", abs),
                                n_seeds=len(rows), per_seed=rows)
    doc = report.to_dict()
    if args.out_json:
        _write_json(doc, args.out_json)
    else:
        sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if args.out_csv:
        _write_rows(args.out_csv, ["config", "scenario", "metric", "value"],
                    [(args.config, args.scenario_name, m, float(getattr(report, m))) for m in METRIC_NAMES])
    return 0


def _lut_from(args) -> LutSpec:
    if args.lut:
        return LutSpec.from_dict(_read_json(args.lut, "LUT"))
    if args.scenario:
        frag = _read_json(args.scenario, "scenario").get("baseline", {}).get("lut")
        if frag is None:
            raise UsageError(f"{args.scenario} has no baseline.lut section")
        return LutSpec.from_dict(frag)
    if args.nameplate_w is None:
        raise UsageError("lut baseline needs --lut, --scenario or --nameplate-w")
    return LutSpec(args.nameplate_w)


def cmd_baseline(args) -> int:
    if args.horizon is None:
        raise UsageError("--horizon is required")
    dt = args.dt or 0.25
    n = int(math.ceil(args.horizon / dt - 1e-9))
    if args.kind == "tdp":
        if args.nameplate_w is None:
            raise UsageError("tdp baseline needs --nameplate-w")
        trace = tdp_trace(args.nameplate_w, n, dt)
    elif args.kind == "mean":
        if not args.train:
            raise UsageError("mean baseline needs at least one --train trace")
        trace = mean_trace([pio.read_power_trace(p) for p in args.train], n, dt)
    else:
        if args.bundle is None or args.schedule is None:
            raise UsageError("lut baseline needs --bundle and --schedule")
        bundle = load_bundle(args.bundle)
        schedule = pio.read_schedule(args.schedule)
        # same lifetime stream as generate, so both see one workload realization
        lifetimes = sample_lifetimes(schedule, bundle.surrogate, stage_seeds(args.seed, 0)[0])
        trace = lut_trace(schedule, lifetimes, QueueConfig(bundle.batch_size, dt), _lut_from(args), n)
    if args.resolution:
        trace = resample(trace, args.resolution)
    pio.write_power_trace(trace, args.out)
    return 0


def cmd_plan_oversub(args) -> int:
    scenario = load_scenario(args.scenario)
    default = load_bundle(args.bundle) if args.bundle else None
    bundles = resolve_bundles(scenario, default, load_bundle)
    nameplate = args.rack_nameplate_w if args.rack_nameplate_w is not None else scenario.rack_nameplate_w
    gen = scenario_rack_generator(scenario, bundles, args.mode)
    seeds = [args.seed + i for i in range(args.seeds)]
    res = oversubscription_search(gen, args.row_limit_w, args.quantile, seeds, nameplate, args.max_racks)
    os.makedirs(args.out, exist_ok=True)
    _write_rows(os.path.join(args.out, "oversub_curve.csv"), ["racks", "row_quantile_w"],
                [(c["racks"], c["row_quantile_w"]) for c in res.curve])
    _write_json({"max_racks": res.max_racks, "nameplate_racks": res.nameplate_racks, "quantile": res.quantile,
                 "row_limit_w": res.row_limit_w, "seeds": seeds}, os.path.join(args.out, "oversub.json"))
    sys.stdout.write(f"max_racks={res.max_racks} nameplate_racks={res.nameplate_racks}\n")
    return 0


def cmd_metrics(args) -> int:
    rows = []
    for path in args.trace:
        trace = pio.read_power_trace(path)
        if args.resolution:
            trace = resample(trace, args.resolution)
        m = planning_metrics(trace, args.ramp_window, strict=False).to_dict()
        rows.extend((os.path.basename(path), k, v) for k, v in m.items())
    if args.out:
        _write_rows(args.out, ["trace", "metric", "value"], rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["trace", "metric", "value"])
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return 0


# --------------------------------------------------------------------------- #
# parser
# --------------------------------------------------------------------------- #

TRACE_HELP = "trace CSV with header timestamp_s,power_w"
REQUESTS_HELP = "request log CSV with header arrival_s,n_in,n_out,ttft_s,tbt_s"
SCHEDULE_HELP = "schedule CSV with header arrival_s,n_in,n_out"
SCENARIO_HELP = ("scenario JSON: {topology: {rows, racks_per_row, servers_per_rack}, assignments: "
                 "[{bundle, servers}], traffic: {mode, params, seed}, site: {p_base_w, pue}, "
                 "generation: {mode, dt_s, horizon_s}, output: {resolution_s, levels, ramp_window_s}, "
                 "baseline: {lut}, planning: {rack_nameplate_w}}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="powertrace", description="Learn server power models from LLM-inference traces and "
                                                "synthesize facility-scale power profiles.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("fit-surrogate", cmd_fit_surrogate, "Fit the TTFT/TBT latency surrogate from request logs.")
    sp.add_argument("--requests", action="append", required=True, help=REQUESTS_HELP + " (repeatable)")
    sp.add_argument("--out", required=True, help="output surrogate JSON")

    sp = add("fit-states", cmd_fit_states, "Fit the power-state catalog (GMM with BIC-selected K, per-state AR(1)).")
    sp.add_argument("--trace", action="append", required=True, help=TRACE_HELP + " (repeatable; samples are pooled)")
    sp.add_argument("--k-min", type=int, default=2)
    sp.add_argument("--k-max", type=int, default=16)
    sp.add_argument("--k", type=int, default=None, help="fix K instead of selecting it by BIC")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output catalog JSON")
    sp.add_argument("--bic-out", help="optional CSV of K,bic")

    sp = add("train-classifier", cmd_train_classifier,
             "Train the bidirectional GRU state classifier on aligned (trace, request log) pairs.")
    sp.add_argument("--pair", nargs=2, action="append", required=True, metavar=("TRACE", "REQUESTS"),
                    help="a measured trace and its request log (repeatable)")
    sp.add_argument("--catalog", required=True, help="catalog JSON from fit-states")
    sp.add_argument("--queue-batch", type=int, default=64, help="serving batch slots used to replay the log")
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--chunk-len", type=int, default=512)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--hidden-size", type=int, default=64)
    sp.add_argument("--patience", type=int, default=10)
    sp.add_argument("--val-fraction", type=float, default=0.15)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output classifier JSON")
    sp.add_argument("--report", help="optional training report JSON")

    sp = add("build-bundle", cmd_build_bundle, "Pack catalog, classifier and surrogate into one bundle JSON.")
    sp.add_argument("--catalog", required=True)
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--surrogate", required=True)
    sp.add_argument("--hardware", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--tensor-parallel", type=int, default=1)
    sp.add_argument("--moe", action="store_true", help="mixture-of-experts model (generation defaults to ar1)")
    sp.add_argument("--dt", type=float, default=0.25)
    sp.add_argument("--queue-batch", type=int, default=64)
    sp.add_argument("--out", required=True)

    sp = add("generate", cmd_generate,
             "Generate synthetic power for a facility scenario (per-level CSVs + metrics.json) "
             "or for one server schedule (trace.csv).")
    sp.add_argument("--bundle", help="default bundle JSON (scenario assignments override it per server)")
    sp.add_argument("--scenario", help=SCENARIO_HELP)
    sp.add_argument("--schedule", help=SCHEDULE_HELP)
    sp.add_argument("--horizon", type=float, help="seconds to simulate")
    sp.add_argument("--mode", choices=MODES, help="power sampling mode (default: ar1 for MoE bundles, else iid)")
    sp.add_argument("--seed", type=int, default=None, help="master seed (default: scenario traffic.seed, else 0)")
    sp.add_argument("--dt", type=float, help="generation timestep in seconds")
    sp.add_argument("--resolution", type=float, help="resample outputs to this interval (multiple of dt)")
    sp.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("aggregate", cmd_aggregate, "Aggregate server traces into rack, row, site and facility power.")
    sp.add_argument("--trace", action="append", required=True,
                    help=TRACE_HELP + " (repeatable; ordered by row, rack, server)")
    sp.add_argument("--rows", type=int, default=1)
    sp.add_argument("--racks-per-row", type=int, default=1)
    sp.add_argument("--servers-per-rack", type=int, default=None, help="default: all traces in one rack")
    sp.add_argument("--p-base-w", type=float, default=1000.0)
    sp.add_argument("--pue", type=float, default=1.3)
    sp.add_argument("--resolution", type=float)
    sp.add_argument("--ramp-window", type=float, default=900.0)
    sp.add_argument("--levels", nargs="+", choices=LEVELS, default=["site", "facility"])
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("evaluate", cmd_evaluate,
             "Compare synthetic traces with a measured trace (KS, ACF R^2, NRMSE, energy error). "
             "Several --syn files are summarized by the median, with median |delta_energy|.")
    sp.add_argument("--syn", action="append", required=True, help=TRACE_HELP + " (repeatable, one per seed)")
    sp.add_argument("--meas", required=True, help=TRACE_HELP)
    sp.add_argument("--max-lag", type=int, default=DEFAULT_MAX_LAG)
    sp.add_argument("--config", default="", help="label for the CSV config column")
    sp.add_argument("--scenario-name", default="", help="label for the CSV scenario column")
    sp.add_argument("--out-json", help="write the report here instead of stdout")
    sp.add_argument("--out-csv", help="flat CSV: config,scenario,metric,value")

    sp = add("baseline", cmd_baseline, "Write a comparison trace: nameplate TDP, training mean, or phase LUT.")
    sp.add_argument("--kind", choices=("tdp", "mean", "lut"), required=True)
    sp.add_argument("--horizon", type=float, help="seconds")
    sp.add_argument("--dt", type=float)
    sp.add_argument("--nameplate-w", type=float)
    sp.add_argument("--train", action="append", help=TRACE_HELP + " (mean baseline; repeatable)")
    sp.add_argument("--bundle", help="bundle supplying the latency surrogate and batch size (lut)")
    sp.add_argument("--schedule", help=SCHEDULE_HELP + " (lut)")
    sp.add_argument("--lut", help="LUT JSON: {nameplate_w, ratios: {prompt, decode, mixed, idle}, overhead_w, "
                                  "mixed_penalty}")
    sp.add_argument("--scenario", help="read the LUT from this scenario's baseline.lut")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--resolution", type=float)
    sp.add_argument("--out", required=True, help="output trace CSV")

    sp = add("plan-oversub", cmd_plan_oversub,
             "Add racks to a row until the row power quantile exceeds the limit for some seed.")
    sp.add_argument("--scenario", required=True, help=SCENARIO_HELP + "; one rack = servers_per_rack servers")
    sp.add_argument("--bundle")
    sp.add_argument("--row-limit-w", type=float, required=True)
    sp.add_argument("--quantile", type=float, default=0.95)
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0, help="first seed; seeds are seed..seed+seeds-1")
    sp.add_argument("--rack-nameplate-w", type=float, help="for the nameplate comparison count")
    sp.add_argument("--max-racks", type=int, default=1000)
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--out", required=True, help="output directory (oversub_curve.csv, oversub.json)")

    sp = add("metrics", cmd_metrics, "Planning metrics of traces as tidy CSV (trace,metric,value).")
    sp.add_argument("--trace", action="append", required=True, help=TRACE_HELP + " (repeatable)")
    sp.add_argument("--ramp-window", type=float, default=900.0)
    sp.add_argument("--resolution", type=float)
    sp.add_argument("--out", help="output CSV (default stdout)")
    return p


def _configure_logging() -> None:
    level = os.environ.get("POWERTRACE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "command", None) == "aggregate" and args.servers_per_rack is None:
        args.servers_per_rack = max(1, len(args.trace) // (args.rows * args.racks_per_row))
    try:
        return args.func(args)
    except (PowerTraceError, UsageError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split())
        sys.stderr.write(f"powertrace {args.command}: error: {msg}\n")
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        sys.stderr.write(f"powertrace {args.command}: internal error: {type(exc).__name__}: {exc}\n")
        return 2


def main(argv: Optional[List[str]] = None) -> None:
    _configure_logging()
    sys.exit(run(argv))
