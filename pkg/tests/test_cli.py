import json
import subprocess
import sys

import numpy as np
import pytest

import synthetic_system as S
from powertrace import io as pio
from powertrace.cli import run
from powertrace.types import PowerTrace

# scenario horizons deliberately cut off requests still in flight
pytestmark = pytest.mark.filterwarnings("ignore:horizon .* ends before:UserWarning")


def ok(*argv):
    code = run([str(a) for a in argv])
    assert code == 0, argv
    return code


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Measured data on disk plus a bundle built through the offline commands."""
    d = tmp_path_factory.mktemp("cli")
    runs = [S.measure(r, 10 + j) for r in (0.25, 1.0) for j in range(2)]
    pairs = []
    for i, r in enumerate(runs):
        pio.write_power_trace(r.trace, d / f"trace{i}.csv")
        pio.write_request_log(r.records, d / f"req{i}.csv")
        pairs += ["--pair", d / f"trace{i}.csv", d / f"req{i}.csv"]
    ok("fit-surrogate", *sum((["--requests", d / f"req{i}.csv"] for i in range(4)), []), "--out", d / "sur.json")
    ok("fit-states", *sum((["--trace", d / f"trace{i}.csv"] for i in range(4)), []), "--k-max", 6,
       "--out", d / "cat.json", "--bic-out", d / "bic.csv")
    ok("train-classifier", *pairs, "--catalog", d / "cat.json", "--epochs", 3, "--hidden-size", 8,
       "--chunk-len", 128, "--out", d / "clf.json", "--report", d / "report.json")
    ok("build-bundle", "--catalog", d / "cat.json", "--classifier", d / "clf.json", "--surrogate", d / "sur.json",
       "--hardware", "H100", "--model", "synthetic", "--out", d / "bundle.json")
    pio.write_schedule(runs[0].schedule, d / "sched.csv")
    scenario = {
        "topology": {"rows": 2, "racks_per_row": 2, "servers_per_rack": 2},
        "traffic": {"mode": "independent", "params": {"kind": "poisson", "rate": 0.5,
                                                       "n_in": {"mu": 6.0, "sigma": 0.6},
                                                       "n_out": {"mu": 5.2, "sigma": 0.5}}, "seed": 1},
        "generation": {"dt_s": 0.25, "horizon_s": 120},
        "output": {"resolution_s": 1.0, "levels": ["server", "rack", "row", "site", "facility"],
                   "ramp_window_s": 30},
        "baseline": {"lut": {"nameplate_w": 700, "overhead_w": 0}},
    }
    (d / "scenario.json").write_text(json.dumps(scenario))
    return d


def test_offline_artifacts(workdir):
    doc = json.loads((workdir / "bundle.json").read_text())
    assert doc["format_version"] == 1 and doc["config"]["hardware"] == "h100"
    assert (workdir / "bic.csv").read_text().startswith("K,bic\n")
    assert "loss_curve" in json.loads((workdir / "report.json").read_text())


def test_generate_scenario_outputs(workdir):
    out = workdir / "gen"
    ok("generate", "--bundle", workdir / "bundle.json", "--scenario", workdir / "scenario.json", "--out", out,
       "--threads", 2)
    for level in ("server", "rack", "row", "site", "facility"):
        assert (out / f"{level}.csv").exists()
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics["levels"]) == {"server", "rack", "row", "site", "facility"}
    assert metrics["dt_s"] == 1.0
    site = pio.read_power_trace(out / "site.csv")
    fac = pio.read_power_trace(out / "facility.csv")
    np.testing.assert_allclose(fac.samples, 1.3 * site.samples, rtol=1e-15)
    assert len(site) == 120
    header = (out / "server.csv").read_text().splitlines()[0]
    assert header.startswith("timestamp_s,row0_rack0_srv0,")


def test_generate_from_schedule(workdir):
    out = workdir / "one"
    ok("generate", "--bundle", workdir / "bundle.json", "--schedule", workdir / "sched.csv", "--horizon", 200,
       "--mode", "ar1", "--out", out)
    assert len(pio.read_power_trace(out / "trace.csv")) == 800


def test_evaluate_identical_files(workdir, capsys):
    ok("evaluate", "--syn", workdir / "trace0.csv", "--meas", workdir / "trace0.csv", "--out-csv", workdir / "ev.csv",
       "--config", "h100", "--scenario-name", "self")
    rep = json.loads(capsys.readouterr().out)
    assert (rep["ks"], rep["acf_r2"], rep["nrmse"], rep["delta_energy"]) == (0.0, 1.0, 0.0, 0.0)
    rows = (workdir / "ev.csv").read_text().splitlines()
    assert rows[0] == "config,scenario,metric,value" and rows[1] == "h100,self,ks,0.0"


def test_evaluate_several_seeds_uses_median(workdir, tmp_path):
    meas = pio.read_power_trace(workdir / "trace0.csv")
    for i, f in enumerate([0.9, 1.05, 1.2]):
        pio.write_power_trace(PowerTrace(meas.samples * f, meas.dt), tmp_path / f"s{i}.csv")
    ok("evaluate", *sum((["--syn", tmp_path / f"s{i}.csv"] for i in range(3)), []), "--meas", workdir / "trace0.csv",
       "--out-json", tmp_path / "r.json")
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["n_seeds"] == 3 and rep["delta_energy"] == pytest.approx(0.1, abs=1e-9)


def test_baselines(workdir):
    ok("baseline", "--kind", "tdp", "--nameplate-w", 700, "--horizon", 10, "--out", workdir / "tdp.csv")
    assert set(pio.read_power_trace(workdir / "tdp.csv").samples) == {700.0}
    ok("baseline", "--kind", "mean", "--train", workdir / "trace0.csv", "--horizon", 10, "--out", workdir / "mean.csv")
    ok("baseline", "--kind", "lut", "--bundle", workdir / "bundle.json", "--schedule", workdir / "sched.csv",
       "--scenario", workdir / "scenario.json", "--horizon", 200, "--out", workdir / "lut.csv")
    assert len(np.unique(pio.read_power_trace(workdir / "lut.csv").samples)) <= 4


def test_aggregate_and_metrics(workdir, capsys):
    out = workdir / "agg"
    ok("aggregate", "--trace", workdir / "tdp.csv", "--trace", workdir / "tdp.csv", "--levels", "rack", "facility",
       "--ramp-window", 1, "--out", out)
    fac = pio.read_power_trace(out / "facility.csv")
    np.testing.assert_allclose(fac.samples, 1.3 * 2 * 1700.0)
    ok("metrics", "--trace", workdir / "tdp.csv", "--ramp-window", 2)
    text = capsys.readouterr().out
    assert "tdp.csv,peak_to_average,1.0" in text and "tdp.csv,max_ramp_w,0.0" in text


def test_plan_oversub(workdir):
    out = workdir / "plan"
    ok("plan-oversub", "--scenario", workdir / "scenario.json", "--bundle", workdir / "bundle.json",
       "--row-limit-w", 20_000, "--seeds", 2, "--rack-nameplate-w", 2 * (700 + 1000), "--out", out)
    summary = json.loads((out / "oversub.json").read_text())
    assert summary["nameplate_racks"] == 5
    assert summary["max_racks"] >= summary["nameplate_racks"]
    assert (out / "oversub_curve.csv").read_text().startswith("racks,row_quantile_w\n")


def test_user_errors_exit_1(workdir, capsys):
    assert run(["nonsense"]) == 1
    assert run(["generate", "--out", str(workdir / "x")]) == 1
    assert run(["evaluate", "--syn", str(workdir / "missing.csv"), "--meas", str(workdir / "trace0.csv")]) == 1
    err = capsys.readouterr().err
    assert "missing.csv" in err.splitlines()[-1]
    bad = workdir / "bad.json"
    bad.write_text("{\"format_version\": 7}")
    assert run(["generate", "--bundle", str(bad), "--schedule", str(workdir / "sched.csv"), "--horizon", "5",
                "--out", str(workdir / "x")]) == 1


def test_every_subcommand_has_help():
    from powertrace.cli import build_parser

    sub = build_parser()._subparsers._group_actions[0].choices
    assert len(sub) == 10
    for name, parser in sub.items():
        assert parser.format_help().strip(), name


def test_console_entry_point(workdir):
    proc = subprocess.run([sys.executable, "-m", "powertrace", "metrics", "--trace", str(workdir / "tdp.csv"),
                           "--ramp-window", "2"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("trace,metric,value")
    proc = subprocess.run([sys.executable, "-m", "powertrace", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr
