import numpy as np
import pytest

from powertrace.baselines import PHASES, LutSpec, lut_phases, lut_trace, mean_trace, tdp_trace
from powertrace.fidelity import delta_energy
from powertrace.types import ArrivalSchedule, Lifetimes, PowerTrace
from powertrace.workload import QueueConfig

Q = QueueConfig(64, 0.25)


def test_tdp_is_constant():
    tr = tdp_trace(3810.0, 100)
    assert np.all(tr.samples == 3810.0) and tr.samples.var() == 0.0
    with pytest.raises(ValueError):
        tdp_trace(0.0, 10)


def test_mean_baseline():
    assert np.all(mean_trace([np.full(10, 7.0)], 5).samples == 7.0)
    y = PowerTrace(np.random.default_rng(0).uniform(100, 300, 400))
    assert abs(delta_energy(mean_trace([y], len(y)), y)) < 1e-12
    held = PowerTrace(y.samples + 50.0)
    assert delta_energy(mean_trace([y], len(held)), held) < 0


def test_empty_schedule_is_idle():
    lut = LutSpec(1000.0, overhead_w=50.0)
    tr = lut_trace(ArrivalSchedule.empty(), Lifetimes(np.zeros(0)), Q, lut, 12)
    assert np.all(tr.samples == 1000.0 * 0.12 + 50.0)


def test_single_request_timeline():
    lut = LutSpec(1000.0, mixed_penalty=1.0)
    sched = ArrivalSchedule.from_requests([(0.0, 100, 4)])
    lt = Lifetimes(np.array([0.5]), np.array([0.25]))  # prefill [0, 0.5), decode [0.5, 1.5)
    tr = lut_trace(sched, lt, Q, lut, 8)
    expected = [900, 900, 500, 500, 500, 500, 120, 120]
    np.testing.assert_allclose(tr.samples, expected)


def test_unit_ratios_are_flat_while_active():
    lut = LutSpec(800.0, ratios={p: 1.0 for p in PHASES}, overhead_w=100.0)
    sched = ArrivalSchedule.from_requests([(0.0, 10, 3), (0.3, 10, 8)])
    lt = Lifetimes(np.array([0.4, 0.2]), np.array([0.1, 0.1]))
    tr = lut_trace(sched, lt, Q, lut, 20)
    assert np.all(tr.samples == 900.0)


def test_mixed_phase_and_penalty():
    sched = ArrivalSchedule.from_requests([(0.0, 10, 20), (1.0, 10, 4)])
    lt = Lifetimes(np.array([0.5, 0.5]), np.array([0.25, 0.25]))
    # request 0: prefill [0, .5), decode [.5, 5.5); request 1: prefill [1, 1.5) overlaps that decode
    plain = lut_phases(sched, lt, Q, 12)
    assert PHASES[plain[4]] == "mixed" and PHASES[plain[6]] == "decode"
    stretched = lut_phases(sched, lt, Q, 12, mixed_penalty=2.0)
    # stretched prefill covers [1, 2)
    assert PHASES[stretched[6]] == "mixed" and PHASES[stretched[7]] == "mixed" and PHASES[stretched[8]] == "decode"


def test_lut_takes_at_most_four_values():
    rng = np.random.default_rng(0)
    n = 60
    sched = ArrivalSchedule(np.sort(rng.uniform(0, 60, n)), rng.integers(1, 100, n), rng.integers(0, 40, n))
    lt = Lifetimes(rng.uniform(0.1, 1, n), rng.uniform(0.01, 0.1, n))
    assert len(np.unique(lut_trace(sched, lt, Q, LutSpec(1000.0), 300).samples)) <= 4


def test_lut_validation_and_parsing():
    with pytest.raises(ValueError):
        LutSpec(1000.0, ratios={"prompt": 0.3, "decode": 0.5, "mixed": 0.6, "idle": 0.1})
    LutSpec(1000.0, ratios={"prompt": 0.3, "decode": 0.5, "mixed": 0.6, "idle": 0.1}, enforce_order=False)
    LutSpec(1000.0)  # default mixed 0.92 sits above prompt 0.9
    with pytest.raises(ValueError):
        LutSpec(1000.0, mixed_penalty=0.9)
    spec = LutSpec.from_dict({"nameplate_w": 500, "overhead_w": 10})
    assert spec.level("prompt") == 460.0
