import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from powertrace.errors import MetricError
from powertrace.fidelity import acf, acf_r2, delta_energy, evaluate_multi_seed, evaluate_traces, ks_statistic, nrmse
from powertrace.types import PowerTrace


def brute_ks(a, b):
    best = 0.0
    for x in list(a) + list(b):
        fa = sum(1 for v in a if v <= x) / len(a)
        fb = sum(1 for v in b if v <= x) / len(b)
        best = max(best, abs(fa - fb))
    return best


def test_delta_energy_cases():
    y = np.random.default_rng(0).uniform(100, 500, 1000)
    assert delta_energy(PowerTrace(y), PowerTrace(y)) == 0.0
    assert delta_energy(PowerTrace(1.1 * y), PowerTrace(y)) == pytest.approx(0.10, abs=1e-12)
    with pytest.raises(MetricError):
        delta_energy(PowerTrace(y), PowerTrace(np.zeros(3)))


def test_tdp_energy_error_arithmetic():
    meas = PowerTrace(np.full(100, 1110.0))
    tdp = PowerTrace(np.full(100, 3810.0))
    assert delta_energy(tdp, meas) == pytest.approx(2.43, abs=0.01)


def test_ks_examples():
    a = np.random.default_rng(0).normal(size=200)
    assert ks_statistic(a, a) == 0.0
    assert ks_statistic(a - 100, a + 100) == 1.0


def test_ks_matches_double_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.normal(0, 1, 10_000), rng.normal(0.5, 1, 10_000)
    # the oracle is quadratic, so check it on a subsample and the full set against scipy
    assert ks_statistic(a[:400], b[:300]) == pytest.approx(brute_ks(a[:400], b[:300]), abs=1e-12)
    from scipy import stats
    assert ks_statistic(a, b) == pytest.approx(stats.ks_2samp(a, b).statistic, abs=1e-12)


@given(arrays(np.float64, st.integers(1, 30), elements=st.integers(0, 10).map(float)),
       arrays(np.float64, st.integers(1, 30), elements=st.integers(0, 10).map(float)))
def test_ks_oracle_and_symmetry(a, b):
    assert ks_statistic(a, b) == pytest.approx(brute_ks(a, b), abs=1e-12)
    assert ks_statistic(a, b) == ks_statistic(b, a)


def test_acf_r2_examples():
    rng = np.random.default_rng(2)
    x = np.cumsum(rng.normal(size=2000)) + 1000
    assert acf_r2(x, x, 50) == 1.0
    t = np.arange(2000)
    periodic = np.sin(2 * np.pi * t / 40) + 0.1 * rng.normal(size=2000)
    assert acf_r2(rng.normal(size=2000), periodic, 120) < 0.5


def test_acf_uses_biased_normalization():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    d = x - x.mean()
    assert acf(x, 1)[0] == pytest.approx(np.dot(d[:-1], d[1:]) / np.dot(d, d))


def test_acf_r2_can_be_negative_and_errors():
    rng = np.random.default_rng(3)
    meas = np.sin(np.arange(1000) / 5.0)
    assert acf_r2(np.sin(np.arange(1000) / 2.0), meas, 30) < 0
    with pytest.raises(MetricError):
        acf_r2(np.ones(100), rng.normal(size=100), 10)
    with pytest.raises(MetricError):
        acf_r2(rng.normal(size=10), rng.normal(size=10), 20)


def test_nrmse_examples():
    rng = np.random.default_rng(4)
    y = rng.uniform(100, 300, 500)
    assert nrmse(y, y) == 0.0
    r = y.max() - y.min()
    assert nrmse(y + 7.0, y) == pytest.approx(7.0 / r, rel=1e-12)
    s = rng.uniform(100, 300, 500)
    assert nrmse(s, y) == pytest.approx(np.sqrt(np.mean((s - y) ** 2)) / r, abs=1e-12)
    assert nrmse(3 * s, 3 * y) == pytest.approx(nrmse(s, y), rel=1e-12)
    with pytest.raises(MetricError):
        nrmse(y, np.full(500, 2.0))


def test_unequal_lengths_truncate_with_warning():
    y = np.random.default_rng(5).normal(size=300)
    with pytest.warns(UserWarning, match="truncating"):
        assert nrmse(y[:200], y) == 0.0


def test_median_of_five_protocol():
    meas = PowerTrace(np.random.default_rng(6).uniform(100, 200, 400))
    errs = {0: -0.02, 1: 0.01, 2: 0.03, 3: -0.04, 4: 0.02}
    rep = evaluate_multi_seed(meas, lambda s: PowerTrace(meas.samples * (1 + errs[s])), 5, max_lag=10)
    assert rep.delta_energy == pytest.approx(0.02, abs=1e-12)
    assert rep.n_seeds == 5 and rep.aggregation == "median"
    assert [r["delta_energy"] for r in rep.per_seed] == pytest.approx([errs[s] for s in range(5)], abs=1e-12)


def test_seed_independent_generator_matches_single_seed():
    rng = np.random.default_rng(7)
    meas, syn = PowerTrace(rng.uniform(0, 10, 500)), PowerTrace(rng.uniform(0, 10, 500))
    single = evaluate_traces(syn, meas, 20)
    multi = evaluate_multi_seed(meas, lambda s: syn, 5, 20)
    assert (multi.ks, multi.acf_r2, multi.nrmse) == (single.ks, single.acf_r2, single.nrmse)
    assert multi.delta_energy == abs(single.delta_energy)


def test_energy_error_invariant_under_resampling():
    from powertrace.facility import resample

    rng = np.random.default_rng(8)
    a, b = PowerTrace(rng.uniform(0, 10, 800)), PowerTrace(rng.uniform(1, 11, 800))
    assert delta_energy(resample(a, 1.0), resample(b, 1.0)) == pytest.approx(delta_energy(a, b), rel=1e-12)
