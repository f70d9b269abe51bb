import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from powertrace import io as pio
from powertrace.errors import FormatError
from powertrace.types import ArrivalSchedule, Lifetimes, PowerTrace, RequestLogRecord, ServingConfig


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_read_three_row_trace(tmp_path):
    p = write(tmp_path, "t.csv", "timestamp_s,power_w\n0.0,100\n0.25,200\n0.5,150\n")
    tr = pio.read_power_trace(p)
    assert tr.dt == 0.25
    np.testing.assert_array_equal(tr.samples, [100.0, 200.0, 150.0])


def test_header_only_trace_has_no_samples(tmp_path):
    p = write(tmp_path, "t.csv", "timestamp_s,power_w\n")
    with pytest.raises(FormatError, match="no samples"):
        pio.read_power_trace(p)


def test_non_monotonic_timestamp_names_row_3(tmp_path):
    p = write(tmp_path, "t.csv", "timestamp_s,power_w\n0.0,1\n0.5,1\n0.25,1\n")
    with pytest.raises(FormatError, match="row 3"):
        pio.read_power_trace(p)


def test_negative_power_and_missing_column(tmp_path):
    with pytest.raises(FormatError, match="row 2"):
        pio.read_power_trace(write(tmp_path, "a.csv", "timestamp_s,power_w\n0,1\n0.25,-1\n"))
    with pytest.raises(FormatError, match="power_w"):
        pio.read_power_trace(write(tmp_path, "b.csv", "timestamp_s,watts\n0,1\n"))


def test_jittered_spacing_warns_but_reads(tmp_path):
    p = write(tmp_path, "t.csv", "timestamp_s,power_w\n0.0,1\n0.25,1\n0.5,1\n0.8,1\n1.0,1\n")
    with pytest.warns(UserWarning, match="deviate"):
        tr = pio.read_power_trace(p)
    assert tr.dt == 0.25


def test_request_log_rows(tmp_path):
    p = write(tmp_path, "r.csv", "arrival_s,n_in,n_out,ttft_s,tbt_s\n1.0,10,0,0.2,\n0.0,128,64,0.42,0.031\n")
    recs = pio.read_request_log(p)
    assert [r.arrival_s for r in recs] == [0.0, 1.0]
    assert recs[0] == RequestLogRecord(0.0, 128, 64, 0.42, 0.031)
    assert recs[1].tbt_s is None


def test_request_log_negative_tokens(tmp_path):
    p = write(tmp_path, "r.csv", "arrival_s,n_in,n_out,ttft_s,tbt_s\n1.0,-5,3,0.2,0.1\n")
    with pytest.raises(FormatError, match="row 1"):
        pio.read_request_log(p)


def test_request_log_missing_tbt_for_decode(tmp_path):
    p = write(tmp_path, "r.csv", "arrival_s,n_in,n_out,ttft_s,tbt_s\n1.0,5,3,0.2,\n")
    with pytest.raises(FormatError, match="tbt_s"):
        pio.read_request_log(p)


@given(st.lists(st.floats(0, 5000, allow_nan=False), min_size=1, max_size=40),
       st.sampled_from([0.1, 0.25, 1.0]))
def test_trace_round_trip_is_exact(tmp_path_factory, values, dt):
    path = tmp_path_factory.mktemp("rt") / "t.csv"
    tr = PowerTrace(np.array(values), dt, 0.0)
    pio.write_power_trace(tr, path)
    back = pio.read_power_trace(path)
    np.testing.assert_array_equal(back.samples, tr.samples)
    if len(values) > 1:
        assert back.dt == pytest.approx(dt, rel=1e-12)


def test_request_log_and_schedule_round_trip(tmp_path):
    recs = [RequestLogRecord(0.1, 3, 0, 0.5, None), RequestLogRecord(0.7, 9, 4, 0.25, 0.03)]
    pio.write_request_log(recs, tmp_path / "r.csv")
    assert pio.read_request_log(tmp_path / "r.csv") == recs
    sched = ArrivalSchedule.from_requests([(0.0, 1, 2), (1.5, 3, 4)])
    pio.write_schedule(sched, tmp_path / "s.csv")
    assert pio.read_schedule(tmp_path / "s.csv") == sched


def test_power_trace_invariants():
    with pytest.raises(ValueError):
        PowerTrace(np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        PowerTrace(np.array([]))
    with pytest.raises(ValueError):
        PowerTrace(np.array([1.0]), dt=0.0)
    tr = PowerTrace(np.array([100.0, 300.0]), 0.5)
    assert tr.energy == 200.0
    with pytest.raises(ValueError):
        tr.samples[0] = 5.0


def test_serving_config_keys_are_lowercase():
    c = ServingConfig("A100", "Llama3.1-70B", 8)
    assert c.key == ("a100", "llama3.1-70b", 8)
    assert ServingConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        ServingConfig("a100", "m", 0)


def test_schedule_validation_and_stable_order():
    with pytest.raises(ValueError):
        ArrivalSchedule(np.array([1.0, 0.5]), np.array([1, 1]), np.array([1, 1]))
    s = ArrivalSchedule.from_requests([(1.0, 5, 5), (0.0, 9, 9), (1.0, 1, 1)])
    np.testing.assert_array_equal(s.n_in, [9, 5, 1])


def test_lifetimes_from_log_follow_arrival_order():
    recs = [RequestLogRecord(2.0, 1, 0, 0.3), RequestLogRecord(1.0, 1, 2, 0.1, 0.05)]
    lt = Lifetimes.from_log(recs)
    np.testing.assert_array_equal(lt.ttft, [0.1, 0.3])
    np.testing.assert_array_equal(lt.tbt, [0.05, 0.0])
