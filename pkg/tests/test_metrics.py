import math
import time

import numpy as np
import pytest

from causalex.metrics import (SCHEMA_VERSION, TRACE_COLUMNS, ExperimentTrace, TraceError, TraceWriter,
                              aggregate, check_row, common_threshold, export_trace, first_crossing,
                              read_trace, sample_efficiency, smooth)


def make_trace(values, steps=None, metadata=None, rng=None):
    values = np.asarray(values, dtype=float)
    steps = np.arange(1, len(values) + 1) if steps is None else np.asarray(steps)
    rng = rng or np.random.default_rng(0)
    m = len(values)
    cols = {
        "step": steps.astype(np.int64), "episode": np.zeros(m, np.int64),
        "action_index": rng.integers(0, 8, m).astype(np.int64),
        "r_i": rng.random(m), "r_a": rng.standard_normal(m) * 1e-3, "r": rng.random(m),
        "train_loss": rng.random(m), "holdout_loss": values,
        "graph_f1": np.where(rng.random(m) < 0.5, np.nan, rng.random(m)),
        "discovery_time_ms": np.full(m, np.nan),
        "selected_count": np.full(m, np.nan),
    }
    return ExperimentTrace(cols, metadata or {"seed": 0, "config_hash": "abc"})


def test_single_trace_aggregate():
    t = make_trace([3.0, 2.0, 1.5])
    agg = aggregate([t], "holdout_loss")
    np.testing.assert_array_equal(agg.mean, [3.0, 2.0, 1.5])
    np.testing.assert_array_equal(agg.std, 0.0)


def test_two_constant_traces():
    agg = aggregate([make_trace(np.ones(5)), make_trace(3 * np.ones(5))], "holdout_loss")
    np.testing.assert_allclose(agg.mean, 2.0)
    np.testing.assert_allclose(agg.std, np.sqrt(2.0))  # sample std of {1, 3}
    assert agg.count == 2


def test_sample_std_of_pair_with_unit_spread():
    # values 1.5 and 2.5: sample std sqrt(0.5), population std 0.5
    agg = aggregate([make_trace([1.5]), make_trace([2.5])], "holdout_loss")
    assert agg.mean[0] == 2.0
    assert agg.std[0] == pytest.approx(np.std([1.5, 2.5], ddof=1))


def test_misaligned_rejected():
    with pytest.raises(TraceError):
        aggregate([make_trace([1.0, 2.0]), make_trace([1.0, 2.0], steps=[1, 3])], "holdout_loss")
    with pytest.raises(TraceError):
        aggregate([make_trace([1.0, 2.0]), make_trace([1.0])], "holdout_loss")
    with pytest.raises(TraceError):
        aggregate([make_trace([1.0])], "nope")


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(5)
    traces = [make_trace(rng.random(20)) for _ in range(6)]
    a = aggregate(traces, "holdout_loss")
    b = aggregate(traces[::-1], "holdout_loss")
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-15)
    np.testing.assert_allclose(a.std, b.std, rtol=1e-13)


def test_steps_must_increase():
    with pytest.raises(TraceError):
        make_trace([1.0, 2.0, 3.0], steps=[1, 3, 3])


def test_smoothing_is_centered_and_truncated():
    x = np.arange(6.0)
    np.testing.assert_allclose(smooth(x, 3), [0.5, 1, 2, 3, 4, 4.5])
    np.testing.assert_array_equal(smooth(x, 1), x)
    with pytest.raises(ValueError):
        smooth(x, 0)


def test_identical_series_ratio_one():
    s = np.linspace(1.0, 0.0, 300)
    eff = sample_efficiency(s, s, 0.4, window=1)
    assert eff.reached and eff.ratio == 1.0


def test_shift_by_hundred_steps():
    a = np.concatenate([np.linspace(1.0, 0.0, 400), np.zeros(200)])
    b = np.concatenate([np.ones(100), a[:-100]])
    eff = sample_efficiency(a, b, 0.3, window=50)
    assert eff.steps_b - eff.steps_a == 100
    assert eff.ratio < 1


def test_unreached_threshold():
    eff = sample_efficiency(np.ones(50), np.linspace(1, 0, 50), 0.5, window=5)
    assert eff.steps_a is None and eff.ratio is None and not eff.reached
    assert first_crossing(np.ones(10), 0.0, 3) is None


def test_common_threshold_is_reached_by_both():
    a = np.linspace(2.0, 0.5, 200)
    b = np.linspace(2.0, 0.8, 200)
    thr = common_threshold(a, b, window=10)
    assert sample_efficiency(a, b, thr, window=10).reached


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_round_trip_exact(tmp_path, fmt):
    t = make_trace(np.random.default_rng(1).random(40) * 1e-7 + 1 / 3)
    path = export_trace(t, tmp_path / f"trace.{fmt}")
    back = read_trace(path)
    assert back.metadata == t.metadata
    for col in TRACE_COLUMNS:
        np.testing.assert_array_equal(back[col], t[col])
    # identical input, identical bytes
    again = export_trace(t, tmp_path / f"again.{fmt}")
    assert path.read_bytes() == again.read_bytes()


def test_schema_version_in_every_file(tmp_path):
    t = make_trace([1.0, 0.5])
    csv_text = export_trace(t, tmp_path / "t.csv").read_text()
    assert csv_text.splitlines()[0] == f"# schema_version={SCHEMA_VERSION}"
    assert f'"schema_version":{SCHEMA_VERSION}' in export_trace(t, tmp_path / "t.json").read_text()
    (tmp_path / "bad.csv").write_text(csv_text.replace("schema_version=1", "schema_version=99"))
    with pytest.raises(TraceError):
        read_trace(tmp_path / "bad.csv")


def test_non_finite_values_rejected(tmp_path):
    row = {c: 1 for c in TRACE_COLUMNS}
    check_row(row)
    with pytest.raises(TraceError):
        check_row({**row, "r": math.inf})
    with pytest.raises(TraceError):
        check_row({**row, "holdout_loss": math.nan})
    check_row({**row, "graph_f1": math.nan})  # optional column may be missing
    t = make_trace([1.0, np.nan])
    with pytest.raises(TraceError):
        export_trace(t, tmp_path / "t.csv")


def test_writer_streams_rows(tmp_path):
    with TraceWriter(tmp_path / "w.csv", {"seed": 3}, flush_every=2) as w:
        for k in range(5):
            w.write({c: k + 1 for c in TRACE_COLUMNS})
    back = read_trace(tmp_path / "w.csv")
    assert len(back) == 5 and back.metadata == {"seed": 3}


def test_io_errors_name_path(tmp_path):
    with pytest.raises(OSError, match="missing.csv"):
        read_trace(tmp_path / "missing.csv")


def test_large_export_is_fast(tmp_path):
    t = make_trace(np.random.default_rng(2).random(100_000))
    start = time.perf_counter()
    export_trace(t, tmp_path / "big.csv")
    export_trace(t, tmp_path / "big.json")
    assert time.perf_counter() - start < 5.0
