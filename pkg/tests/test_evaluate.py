from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from olsrecon.design import DesignConfig, InsufficientDataError
from olsrecon.evaluate import (
    STAGES,
    PipelineConfig,
    PipelineError,
    plan_blocked_cv,
    plan_for_starts,
    rmse,
    run_pipeline,
    run_split,
    seasonal_naive,
    summarize_log,
)
from olsrecon.hierarchy import coherence_residual
from olsrecon.ingest import SeriesCollection
from olsrecon.synthetic import demo_structure, generate_synthetic

FAST = PipelineConfig(K=200, seed=3)


def test_plan_counts():
    assert len(plan_blocked_cv(2880)) == 106
    one = plan_blocked_cv(360)
    assert one.splits == (((0, 336), (336, 360)),)
    with pytest.raises(ValueError):
        plan_blocked_cv(359)


def test_plan_covers_contiguously():
    plan = plan_blocked_cv(1000, 100, 30)
    tests = [te for _, te in plan.splits]
    assert tests[0][0] == 100
    assert all(a[1] == b[0] for a, b in zip(tests, tests[1:]))
    assert all(tr[1] - tr[0] == 100 and tr[1] == te[0] for tr, te in plan.splits)
    assert tests[-1][1] <= 1000 < tests[-1][1] + 30


def test_plan_for_starts_skips_short_history():
    plan = plan_for_starts([100, 400, 400, 990], T=1000)
    assert plan.splits == (((64, 400), (400, 424)),)


def test_rmse_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))
    with pytest.raises(ValueError):
        rmse([1, 2], [1])
    with pytest.raises(ValueError):
        rmse([], [])


def test_seasonal_naive_examples():
    hist = np.arange(336.0)
    np.testing.assert_array_equal(seasonal_naive(hist), hist[168:192])
    np.testing.assert_array_equal(seasonal_naive(np.arange(5.0), period=2, h=5), [3, 4, 3, 4, 3])
    with pytest.raises(InsufficientDataError):
        seasonal_naive(np.arange(100.0))


def test_ols_beats_seasonal_naive():
    spec, keys = demo_structure()
    wins = 0
    for seed in range(20):
        col, _ = generate_synthetic(spec, 15, seed=seed, bottom_keys=keys)
        r = run_split(col, 0, (0, 336), (336, 360), FAST, intervals=False)
        wins += rmse(r.actual, r.base) < rmse(r.actual, r.naive)
    assert wins >= 18


@pytest.fixture(scope="module")
def small_run(demo_collection):
    plan = plan_blocked_cv(demo_collection.T)
    return plan, run_pipeline(demo_collection, plan, FAST)


def test_pipeline_coherent_and_nested(small_run, demo_collection):
    plan, res = small_run
    S = demo_collection.S
    assert len(res.splits) == len(plan) == 6 and not res.errors
    for r in res.splits:
        assert coherence_residual(S, r.reconciled, relative=True) <= 1e-8
        lo90, hi90 = r.intervals.bounds(0.10)
        lo95, hi95 = r.intervals.bounds(0.05)
        assert np.all(lo95 <= lo90) and np.all(hi90 <= hi95) and np.all(lo90 <= hi90)
        assert 0.0 <= r.lam <= 1.0
        assert set(r.timings) == set(STAGES) and all(v >= 0 for v in r.timings.values())


def test_pipeline_deterministic(small_run, demo_collection):
    plan, res = small_run
    again = run_pipeline(demo_collection, plan, FAST, only=[0, 3])
    for r in again.splits:
        ref = res.splits[r.split]
        np.testing.assert_array_equal(r.reconciled, ref.reconciled)
        np.testing.assert_array_equal(r.intervals.upper[0.05], ref.intervals.upper[0.05])


def test_workers_do_not_change_results(small_run, demo_collection):
    plan, res = small_run
    par = run_pipeline(demo_collection, plan, FAST, workers=2, only=[1, 2])
    assert [r.split for r in par.splits] == [1, 2]
    for r in par.splits:
        np.testing.assert_array_equal(r.intervals.lower[0.10], res.splits[r.split].intervals.lower[0.10])


def test_summary_recomputable(small_run, demo_collection):
    _, res = small_run
    rep = res.report
    again = summarize_log(rep.log, [b for b, _, _ in demo_collection.S.index.blocks])
    pd.testing.assert_frame_equal(again, rep.summary)
    one = rep.log[(rep.log.level == "Total") & (rep.log.method == "pipeline")]
    manual = [rmse(r.actual[0], r.reconciled[0]) for r in res.splits]
    np.testing.assert_allclose(one.rmse.to_numpy(), manual)
    row = rep.summary[(rep.summary.level == "Total") & (rep.summary.method == "pipeline")].iloc[0]
    assert row.cells == 6
    assert row.se == pytest.approx(np.std(manual, ddof=1) / np.sqrt(6))
    assert len(rep.timing_summary) == 3


def test_no_future_leakage(demo_collection):
    """Changing values after the test window must not move anything."""
    col = demo_collection
    ref = run_split(col, 0, (0, 336), (336, 360), FAST)
    bottom = col.bottom.copy()
    bottom[360:] = 0
    bottom[330:336] += 0  # untouched window
    other = SeriesCollection(col.index, bottom, col.S, col.metadata)
    r = run_split(other, 0, (0, 336), (336, 360), FAST)
    np.testing.assert_array_equal(r.reconciled, ref.reconciled)
    np.testing.assert_array_equal(r.intervals.upper[0.05], ref.intervals.upper[0.05])
    bottom[340] += 1000  # inside the test window: forecasts unchanged, actuals not
    r2 = run_split(SeriesCollection(col.index, bottom, col.S, col.metadata), 0, (0, 336), (336, 360), FAST)
    np.testing.assert_array_equal(r2.reconciled, ref.reconciled)
    assert not np.array_equal(r2.actual, ref.actual)


def test_failed_node_is_excluded(demo_collection, caplog):
    col = demo_collection
    bottom = col.bottom.copy()
    bottom[:, 0] = 7.0  # constant series: zero residual variance
    broken = SeriesCollection(col.index, bottom, col.S, col.metadata)
    r = run_split(broken, 0, (0, 336), (336, 360), FAST)
    bad = col.S.bottom_labels[0]
    assert bad in r.failed
    assert coherence_residual(col.S, r.reconciled, relative=True) <= 1e-8
    with pytest.raises(PipelineError):
        run_split(broken, 0, (0, 336), (336, 360), PipelineConfig(K=200, method="bottom-up"))


def test_missing_origin_marks_failure(demo_collection):
    col = demo_collection
    bottom = col.bottom.copy()
    bottom[335, 2] = np.nan
    # every ancestor inherits the gap, so nothing is left to recover that series
    with pytest.raises(PipelineError, match="no fitted node covers"):
        run_split(SeriesCollection(col.index, bottom, col.S, col.metadata), 0, (0, 336), (336, 360), FAST)
    bottom[335, 2] = col.bottom[335, 2]
    bottom[100, 2] = np.nan  # a gap inside the window only drops rows
    r = run_split(SeriesCollection(col.index, bottom, col.S, col.metadata), 0, (0, 336), (336, 360), FAST)
    assert not r.failed and np.all(np.isfinite(r.reconciled))


def test_independent_draws_and_error_pool(demo_collection):
    plan = plan_blocked_cv(demo_collection.T)
    cfg = PipelineConfig(K=200, seed=3, draws="independent", error_pool=2)
    res = run_pipeline(demo_collection, plan, cfg, only=[0, 1, 2])
    assert len(res.splits) == 3
    assert res.splits[0].errors.shape[1] == demo_collection.S.n
    joint = run_split(demo_collection, 0, *plan.splits[0], FAST)
    assert not np.array_equal(joint.intervals.upper[0.05], res.splits[0].intervals.upper[0.05])
    with pytest.raises(ValueError):
        PipelineConfig(draws="nope")


def test_methods_run(demo_collection):
    for method in ("wls-diagonal", "ols-identity", "bottom-up"):
        r = run_split(demo_collection, 0, (0, 336), (336, 360), PipelineConfig(K=200, method=method), intervals=False)
        assert coherence_residual(demo_collection.S, r.reconciled, relative=True) <= 1e-8
        assert r.intervals is None


def test_mint_shrink_summed_mse_not_worse_than_base():
    spec, keys = demo_structure()
    gaps = []
    for seed in range(50):
        col, _ = generate_synthetic(spec, 15, seed=500 + seed, bottom_keys=keys)
        r = run_split(col, 0, (0, 336), (336, 360), PipelineConfig(seed=seed), intervals=False)
        gaps.append(np.sum((r.actual - r.reconciled) ** 2) - np.sum((r.actual - r.base) ** 2))
    assert np.mean(gaps) <= 0.0
