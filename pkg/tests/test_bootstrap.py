from __future__ import annotations

import warnings

import numpy as np
import pytest

from olsrecon.bootstrap import (
    HighLeverageWarning,
    ModifiedResidualPool,
    draw,
    modified_residuals,
    node_rng,
    percentile_intervals,
    sample_paths,
)
from olsrecon.design import DesignConfig, build_design
from olsrecon.ols import FitResult, fit, predict_recursive, recurse


def stub_fit(coefs, residuals, leverages):
    r = np.asarray(residuals, float)
    return FitResult(np.asarray(coefs, float), r, np.asarray(leverages, float), 1, 1.0, np.zeros_like(r), np.arange(r.size))


def test_spot_values():
    pool = modified_residuals(stub_fit([0.0], [1.0, -1.0], [0.75, 0.0]))
    # raw s = (2, -1), mean 0.5
    np.testing.assert_allclose(pool.values, [1.5, -1.5])
    pool = modified_residuals(stub_fit([0.0], [3.0, 1.0, -2.0], [0.0, 0.0, 0.0]))
    np.testing.assert_allclose(pool.values + 2 / 3, [3.0, 1.0, -2.0])


def test_unit_leverage_rows_excluded():
    with pytest.warns(HighLeverageWarning):
        pool = modified_residuals(stub_fit([0.0], [0.0, 1.0, -1.0], [1.0, 0.5, 0.5]))
    assert len(pool) == 2
    with pytest.raises(ValueError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            modified_residuals(stub_fit([0.0], [0.0], [1.0]))


def test_pools_on_fitted_corpus(demo_collection):
    Y = demo_collection.nodes[:336]
    cfg = DesignConfig()
    for i in range(Y.shape[1]):
        res = fit(build_design(Y[:, i], 0, cfg))
        pool = modified_residuals(res)
        assert abs(pool.values.mean()) <= 1e-9
        assert res.leverages.sum() == pytest.approx(res.rank, abs=1e-6)
        raw = res.residuals / np.sqrt(1 - res.leverages)
        np.testing.assert_allclose(pool.values, raw - raw.mean(), atol=1e-9)


def series_fit(seed=0, T=400, ar=0.0):
    rng = np.random.default_rng(seed)
    t = np.arange(T)
    e = rng.normal(0, 3, T)
    for i in range(1, T):
        e[i] += ar * e[i - 1]
    y = 100 + 30 * np.sin(2 * np.pi * t / 24) + e
    cfg = DesignConfig()
    return y, cfg, fit(build_design(y, 0, cfg))


def test_zero_pool_gives_point_forecast():
    y, cfg, res = series_fit()
    paths = sample_paths(res, y, cfg, ModifiedResidualPool(np.zeros(5)), 24, 30, seed=1)
    point = predict_recursive(res, y, cfg, 24)
    assert paths.shape == (30, 24)
    np.testing.assert_allclose(paths, np.broadcast_to(point, paths.shape), rtol=1e-12)


def test_intercept_only_path_sd():
    cfg = DesignConfig((0, 0), (), include_trend=False)
    res = stub_fit([10.0], [0.0], [0.0])
    pool = ModifiedResidualPool(np.random.default_rng(3).standard_normal(5000))
    paths = sample_paths(res, np.zeros(5), cfg, pool, 12, 2000, seed=9)
    sd = paths.std(axis=0, ddof=1)
    assert np.all(np.abs(sd - 1) < 0.1)


def test_same_seed_same_paths():
    y, cfg, res = series_fit()
    pool = modified_residuals(res)
    a = sample_paths(res, y, cfg, pool, 24, 100, seed=5)
    b = sample_paths(res, y, cfg, pool, 24, 100, seed=5)
    c = sample_paths(res, y, cfg, pool, 24, 100, seed=6)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_paths_follow_recursion_with_drawn_residuals():
    y, cfg, res = series_fit()
    pool = modified_residuals(res)
    K = 7
    paths = sample_paths(res, y, cfg, pool, 24, K, seed=2)
    rng = node_rng(2)
    draws = np.stack([draw(rng, pool.values, K) for _ in range(24)], axis=1)
    # rebuild path 3 by hand: point recursion with the draws added at each step
    from olsrecon.design import build_forecast_row

    hist = list(y)
    for j in range(24):
        val = build_forecast_row(np.array(hist), len(y) + j, cfg) @ res.coefficients + draws[3, j]
        assert paths[3, j] == pytest.approx(val, rel=1e-10)
        hist.append(val)


def test_batched_streams_equal_serial():
    """Per-node generators keyed by (seed, split, node) reproduce single-node paths."""
    fits, hists = [], []
    for s in range(4):
        y, cfg, res = series_fit(seed=s)
        fits.append(res)
        hists.append(y)
    pools = [modified_residuals(f).values for f in fits]
    K, h = 50, 24
    rngs = [node_rng(11, 0, i) for i in range(4)]
    buf = np.empty((K, 4))

    def shock(j):
        for c in range(4):
            buf[:, c] = draw(rngs[c], pools[c], K)
        return buf.copy()

    coefs = np.stack([f.coefficients for f in fits])
    tails = np.stack([hh[-24:] for hh in hists])
    joint = recurse(coefs, tails, 400, h, cfg, shock=shock)  # (K, 4, h)
    for i in range(4):
        alone = sample_paths(fits[i], hists[i], cfg, ModifiedResidualPool(pools[i]), h, K, seed=node_rng(11, 0, i))
        np.testing.assert_allclose(joint[:, i, :], alone, rtol=1e-12)


def test_width_grows_with_horizon():
    widths = []
    for seed in range(100):
        y, cfg, res = series_fit(seed, T=360, ar=0.8)
        assert res.coefficients[-2] > 0.3
        paths = sample_paths(res, y, cfg, modified_residuals(res), 24, 200, seed=seed)
        iv = percentile_intervals(paths[:, None, :], (0.05,))
        lo, hi = iv.bounds(0.05)
        widths.append(hi[0] - lo[0])
    mean = np.mean(widths, axis=0)
    # grows towards the stationary width, then flat up to Monte Carlo noise
    assert np.all(np.diff(mean[:5]) > 0)
    assert np.all(mean >= 0.97 * np.maximum.accumulate(mean))
    assert mean[-1] > 1.3 * mean[0]


def test_percentiles():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2000, 3, 4))
    iv = percentile_intervals(x, (0.10, 0.05))
    lo90, hi90 = iv.bounds(0.10)
    lo95, hi95 = iv.bounds(0.05)
    assert np.all((lo95 <= lo90) & (hi90 <= hi95))
    # the 97.5th percentile of 2000 normals has sd about 0.06: [1.85, 2.07] holds in ~93% of cells
    many = np.quantile(rng.standard_normal((2000, 1000)), 0.975, axis=0, method="linear")
    inside = np.mean((many >= 1.85) & (many <= 2.07))
    assert 0.88 <= inside <= 0.98
    assert 1.85 <= np.median(many) <= 2.07
    np.testing.assert_allclose(hi95, np.quantile(x, 0.975, axis=0, method="linear"))
    perm = percentile_intervals(x[rng.permutation(2000)], (0.05,))
    np.testing.assert_array_equal(perm.bounds(0.05)[1], hi95)
    same = percentile_intervals(np.ones((100, 2, 2)), (0.05,))
    assert np.all(same.bounds(0.05)[0] == same.bounds(0.05)[1])
    with pytest.raises(KeyError):
        iv.bounds(0.2)
    with pytest.raises(ValueError):
        percentile_intervals(x[:39], (0.05,))
    clamped = percentile_intervals(x - 5, (0.05,), clamp=True)
    assert np.all(clamped.bounds(0.05)[0] >= 0) and clamped.clamped


def test_type7_percentile_by_hand():
    x = np.arange(1.0, 41.0)[:, None, None]
    lo, hi = percentile_intervals(x, (0.05,)).bounds(0.05)
    # position (K - 1) q: 39 * 0.025 = 0.975, 39 * 0.975 = 38.025
    assert lo[0, 0] == pytest.approx(1 + 0.975)
    assert hi[0, 0] == pytest.approx(39 + 0.025)
