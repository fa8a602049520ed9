from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import normal_equations, recursive_forecast
from olsrecon.design import DesignConfig, build_design, deterministic_features
from olsrecon.ols import RankDeficientWarning, fit, fit_arrays, fit_batch, predict_recursive, recurse


def well_conditioned(rng, r=200, p=14):
    X = rng.standard_normal((r, p))
    X[:, 0] = 1.0
    y = X @ rng.normal(0, 3, p) + rng.standard_normal(r)
    return X, y


def test_matches_normal_equations_oracle(rng):
    for _ in range(10):
        X, y = well_conditioned(rng)
        got = fit_arrays(X, y).coefficients
        want = normal_equations(X, y)
        assert np.max(np.abs(got - want)) <= 1e-8 * np.max(np.abs(want))


def test_constant_response_intercept_only():
    X = np.ones((40, 1))
    res = fit_arrays(X, np.full(40, 3.0))
    assert res.coefficients[0] == pytest.approx(3.0, abs=1e-12)
    np.testing.assert_allclose(res.residuals, 0.0, atol=1e-12)
    np.testing.assert_allclose(res.leverages, 1 / 40, atol=1e-12)


def test_noiseless_recovery():
    cfg = DesignConfig(lags=())
    t = np.arange(500)
    X = deterministic_features(t, cfg)
    beta = np.arange(1, cfg.n_columns + 1) / 3.0
    beta[1] = 0.01
    res = fit_arrays(X, X @ beta)
    np.testing.assert_allclose(res.coefficients, beta, rtol=1e-8, atol=1e-10)


def test_invariants(rng):
    X, y = well_conditioned(rng, 120, 9)
    res = fit_arrays(X, y)
    assert res.rank == 9
    assert res.leverages.sum() == pytest.approx(9, abs=1e-6)
    assert np.all((res.leverages >= 0) & (res.leverages <= 1))
    np.testing.assert_allclose(res.fitted + res.residuals, y, rtol=1e-12, atol=1e-9)
    inner = X.T @ res.residuals
    assert np.max(np.abs(inner)) <= 1e-6 * np.linalg.norm(X) * np.linalg.norm(y)
    H = X @ np.linalg.solve(X.T @ X, X.T)
    np.testing.assert_allclose(res.leverages, np.diag(H), atol=1e-10)
    assert res.sigma2 == pytest.approx(res.residuals @ res.residuals / (120 - 9))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1000), st.integers(0, 10_000))
def test_scale_equivariance(c, seed):
    rng = np.random.default_rng(seed)
    X, y = well_conditioned(rng, 60, 5)
    a, b = fit_arrays(X, y), fit_arrays(X, c * y)
    np.testing.assert_allclose(b.coefficients, c * a.coefficients, rtol=1e-7, atol=1e-9 * c)
    np.testing.assert_allclose(b.residuals, c * a.residuals, rtol=1e-6, atol=1e-8 * c)


def test_rank_deficient_min_norm(rng):
    X = rng.standard_normal((50, 3))
    X = np.column_stack([X, X[:, 0] + X[:, 1]])
    y = rng.standard_normal(50)
    with pytest.warns(RankDeficientWarning):
        res = fit_arrays(X, y)
    assert res.rank == 3
    np.testing.assert_allclose(res.coefficients, np.linalg.pinv(X) @ y, atol=1e-10)
    assert res.leverages.sum() == pytest.approx(3, abs=1e-8)


def test_errors():
    with pytest.raises(ValueError):
        fit_arrays(np.empty((0, 2)), np.empty(0))
    with pytest.raises(ValueError):
        fit_arrays(np.ones((3, 1)), np.array([1.0, np.nan, 2.0]))


def test_batch_equals_single(rng):
    X = rng.standard_normal((6, 80, 7))
    Y = rng.standard_normal((6, 80))
    X[3, :, 6] = X[3, :, 5]  # rank deficient member
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        batch = fit_batch(X, Y)
        for i in range(6):
            one = fit_arrays(X[i], Y[i])
            np.testing.assert_allclose(batch[i].coefficients, one.coefficients, rtol=1e-9, atol=1e-10)
            np.testing.assert_allclose(batch[i].leverages, one.leverages, atol=1e-10)
            assert batch[i].rank == one.rank


def fitted_series(rng, T=400):
    t = np.arange(T)
    y = 200 + 60 * np.sin(2 * np.pi * t / 24) + 5 * np.cos(2 * np.pi * t / 168) + rng.normal(0, 4, T)
    cfg = DesignConfig()
    return y, cfg, fit(build_design(y, 0, cfg))


def test_recursive_matches_oracle(rng):
    y, cfg, res = fitted_series(rng)
    got = predict_recursive(res, y, cfg, 24)
    np.testing.assert_allclose(got, recursive_forecast(res.coefficients, y, cfg, 24), rtol=1e-12)
    # beyond 24 steps the 24-lag also reads forecasts
    np.testing.assert_allclose(
        predict_recursive(res, y, cfg, 60), recursive_forecast(res.coefficients, y, cfg, 60), rtol=1e-12
    )


def test_one_step_is_dot_product(rng):
    from olsrecon.design import build_forecast_row

    y, cfg, res = fitted_series(rng)
    row = build_forecast_row(y, len(y), cfg)
    assert predict_recursive(res, y, cfg, 1)[0] == pytest.approx(row @ res.coefficients, rel=1e-12)


def _stub(cfg, coefs):
    from olsrecon.ols import FitResult

    return FitResult(np.asarray(coefs, float), np.zeros(1), np.zeros(1), len(coefs), 0.0, np.zeros(1), np.zeros(1))


def test_constant_and_random_walk_models():
    cfg = DesignConfig()
    c = np.zeros(cfg.n_columns)
    c[0] = 5.0
    np.testing.assert_allclose(predict_recursive(_stub(cfg, c), np.arange(30.0), cfg, 10), 5.0)
    c = np.zeros(cfg.n_columns)
    c[cfg.column_names().index("lag_1")] = 1.0
    hist = np.r_[np.zeros(29), 7.0]
    np.testing.assert_allclose(predict_recursive(_stub(cfg, c), hist, cfg, 24), 7.0)


def test_recurse_batched_and_streaming(rng):
    cfg = DesignConfig()
    coefs = rng.normal(0, 0.1, (5, cfg.n_columns))
    tail = rng.normal(100, 10, (5, 24))
    full = recurse(coefs, tail, 1000, 30, cfg)
    for i in range(5):
        hist = np.r_[np.zeros(1000 - 24), tail[i]]
        np.testing.assert_allclose(full[i], recursive_forecast(coefs[i], hist, cfg, 30), rtol=1e-10)
    got = {}
    recurse(coefs, tail, 1000, 30, cfg, on_step=lambda j, v: got.__setitem__(j, v.copy()))
    np.testing.assert_allclose(np.stack([got[j] for j in range(30)], axis=-1), full)
