from __future__ import annotations

import numpy as np
import pytest

from conftest import small_tree_spec
from oracles import shrinkage_direct
from olsrecon.hierarchy import StructureSpec, SummingMatrix, build_summing_matrix, coherence_residual
from olsrecon.reconcile import (
    DegenerateSeriesError,
    ReconciliationError,
    ShrinkageFallbackWarning,
    build_map,
    bottom_up_map,
    estimate_shrinkage,
    map_for_errors,
    reconcile_paths,
    reconcile_points,
)
from olsrecon.synthetic import demo_structure


def small_S() -> SummingMatrix:
    spec = StructureSpec(group_attributes={"g": ("a", "b")})
    return build_summing_matrix(spec, [("a",), ("b",)])


def random_pd(rng, n):
    A = rng.standard_normal((n, n + 5))
    return A @ A.T / (n + 5) + 0.1 * np.eye(n)


def test_hand_example_identity():
    S = small_S()
    np.testing.assert_array_equal(S.entries, [[1, 1], [1, 0], [0, 1]])
    rmap = build_map(S, None)
    got = reconcile_points(rmap, S, np.array([4.0, 1.0, 2.0]))
    np.testing.assert_allclose(got, [11 / 3, 4 / 3, 7 / 3], atol=1e-12)
    A = S.entries.astype(float)
    np.testing.assert_allclose(rmap.G, np.linalg.solve(A.T @ A, A.T), atol=1e-12)


def test_projection_properties(rng):
    spec, keys = demo_structure()
    S = build_summing_matrix(spec, keys)
    A = S.entries.astype(float)
    for W in (None, random_pd(rng, S.n), rng.uniform(0.5, 3, S.n)):
        rmap = build_map(S, W)
        np.testing.assert_allclose(rmap.G @ A, np.eye(S.m), atol=1e-8)
        P = rmap.projection(S)
        np.testing.assert_allclose(P @ P, P, atol=1e-6)
        b = rng.normal(0, 10, S.m)
        np.testing.assert_allclose(reconcile_points(rmap, S, A @ b), A @ b, atol=1e-8)


def test_scale_invariance(rng):
    spec, keys = demo_structure()
    S = build_summing_matrix(spec, keys)
    W = random_pd(rng, S.n)
    P = build_map(S, W).projection(S)
    for c in (1e-3, 0.5, 7.0, 1e4):
        np.testing.assert_allclose(build_map(S, c * W).projection(S), P, atol=1e-9)


def test_bottom_up():
    spec, keys = small_tree_spec()
    S = build_summing_matrix(spec, keys)
    rmap = bottom_up_map(S)
    np.testing.assert_array_equal(rmap.full(S.n), np.hstack([np.zeros((4, 3)), np.eye(4)]))
    base = np.array([100.0, 50, 50, 1, 2, 3, 4])
    np.testing.assert_array_equal(reconcile_points(rmap, S, base), [10, 3, 7, 1, 2, 3, 4])
    assert build_map(S, method="bottom-up").method == "bottom-up"


def test_non_pd_w():
    S = small_S()
    with pytest.raises(ReconciliationError, match="shrinkage"):
        build_map(S, np.array([[1.0, 2, 0], [2, 1, 0], [0, 0, 1]]))
    with pytest.raises(ReconciliationError):
        build_map(S, np.eye(2))


def test_points_and_paths(rng):
    spec, keys = demo_structure()
    S = build_summing_matrix(spec, keys)
    rmap = build_map(S, rng.uniform(1, 2, S.n))
    assert np.all(reconcile_points(rmap, S, np.zeros((S.n, 5))) == 0)
    base = rng.normal(100, 20, (S.n, 24))
    rec = reconcile_points(rmap, S, base)
    assert all(coherence_residual(S, rec[:, j], relative=True) <= 1e-8 for j in range(24))
    paths = rng.normal(100, 20, (50, S.n, 24))
    rp = reconcile_paths(rmap, S, paths)
    np.testing.assert_allclose(rp[7], reconcile_points(rmap, S, paths[7]), atol=1e-9)
    np.testing.assert_allclose(rp.mean(axis=0), reconcile_points(rmap, S, paths.mean(axis=0)), atol=1e-9)
    same = reconcile_paths(rmap, S, np.broadcast_to(base, (3,) + base.shape))
    assert np.all(same[0] == same[1]) and np.all(same[1] == same[2])
    with pytest.raises(ValueError):
        reconcile_points(rmap, S, base[:-1])


def test_row_subset_map(rng):
    spec, keys = demo_structure()
    S = build_summing_matrix(spec, keys)
    rows = np.array([i for i in range(S.n) if i not in (0, 5)])
    rmap = build_map(S, rng.uniform(1, 2, rows.size), rows=rows)
    np.testing.assert_allclose(rmap.G @ S.entries[rows].astype(float), np.eye(S.m), atol=1e-8)
    base = rng.normal(50, 5, S.n)
    moved = base.copy()
    moved[[0, 5]] = 1e6  # excluded rows have no influence
    np.testing.assert_allclose(reconcile_points(rmap, S, base), reconcile_points(rmap, S, moved))


def test_shrinkage_matches_direct_formula(rng):
    for T, n in ((4, 2), (6, 3), (12, 4), (30, 5)):
        E = rng.standard_normal((T, n)) @ rng.standard_normal((n, n))
        cov = estimate_shrinkage(E)
        lam, shrunk = shrinkage_direct(E)
        assert abs(cov.lam - lam) <= 1e-10
        np.testing.assert_allclose(cov.shrunk, shrunk, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(cov.full_sample, E.T @ E / T, rtol=1e-12)
        assert 0.0 <= cov.lam <= 1.0
        np.testing.assert_array_equal(np.diag(cov.shrunk), np.diag(cov.full_sample))
        np.testing.assert_array_equal(cov.shrunk, cov.shrunk.T)


def test_shrinkage_orthogonal_columns():
    E = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    cov = estimate_shrinkage(E)
    assert cov.lam == 1.0
    np.testing.assert_array_equal(cov.shrunk, np.diag(np.diag(cov.full_sample)))


def test_shrinkage_fixed_lambda(rng):
    E = rng.standard_normal((20, 4))
    assert np.array_equal(estimate_shrinkage(E, lam=0.0).shrunk, E.T @ E / 20)
    with pytest.raises(ValueError):
        estimate_shrinkage(E, lam=1.5)


def test_lambda_in_unit_interval_fuzz():
    for seed in range(200):
        r = np.random.default_rng(seed)
        T, n = int(r.integers(2, 9)), int(r.integers(2, 7))
        E = r.standard_normal((T, n)) * r.uniform(0.1, 10, n)
        if r.random() < 0.3:
            E[:, 1] = E[:, 0] * r.uniform(-2, 2)
        assert 0.0 <= estimate_shrinkage(E).lam <= 1.0


def test_degenerate_column_named():
    E = np.random.default_rng(0).standard_normal((10, 3))
    E[:, 1] = 0.0
    with pytest.raises(DegenerateSeriesError, match="node-b"):
        estimate_shrinkage(E, labels=["node-a", "node-b", "node-c"])


def test_map_for_errors_methods(rng):
    spec, keys = demo_structure()
    S = build_summing_matrix(spec, keys)
    E = rng.standard_normal((300, S.n)) @ np.diag(rng.uniform(1, 5, S.n))
    for method in ("mint-shrink", "wls-diagonal", "ols-identity", "bottom-up"):
        rmap, _ = map_for_errors(S, E, method)
        assert rmap.method == method
        np.testing.assert_allclose(rmap.G @ S.entries[rmap.rows if rmap.rows is not None else slice(None)], np.eye(S.m), atol=1e-8)
    with pytest.raises(ValueError):
        map_for_errors(S, E, "top-down")


def test_fallback_to_diagonal(monkeypatch, rng):
    import olsrecon.reconcile as rec

    S = small_S()
    E = rng.standard_normal((50, 3))
    real = rec.build_map

    def flaky(S_, W=None, method=None, rows=None):
        if isinstance(W, np.ndarray) and W.ndim == 2:
            raise ReconciliationError("not PD")
        return real(S_, W, method=method, rows=rows)

    monkeypatch.setattr(rec, "build_map", flaky)
    with pytest.warns(ShrinkageFallbackWarning):
        rmap, cov = rec.map_for_errors(S, E, "mint-shrink")
    assert cov.lam == 1.0
