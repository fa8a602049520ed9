"""Trace-minimisation reconciliation with a shrinkage error covariance.

The reconciliation map is stored as G (m x n) with reconciled = S G base.
The scale factor of the multi-step covariance cancels in G and is ignored.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .hierarchy import SummingMatrix

METHODS = ("mint-shrink", "wls-diagonal", "ols-identity", "bottom-up")


class ReconciliationError(RuntimeError):
    pass


class DegenerateSeriesError(ValueError):
    def __init__(self, nodes: Sequence[str]):
        self.nodes = list(nodes)
        super().__init__(f"zero-variance one-step errors for node(s): {', '.join(self.nodes[:10])}"
                         + (" ..." if len(self.nodes) > 10 else ""))


class ShrinkageFallbackWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ShrinkageCovariance:
    diagonal: np.ndarray
    lam: float
    full_sample: np.ndarray
    shrunk: np.ndarray


@dataclass(frozen=True)
class ReconciliationMap:
    """``G`` is m x len(rows); ``rows`` lists the node rows whose base
    forecasts enter the map (None means all n)."""

    G: np.ndarray
    method: str
    rows: np.ndarray | None = None

    def full(self, n: int) -> np.ndarray:
        """G expanded to m x n, with zero columns for unused rows."""
        if self.rows is None:
            return self.G
        out = np.zeros((self.G.shape[0], n))
        out[:, self.rows] = self.G
        return out

    def projection(self, S: SummingMatrix) -> np.ndarray:
        """The n x n reconciliation matrix S G."""
        return np.asarray(S.csr @ self.full(S.n))


def estimate_shrinkage(E: np.ndarray, labels: Sequence[str] | None = None, lam: float | None = None) -> ShrinkageCovariance:
    """Shrink the one-step error covariance of E (T x n) towards its diagonal.

    The sample covariance is the uncentred ``E'E / T``. The intensity is
    ``sum Var(r_ij) / sum r_ij^2`` over i != j, where ``Var(r_ij)`` is the sample
    variance of the standardised cross-products divided by T, clamped to
    [0, 1]; with no off-diagonal correlation it is 1. Pass ``lam`` to fix it.
    """
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ValueError("need a T x n error matrix with T >= 2")
    if not np.all(np.isfinite(E)):
        raise ValueError("error matrix contains non-finite values")
    T, n = E.shape
    W1 = E.T @ E / T
    d = np.diag(W1).copy()
    bad = np.flatnonzero(d <= 0.0)
    if bad.size:
        names = [labels[i] for i in bad] if labels is not None else [str(i) for i in bad]
        raise DegenerateSeriesError(names)
    if lam is None:
        Xs = E / np.sqrt(d)
        R = Xs.T @ Xs / T
        Xs2 = Xs * Xs
        var_r = (Xs2.T @ Xs2 - T * R * R) / (T * (T - 1))
        np.fill_diagonal(var_r, 0.0)
        np.fill_diagonal(R, 0.0)
        denom = float(np.sum(R * R))
        lam = 1.0 if denom == 0.0 else float(np.clip(np.sum(var_r) / denom, 0.0, 1.0))
    elif not 0.0 <= lam <= 1.0:
        raise ValueError(f"shrinkage intensity must lie in [0, 1], got {lam}")
    shrunk = (1.0 - lam) * W1
    shrunk[np.diag_indices(n)] = d
    shrunk = 0.5 * (shrunk + shrunk.T)
    shrunk[np.diag_indices(n)] = d
    return ShrinkageCovariance(diagonal=d, lam=float(lam), full_sample=W1, shrunk=shrunk)


def bottom_up_map(S: SummingMatrix) -> ReconciliationMap:
    return ReconciliationMap(G=np.eye(S.m), method="bottom-up", rows=np.arange(S.n - S.m, S.n))


def build_map(
    S: SummingMatrix,
    W: ShrinkageCovariance | np.ndarray | None = None,
    method: str | None = None,
    rows: Sequence[int] | None = None,
) -> ReconciliationMap:
    """G = (S' W^-1 S)^-1 S' W^-1 computed by Cholesky solves.

    ``W`` may be a :class:`ShrinkageCovariance` (its shrunk matrix is used), a
    dense covariance, a 1-D vector of variances, or None for the identity.
    With ``rows`` only those rows of S take part and W must match them.
    """
    if method == "bottom-up":
        return bottom_up_map(S)
    A = S.entries.astype(np.float64)
    if rows is not None:
        rows = np.asarray(rows, dtype=int)
        A = A[rows]
    nr = A.shape[0]
    if W is None:
        Z = A
        tag = method or "ols-identity"
    else:
        if isinstance(W, ShrinkageCovariance):
            W = W.diagonal if method == "wls-diagonal" else W.shrunk
            tag = method or "mint-shrink"
        else:
            tag = method or "mint-shrink"
        W = np.asarray(W, dtype=np.float64)
        if W.ndim == 1:
            if W.shape[0] != nr or np.any(W <= 0):
                raise ReconciliationError("variance vector must be positive with length n")
            Z = A / W[:, None]
        else:
            if W.shape != (nr, nr):
                raise ReconciliationError(f"W has shape {W.shape}, expected ({nr}, {nr})")
            try:
                c = scipy.linalg.cho_factor(W, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise ReconciliationError(
                    "W is not positive definite; increase the shrinkage intensity"
                ) from exc
            Z = scipy.linalg.cho_solve(c, A, check_finite=False)
    M = A.T @ Z
    M = 0.5 * (M + M.T)
    try:
        cm = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise ReconciliationError("S' W^-1 S is singular; S must have full column rank") from exc
    G = scipy.linalg.cho_solve(cm, Z.T, check_finite=False)
    return ReconciliationMap(G=G, method=tag, rows=rows)


def map_for_errors(
    S: SummingMatrix,
    E: np.ndarray,
    method: str = "mint-shrink",
    labels=None,
    lam=None,
    rows: Sequence[int] | None = None,
) -> tuple[ReconciliationMap, ShrinkageCovariance | None]:
    """Build the map for ``method`` from in-sample one-step errors E (T x n).

    With ``rows``, E holds only those nodes' columns and the map uses only them.

    For mint-shrink a factorisation failure of the shrunk matrix falls back to
    the diagonal (lambda = 1) with a warning.
    """
    if method not in METHODS:
        raise ValueError(f"unknown reconciliation method {method!r}; choose from {METHODS}")
    if method == "bottom-up":
        return bottom_up_map(S), None
    if method == "ols-identity":
        return build_map(S, None, rows=rows), None
    cov = estimate_shrinkage(E, labels=labels, lam=lam)
    if method == "wls-diagonal":
        return build_map(S, cov.diagonal, method="wls-diagonal", rows=rows), cov
    try:
        return build_map(S, cov.shrunk, method="mint-shrink", rows=rows), cov
    except ReconciliationError:
        warnings.warn("shrunk covariance not positive definite; using its diagonal", ShrinkageFallbackWarning, stacklevel=2)
        cov = ShrinkageCovariance(cov.diagonal, 1.0, cov.full_sample, np.diag(cov.diagonal))
        return build_map(S, cov.diagonal, method="mint-shrink", rows=rows), cov


def reconcile_points(rmap: ReconciliationMap, S: SummingMatrix, base: np.ndarray) -> np.ndarray:
    """Reconcile base forecasts (n or n x h)."""
    base = np.asarray(base, dtype=np.float64)
    if rmap.rows is not None and base.shape[0] == S.n and S.n != rmap.G.shape[1]:
        base = base[rmap.rows]
    if base.shape[0] != rmap.G.shape[1]:
        raise ValueError(f"base has {base.shape[0]} rows, map expects {rmap.G.shape[1]}")
    flat = base.reshape(base.shape[0], -1)
    out = np.asarray(S.csr @ (rmap.G @ flat))
    return out.reshape((S.n,) + base.shape[1:])


def reconcile_paths(rmap: ReconciliationMap, S: SummingMatrix, paths: np.ndarray) -> np.ndarray:
    """Reconcile sample paths given as a K x n x h array."""
    paths = np.asarray(paths, dtype=np.float64)
    if paths.ndim != 3:
        raise ValueError("paths must be K x n x h")
    K, n, h = paths.shape
    if rmap.rows is not None and n == S.n and S.n != rmap.G.shape[1]:
        paths = paths[:, rmap.rows]
        n = paths.shape[1]
    flat = np.moveaxis(paths, 1, 0).reshape(n, K * h)
    out = reconcile_points(rmap, S, flat)
    return np.moveaxis(out.reshape(S.n, K, h), 0, 1)
