"""Per-series least squares fits and recursive multi-step prediction."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .design import DesignConfig, DesignMatrix, InsufficientDataError, deterministic_features

# relative pivot size under which a column counts as linearly dependent
RANK_RTOL = 1e-10


class RankDeficientWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FitResult:
    coefficients: np.ndarray
    residuals: np.ndarray
    leverages: np.ndarray
    rank: int
    sigma2: float
    fitted: np.ndarray
    time_offsets: np.ndarray
    column_names: tuple[str, ...] = ()

    @property
    def n_obs(self) -> int:
        return self.residuals.shape[0]


def _check(X: np.ndarray, y: np.ndarray):
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("design has no rows")
    if X.shape[0] < X.shape[1]:
        raise ValueError(f"design has fewer rows ({X.shape[0]}) than columns ({X.shape[1]})")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("design or response contains non-finite values")


def _solve_svd(X: np.ndarray, y: np.ndarray):
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    keep = s > RANK_RTOL * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
    r = int(keep.sum())
    Ur = U[:, keep]
    coef = Vt[keep].T @ ((Ur.T @ y) / s[keep])
    return coef, np.einsum("ij,ij->i", Ur, Ur), r


def _solve(X: np.ndarray, y: np.ndarray):
    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size and d[0] > 0 and np.all(d > RANK_RTOL * d[0]):
        coef = np.empty(X.shape[1])
        coef[piv] = scipy.linalg.solve_triangular(R, Q.T @ y)
        return coef, np.einsum("ij,ij->i", Q, Q), X.shape[1]
    coef, lev, r = _solve_svd(X, y)
    warnings.warn(
        f"design is rank deficient (rank {r} < {X.shape[1]}); using the minimum-norm solution",
        RankDeficientWarning,
        stacklevel=3,
    )
    return coef, lev, r


def fit_arrays(X: np.ndarray, y: np.ndarray, time_offsets=None, column_names=()) -> FitResult:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check(X, y)
    coef, lev, rank = _solve(X, y)
    fitted = X @ coef
    resid = y - fitted
    dof = X.shape[0] - rank
    sigma2 = float(resid @ resid / dof) if dof > 0 else float("nan")
    if time_offsets is None:
        time_offsets = np.arange(X.shape[0])
    return FitResult(
        coefficients=coef,
        residuals=resid,
        leverages=np.clip(lev, 0.0, 1.0),
        rank=rank,
        sigma2=sigma2,
        fitted=fitted,
        time_offsets=np.asarray(time_offsets),
        column_names=tuple(column_names),
    )


def fit(dm: DesignMatrix) -> FitResult:
    """Least squares fit of ``dm.response`` on ``dm.values`` via pivoted QR.

    Rank-deficient designs fall back to the SVD minimum-norm solution with a
    :class:`RankDeficientWarning`. Leverages are squared row norms of the
    orthonormal factor spanning the column space.
    """
    return fit_arrays(dm.values, dm.response, dm.time_offsets, dm.column_names)


def fit_batch(X: np.ndarray, Y: np.ndarray, time_offsets=None, column_names=()) -> list[FitResult]:
    """Fit N problems sharing a row count at once; ``X`` is (N, r, p), ``Y`` is (N, r)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    N, r, p = X.shape
    if r < p or r == 0:
        raise ValueError(f"design has {r} rows for {p} columns")
    if time_offsets is None:
        time_offsets = np.arange(r)
    finite = np.all(np.isfinite(X), axis=(1, 2)) & np.all(np.isfinite(Y), axis=1)
    Q, R = np.linalg.qr(np.where(finite[:, None, None], X, 0.0))
    d = np.abs(np.diagonal(R, axis1=1, axis2=2))
    dmax = d.max(axis=1)
    good = finite & (dmax > 0) & np.all(d > RANK_RTOL * dmax[:, None], axis=1)
    qty = np.einsum("nrp,nr->np", Q, np.where(finite[:, None], Y, 0.0))
    out: list[FitResult] = []
    coefs = np.zeros((N, p))
    if good.any():
        coefs[good] = np.linalg.solve(R[good], qty[good][..., None])[..., 0]
    lev = np.einsum("nrp,nrp->nr", Q, Q)
    for i in range(N):
        if not good[i]:
            out.append(fit_arrays(X[i], Y[i], time_offsets, column_names))
            continue
        fitted = X[i] @ coefs[i]
        resid = Y[i] - fitted
        out.append(
            FitResult(
                coefficients=coefs[i],
                residuals=resid,
                leverages=np.clip(lev[i], 0.0, 1.0),
                rank=p,
                sigma2=float(resid @ resid / (r - p)) if r > p else float("nan"),
                fitted=fitted,
                time_offsets=np.asarray(time_offsets),
                column_names=tuple(column_names),
            )
        )
    return out


def recurse(
    coefs: np.ndarray,
    tail: np.ndarray,
    start: int,
    h: int,
    cfg: DesignConfig,
    shock: Callable[[int], np.ndarray] | None = None,
    on_step: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray | None:
    """Vectorised recursive forecasting for N series.

    ``coefs`` is (N, p); ``tail`` is (N, L) with the values at hours
    ``start - L .. start - 1`` (L >= the largest lag). Step ``j`` forecasts hour
    ``start + j`` and reads lags from ``tail`` or from earlier steps.

    ``shock(j)`` may return an additive disturbance broadcastable against the
    step values (e.g. (K, N) for K sample paths). With ``on_step`` each step is
    handed over and dropped once no later lag needs it (returns None);
    otherwise the (..., N, h) stack of steps is returned.
    """
    coefs = np.asarray(coefs, dtype=np.float64)
    tail = np.asarray(tail, dtype=np.float64)
    nd = cfg.n_deterministic
    L = tail.shape[1]
    if h < 1:
        raise ValueError("horizon must be at least 1")
    if L < cfg.max_lag:
        raise InsufficientDataError(f"need {cfg.max_lag} trailing values, got {L}")
    det = deterministic_features(np.arange(start, start + h), cfg) @ coefs[:, :nd].T  # (h, N)
    eta = coefs[:, nd:]
    steps: dict[int, np.ndarray] = {}
    kept = []
    for j in range(h):
        val = det[j]
        for li, lag in enumerate(cfg.lags):
            src = j - lag
            prev = tail[:, L + src] if src < 0 else steps[src]
            val = val + eta[:, li] * prev
        if shock is not None:
            val = val + shock(j)
        steps[j] = val
        if on_step is None:
            kept.append(val)
        else:
            on_step(j, val)
            for i in list(steps):
                if not any(j < i + lag < h for lag in cfg.lags):
                    del steps[i]
    if on_step is None:
        return np.stack(kept, axis=-1)
    return None


def predict_recursive(fit: FitResult, history: np.ndarray, cfg: DesignConfig, h: int, t0: int = 0) -> np.ndarray:
    """Forecast the ``h`` hours following ``history`` (whose first value is hour ``t0``).

    Forecasts made at earlier steps feed the lag predictors of later steps.
    """
    history = np.asarray(history, dtype=np.float64)
    L = cfg.max_lag
    if history.shape[0] < L:
        raise InsufficientDataError(f"history of {history.shape[0]} values is shorter than lag {L}")
    tail = history[history.shape[0] - L:][None, :] if L else np.empty((1, 0))
    if not np.all(np.isfinite(tail)):
        raise InsufficientDataError("history has missing values at required lags")
    return recurse(fit.coefficients[None, :], tail, t0 + history.shape[0], h, cfg)[0]
