"""Residual bootstrap sample paths and percentile prediction intervals."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .design import DesignConfig, InsufficientDataError
from .ols import FitResult, recurse

# leverages above this are treated as exactly one
LEVERAGE_CEILING = 1.0 - 1e-10


class HighLeverageWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ModifiedResidualPool:
    values: np.ndarray
    node: str = ""

    def __len__(self):
        return self.values.shape[0]


def _level_key(alpha: float) -> float:
    return round(float(alpha), 10)


@dataclass(frozen=True)
class IntervalSet:
    """Pointwise bounds per node and horizon step, keyed by alpha."""

    levels: tuple[float, ...]
    lower: dict[float, np.ndarray]
    upper: dict[float, np.ndarray]
    K: int
    point: np.ndarray | None = None
    clamped: bool = field(default=False)

    def bounds(self, alpha: float) -> tuple[np.ndarray, np.ndarray]:
        key = _level_key(alpha)
        if key not in self.lower:
            raise KeyError(f"level {alpha} not available; have {self.levels}")
        return self.lower[key], self.upper[key]


def modified_residuals(fit: FitResult, node: str = "") -> ModifiedResidualPool:
    """Leverage-adjusted residuals ``e / sqrt(1 - h)``, centred to mean zero."""
    e = np.asarray(fit.residuals, dtype=np.float64)
    h = np.asarray(fit.leverages, dtype=np.float64)
    keep = h < LEVERAGE_CEILING
    if not keep.all():
        warnings.warn(
            f"{int((~keep).sum())} row(s) with leverage 1 excluded from the residual pool",
            HighLeverageWarning,
            stacklevel=2,
        )
    if not keep.any():
        raise ValueError("residual pool is empty after excluding unit-leverage rows")
    s = e[keep] / np.sqrt(1.0 - h[keep])
    s = s - s.mean()
    return ModifiedResidualPool(values=s, node=node)


def node_rng(seed, *key: int) -> np.random.Generator:
    """Independent stream for one (split, node, ...) key, stable across runs."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + key))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def draw(rng: np.random.Generator, pool: np.ndarray, K: int) -> np.ndarray:
    """K residuals drawn uniformly with replacement (one horizon step)."""
    return pool[rng.integers(0, pool.shape[0], size=K)]


def sample_paths(
    fit: FitResult,
    history: np.ndarray,
    cfg: DesignConfig,
    pool: ModifiedResidualPool,
    h: int,
    K: int,
    seed=0,
    t0: int = 0,
) -> np.ndarray:
    """K x h bootstrap sample paths continuing ``history``.

    Each step adds a freshly drawn residual to the model prediction built from
    that path's own earlier values, so noise propagates through the lags.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if len(pool) == 0:
        raise ValueError("residual pool is empty")
    history = np.asarray(history, dtype=np.float64)
    L = cfg.max_lag
    if history.shape[0] < L:
        raise InsufficientDataError(f"history of {history.shape[0]} values is shorter than lag {L}")
    tail = history[history.shape[0] - L:][None, :] if L else np.empty((1, 0))
    rng = node_rng(seed)
    vals = pool.values
    out = recurse(
        fit.coefficients[None, :],
        tail,
        t0 + history.shape[0],
        h,
        cfg,
        shock=lambda j: draw(rng, vals, K)[:, None],
    )
    return np.broadcast_to(out, (K, 1, h))[:, 0, :].copy()


def percentile_intervals(
    reconciled_paths: np.ndarray,
    levels: Sequence[float] = (0.10, 0.05),
    point: np.ndarray | None = None,
    clamp: bool = False,
) -> IntervalSet:
    """Pointwise ``alpha/2`` and ``1 - alpha/2`` percentiles over the K paths.

    Percentiles interpolate linearly between order statistics. ``clamp``
    floors all bounds at zero.
    """
    paths = np.asarray(reconciled_paths, dtype=np.float64)
    K = paths.shape[0]
    levels = tuple(_level_key(a) for a in levels)
    if not levels:
        raise ValueError("no interval levels requested")
    if any(not 0.0 < a < 1.0 for a in levels):
        raise ValueError(f"levels must lie in (0, 1), got {levels}")
    if K < 2.0 / min(levels):
        raise ValueError(f"K={K} paths is too few for level {min(levels)} (need >= {2.0 / min(levels):g})")
    qs = sorted({q for a in levels for q in (a / 2.0, 1.0 - a / 2.0)})
    est = np.quantile(paths, qs, axis=0, method="linear")
    by_q = dict(zip(qs, est))
    lower, upper = {}, {}
    for a in levels:
        lo, hi = by_q[a / 2.0], by_q[1.0 - a / 2.0]
        if clamp:
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
        lower[a], upper[a] = lo, hi
    return IntervalSet(levels=levels, lower=lower, upper=upper, K=K, point=point, clamped=clamp)
