"""Regression design for hourly series: intercept, trend, daily/weekly Fourier terms, lags."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DAY = 24
WEEK = 7 * 24


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class DesignConfig:
    fourier_orders: tuple[int, int] = (3, 2)
    lags: tuple[int, ...] = (1, 24)
    include_trend: bool = True
    include_intercept: bool = True

    def __post_init__(self):
        l1, l2 = (int(v) for v in self.fourier_orders)
        if l1 < 0 or l2 < 0:
            raise ValueError("Fourier orders must be nonnegative")
        lags = tuple(int(v) for v in self.lags)
        if any(v < 1 for v in lags):
            raise ValueError(f"lags must be positive, got {lags}")
        if len(set(lags)) != len(lags):
            raise ValueError(f"lags must be distinct, got {lags}")
        object.__setattr__(self, "fourier_orders", (l1, l2))
        object.__setattr__(self, "lags", tuple(sorted(lags)))

    @property
    def max_lag(self) -> int:
        return max(self.lags, default=0)

    @property
    def n_deterministic(self) -> int:
        l1, l2 = self.fourier_orders
        return int(self.include_intercept) + int(self.include_trend) + 2 * l1 + 2 * l2

    @property
    def n_columns(self) -> int:
        return self.n_deterministic + len(self.lags)

    def column_names(self) -> list[str]:
        l1, l2 = self.fourier_orders
        names = []
        if self.include_intercept:
            names.append("intercept")
        if self.include_trend:
            names.append("trend")
        names += [f"sin_day_{k}" for k in range(1, l1 + 1)]
        names += [f"cos_day_{k}" for k in range(1, l1 + 1)]
        names += [f"sin_week_{k}" for k in range(1, l2 + 1)]
        names += [f"cos_week_{k}" for k in range(1, l2 + 1)]
        names += [f"lag_{v}" for v in self.lags]
        return names


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    column_names: tuple[str, ...]
    response: np.ndarray
    time_offsets: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def deterministic_features(t: np.ndarray, cfg: DesignConfig) -> np.ndarray:
    """Intercept, trend and Fourier columns at absolute hour indices ``t``."""
    t = np.asarray(t, dtype=np.float64)
    l1, l2 = cfg.fourier_orders
    cols = []
    if cfg.include_intercept:
        cols.append(np.ones_like(t))
    if cfg.include_trend:
        cols.append(t)
    for period, order in ((DAY, l1), (WEEK, l2)):
        # reduce the phase first so large t keeps full precision
        ang = [2.0 * np.pi * np.mod(k * t, period) / period for k in range(1, order + 1)]
        cols += [np.sin(a) for a in ang]
        cols += [np.cos(a) for a in ang]
    if not cols:
        return np.empty(t.shape + (0,))
    return np.stack(cols, axis=-1)


def build_design(y: np.ndarray, t0: int, cfg: DesignConfig) -> DesignMatrix:
    """Design matrix for ``y`` whose first element sits at absolute hour ``t0``.

    Rows with a missing response or any missing lag are dropped.
    """
    y = np.asarray(y, dtype=np.float64)
    T = y.shape[0]
    L = cfg.max_lag
    p = cfg.n_columns
    if T <= L:
        raise InsufficientDataError(f"series of length {T} is too short for lag {L}")
    idx = np.arange(L, T)
    lagged = np.column_stack([y[idx - v] for v in cfg.lags]) if cfg.lags else np.empty((idx.size, 0))
    resp = y[idx]
    keep = np.isfinite(resp) & np.all(np.isfinite(lagged), axis=1)
    if keep.sum() < p + 1:
        raise InsufficientDataError(f"only {int(keep.sum())} complete rows for {p} columns")
    idx = idx[keep]
    t = t0 + idx
    X = np.hstack([deterministic_features(t, cfg), lagged[keep]])
    return DesignMatrix(values=X, column_names=tuple(cfg.column_names()), response=resp[keep], time_offsets=t)


def build_forecast_row(history: np.ndarray, t: int, cfg: DesignConfig, t0: int = 0) -> np.ndarray:
    """Predictor row for absolute hour ``t``.

    ``history[k]`` holds the value at hour ``t0 + k``: observations, followed by
    forecasts already made for hours after the sample end.
    """
    history = np.asarray(history, dtype=np.float64)
    lag_vals = []
    for v in cfg.lags:
        k = t - v - t0
        if k < 0 or k >= history.shape[0] or not np.isfinite(history[k]):
            raise InsufficientDataError(f"no value for hour {t - v} needed by lag {v} at hour {t}")
        lag_vals.append(history[k])
    return np.concatenate([deterministic_features(np.array([t]), cfg)[0], np.array(lag_vals, dtype=np.float64)])


def acf(y: np.ndarray, max_lag: int) -> np.ndarray:
    """Sample autocorrelations at lags ``0..max_lag``."""
    y = np.asarray(y, dtype=np.float64)
    T = y.shape[0]
    if T <= max_lag + 1:
        raise InsufficientDataError(f"need more than {max_lag + 1} points, got {T}")
    d = y - y.mean()
    denom = float(d @ d)
    if denom <= 0.0:
        raise ValueError("autocorrelation undefined for a constant series")
    return np.array([float(d[: T - k] @ d[k:]) / denom for k in range(max_lag + 1)])


def pacf(y: np.ndarray, max_lag: int) -> np.ndarray:
    """Partial autocorrelations at lags ``0..max_lag`` by Durbin-Levinson."""
    r = acf(y, max_lag)
    out = np.zeros(max_lag + 1)
    out[0] = 1.0
    if max_lag == 0:
        return out
    phi = np.array([r[1]])
    out[1] = r[1]
    v = 1.0 - r[1] ** 2
    for k in range(2, max_lag + 1):
        a = (r[k] - phi @ r[k - 1:0:-1]) / v
        phi = np.append(phi - a * phi[::-1], a)
        v *= 1.0 - a * a
        out[k] = a
    return out
