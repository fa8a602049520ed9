"""Blocked cross-validation, the end-to-end pipeline, and RMSE/timing reports."""
from __future__ import annotations

import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .bootstrap import LEVERAGE_CEILING, HighLeverageWarning, IntervalSet, _level_key, draw, modified_residuals, node_rng
from .design import DesignConfig, InsufficientDataError, build_design, deterministic_features
from .hierarchy import SummingMatrix
from .ingest import SeriesCollection
from .ols import FitResult, fit, fit_batch, recurse
from .reconcile import DegenerateSeriesError, ReconciliationError, map_for_errors

log = logging.getLogger(__name__)

STAGES = ("Base forecast", "Reconciling forecasts", "Reconciling sample paths")
DRAW_MODES = ("independent", "joint")
METHOD_LABELS = {"reconciled": "pipeline", "base": "base", "seasonal-naive": "seasonal-naive"}


class PipelineError(RuntimeError):
    pass


# -- cross-validation plan -------------------------------------------------

@dataclass(frozen=True)
class CvPlan:
    T_train: int
    T_test: int
    splits: tuple[tuple[tuple[int, int], tuple[int, int]], ...]

    def __len__(self):
        return len(self.splits)


def plan_blocked_cv(T: int, T_train: int = 336, T_test: int = 24) -> CvPlan:
    """Fixed-size sliding windows advancing by ``T_test``."""
    if T_train < 1 or T_test < 1:
        raise ValueError("window sizes must be positive")
    if T < T_train + T_test:
        raise ValueError(f"series of {T} points is shorter than T_train + T_test = {T_train + T_test}")
    count = (T - T_train) // T_test
    splits = tuple(
        ((s * T_test, s * T_test + T_train), (s * T_test + T_train, s * T_test + T_train + T_test)) for s in range(count)
    )
    return CvPlan(T_train=T_train, T_test=T_test, splits=splits)


def plan_for_starts(starts: Iterable[int], T: int, T_train: int = 336, T_test: int = 24) -> CvPlan:
    """One split per test start, training on the preceding ``T_train`` hours.

    Starts without enough history or room for a full test window are skipped.
    """
    splits = []
    for s in sorted(set(int(v) for v in starts)):
        if s - T_train >= 0 and s + T_test <= T:
            splits.append(((s - T_train, s), (s, s + T_test)))
    return CvPlan(T_train=T_train, T_test=T_test, splits=tuple(splits))


# -- scores ----------------------------------------------------------------

def rmse(actual: np.ndarray, forecast: np.ndarray) -> float:
    a = np.asarray(actual, dtype=np.float64)
    f = np.asarray(forecast, dtype=np.float64)
    if a.shape != f.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {f.shape}")
    if a.size == 0:
        raise ValueError("empty input")
    return float(np.sqrt(np.mean((a - f) ** 2)))


def seasonal_naive(history: np.ndarray, period: int = 168, h: int = 24) -> np.ndarray:
    """Repeat the last full season: step j takes the value ``period`` hours earlier."""
    history = np.asarray(history, dtype=np.float64)
    if history.shape[-1] < period:
        raise InsufficientDataError(f"need {period} points of history, got {history.shape[-1]}")
    season = history[..., history.shape[-1] - period:]
    return season[..., np.arange(h) % period]


# -- pipeline --------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    design: DesignConfig = DesignConfig()
    method: str = "mint-shrink"
    K: int = 2000
    levels: tuple[float, ...] = (0.10, 0.05)
    seed: int = 0
    clamp: bool = False
    shrinkage: float | None = None
    error_pool: int = 0
    naive_period: int = 168
    draws: str = "joint"

    def __post_init__(self):
        if self.draws not in DRAW_MODES:
            raise ValueError(f"draws must be one of {DRAW_MODES}, got {self.draws!r}")


@dataclass
class SplitResult:
    split: int
    train: tuple[int, int]
    test: tuple[int, int]
    actual: np.ndarray
    base: np.ndarray
    reconciled: np.ndarray
    intervals: IntervalSet | None
    naive: np.ndarray
    failed: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    lam: float | None = None
    errors: np.ndarray | None = None


def _fit_nodes(Y: np.ndarray, t0: int, cfg: DesignConfig, labels: Sequence[str]):
    """Fit every column of Y (T x n). Returns fits dict and failure dict."""
    T, n = Y.shape
    L = cfg.max_lag
    fits: dict[int, FitResult] = {}
    failed: dict[int, str] = {}
    complete = np.all(np.isfinite(Y), axis=0)
    batch = np.flatnonzero(complete)
    if batch.size and T > L + cfg.n_columns:
        idx = np.arange(L, T)
        det = deterministic_features(t0 + idx, cfg)
        Yb = Y[:, batch]
        lagged = np.stack([Yb[idx - v] for v in cfg.lags], axis=-1) if cfg.lags else np.empty((idx.size, batch.size, 0))
        X = np.concatenate([np.broadcast_to(det[None], (batch.size,) + det.shape), np.moveaxis(lagged, 1, 0)], axis=2)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            results = fit_batch(X, Yb[idx].T, t0 + idx, cfg.column_names())
        for w in caught:
            log.debug("fit warning: %s", w.message)
        for i, r in zip(batch, results):
            fits[int(i)] = r
    else:
        batch = np.array([], dtype=int)
    for i in np.flatnonzero(~complete):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fits[int(i)] = fit(build_design(Y[:, i], t0, cfg))
        except (InsufficientDataError, ValueError) as exc:
            failed[int(i)] = f"{labels[i]}: {exc}"
    return fits, failed


def _align_errors(fits: dict[int, FitResult], nodes: Sequence[int]) -> np.ndarray:
    """T x len(nodes) residual matrix on the hours shared by all fits."""
    common = None
    for i in nodes:
        off = fits[i].time_offsets
        common = off if common is None else np.intersect1d(common, off)
    E = np.empty((common.size, len(nodes)))
    for c, i in enumerate(nodes):
        f = fits[i]
        E[:, c] = f.residuals[np.searchsorted(f.time_offsets, common)]
    return E


def run_split(
    collection: SeriesCollection,
    split: int,
    train: tuple[int, int],
    test: tuple[int, int],
    cfg: PipelineConfig = PipelineConfig(),
    intervals: bool = True,
    prior_errors: Sequence[np.ndarray] = (),
) -> SplitResult:
    """Fit, forecast, reconcile and bootstrap one train/test split.

    Nodes that cannot be fitted (too many missing values, missing values at
    the forecast origin, zero residual variance) are left out of the map and
    reported in ``failed``; their base forecasts are NaN while their reconciled
    forecasts still come from the remaining nodes.
    """
    S: SummingMatrix = collection.S
    labels = S.node_labels
    n = S.n
    dcfg = cfg.design
    L = dcfg.max_lag
    a, b = train
    h = test[1] - test[0]
    if test[0] != b:
        raise ValueError("test window must start where the training window ends")
    Yall = collection.nodes
    Y = Yall[a:b]
    actual = Yall[test[0]:test[1]].T.copy()
    timings = dict.fromkeys(STAGES, 0.0)

    clock = time.perf_counter()
    fits, failed_idx = _fit_nodes(Y, a, dcfg, labels)
    tails = Y[Y.shape[0] - L:].T if L else np.empty((n, 0))
    for i in list(fits):
        if not np.all(np.isfinite(tails[i])):
            failed_idx[i] = f"{labels[i]}: missing values at the forecast origin"
            del fits[i]
    good = [i for i in range(n) if i in fits]
    E = _align_errors(fits, good) if good else np.empty((0, 0))
    var = np.einsum("ij,ij->j", E, E) if E.size else np.empty(0)
    # residuals at rounding level count as zero: the series is fitted exactly
    scale = np.array([np.nanmax(np.abs(Y[:, i])) if np.any(np.isfinite(Y[:, i])) else 0.0 for i in good])
    floor = E.shape[0] * (1e-9 * np.maximum(scale, 1.0)) ** 2 if E.size else np.empty(0)
    for c, i in enumerate(good):
        if not var[c] > floor[c]:
            failed_idx[i] = f"{labels[i]}: zero-variance residuals"
    good_mask = np.zeros(n, dtype=bool)
    good_mask[[i for i in good if i not in failed_idx]] = True
    keep_cols = [c for c, i in enumerate(good) if good_mask[i]]
    good = [i for i in good if good_mask[i]]
    E = E[:, keep_cols]
    if not good:
        raise PipelineError(f"split {split}: no node could be fitted")
    coefs = np.stack([fits[i].coefficients for i in good])
    base = np.full((n, h), np.nan)
    base[good] = recurse(coefs, tails[good], test[0], h, dcfg)
    timings["Base forecast"] += time.perf_counter() - clock

    clock = time.perf_counter()
    E_map = E
    if prior_errors:
        full = np.full((E.shape[0], n), np.nan)
        full[:, good] = E
        stacked = np.vstack(list(prior_errors) + [full])[:, good]
        E_map = stacked[np.all(np.isfinite(stacked), axis=1)]
    rows = np.array(good)
    if cfg.method == "bottom-up":
        missing = [labels[i] for i in range(n - S.m, n) if not good_mask[i]]
        if missing:
            raise PipelineError(f"split {split}: bottom-up needs every bottom node; failed: {missing[:5]}")
    uncovered = np.flatnonzero(np.asarray(S.csr[rows].sum(axis=0)).ravel() == 0)
    if uncovered.size:
        names = [S.bottom_labels[j] for j in uncovered[:5]]
        raise PipelineError(f"split {split}: no fitted node covers bottom series {names}")
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            rmap, cov = map_for_errors(
                S, E_map, cfg.method, labels=[labels[i] for i in good], lam=cfg.shrinkage,
                rows=None if len(good) == n else rows,
            )
        for w in caught:
            log.warning("split %d: %s", split, w.message)
    except (ReconciliationError, DegenerateSeriesError) as exc:
        raise PipelineError(f"split {split}: {exc}") from exc
    map_rows = np.arange(n) if rmap.rows is None else rmap.rows
    pos_in_good = {i: c for c, i in enumerate(good)}
    sel = np.array([pos_in_good[i] for i in map_rows])
    G = rmap.G
    reconciled = np.asarray(S.csr @ (G @ base[map_rows]))
    timings["Reconciling forecasts"] += time.perf_counter() - clock

    iv = None
    if intervals:
        iv = _bootstrap(collection, split, fits, good, coefs, tails[good], test[0], h, G, sel, cfg, timings)
        object.__setattr__(iv, "point", reconciled)

    naive = np.full((n, h), np.nan)
    if Y.shape[0] >= cfg.naive_period:
        naive = seasonal_naive(Y.T, cfg.naive_period, h)

    full_E = np.full((E.shape[0], n), np.nan)
    full_E[:, good] = E
    return SplitResult(
        split=split,
        train=train,
        test=test,
        actual=actual,
        base=base,
        reconciled=reconciled,
        intervals=iv,
        naive=naive,
        failed={labels[i]: msg for i, msg in sorted(failed_idx.items())},
        timings=timings,
        lam=None if cov is None else cov.lam,
        errors=full_E if cfg.error_pool else None,
    )


def _bootstrap(collection, split, fits, good, coefs, tails, start, h, G, sel, cfg: PipelineConfig, timings) -> IntervalSet:
    """Stream K reconciled sample paths one horizon step at a time."""
    S = collection.S
    K = cfg.K
    levels = tuple(_level_key(a) for a in cfg.levels)
    if K < 2.0 / min(levels):
        raise ValueError(f"K={K} is too small for level {min(levels)}")
    clock = time.perf_counter()
    shocks = np.empty((K, len(good)))
    if cfg.draws == "joint":
        pool = joint_residuals(fits, good)
        rng = node_rng(cfg.seed, split)

        def shock(j):
            return pool[rng.integers(0, pool.shape[0], size=K)]
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", HighLeverageWarning)
            pools = [modified_residuals(fits[i]).values for i in good]
        rngs = [node_rng(cfg.seed, split, i) for i in good]

        def shock(j):
            for c, (rng, pool) in enumerate(zip(rngs, pools)):
                shocks[:, c] = draw(rng, pool, K)
            return shocks

    qs = sorted({q for a in levels for q in (a / 2.0, 1.0 - a / 2.0)})
    est = np.empty((len(qs), S.n, h))
    gen_time = [time.perf_counter() - clock]
    rec_time = [0.0]

    def on_step(j, vals):
        t1 = time.perf_counter()
        rec = np.asarray(S.csr @ (G @ vals[:, sel].T))  # (n, K)
        est[:, :, j] = np.quantile(rec, qs, axis=1, method="linear")
        rec_time[0] += time.perf_counter() - t1

    t0 = time.perf_counter()
    recurse(coefs, tails, start, h, cfg.design, shock=shock, on_step=on_step)
    gen_time[0] += time.perf_counter() - t0 - rec_time[0]
    timings["Base forecast"] += gen_time[0]
    timings["Reconciling sample paths"] += rec_time[0]
    by_q = dict(zip(qs, est))
    lower, upper = {}, {}
    for a in levels:
        lo, hi = by_q[a / 2.0], by_q[1.0 - a / 2.0]
        if cfg.clamp:
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
        lower[a], upper[a] = lo, hi
    return IntervalSet(levels=levels, lower=lower, upper=upper, K=K, clamped=cfg.clamp)


def joint_residuals(fits: dict[int, FitResult], nodes: Sequence[int]) -> np.ndarray:
    """Modified residuals of all ``nodes`` on their shared hours (T x N).

    Resampling whole rows keeps the cross-series dependence of the errors.
    Hours where any node has unit leverage are dropped.
    """
    common = None
    for i in nodes:
        off = fits[i].time_offsets
        common = off if common is None else np.intersect1d(common, off)
    E = np.empty((common.size, len(nodes)))
    H = np.empty_like(E)
    for c, i in enumerate(nodes):
        f = fits[i]
        pos = np.searchsorted(f.time_offsets, common)
        E[:, c] = f.residuals[pos]
        H[:, c] = f.leverages[pos]
    keep = np.all(H < LEVERAGE_CEILING, axis=1)
    if not keep.any():
        raise PipelineError("no hour without unit leverage is shared by all nodes")
    M = E[keep] / np.sqrt(1.0 - H[keep])
    return M - M.mean(axis=0)


# -- reports ---------------------------------------------------------------

@dataclass
class EvalReport:
    summary: pd.DataFrame  # level, method, mean_rmse, se, cells, display
    log: pd.DataFrame  # split, node, level, method, rmse
    timings: pd.DataFrame  # split x stage seconds
    failures: pd.DataFrame  # split, node, reason
    pooling: str = "standard error over all series x split cells of each aggregation level"

    @property
    def timing_summary(self) -> pd.DataFrame:
        mean = self.timings[list(STAGES)].mean()
        return pd.DataFrame({"stage": list(STAGES), "seconds": [float(mean[s]) for s in STAGES]})


def format_value(x: float) -> str:
    if not np.isfinite(x):
        return "nan"
    if abs(x) >= 10:
        return f"{x:.0f}"
    if abs(x) >= 1:
        return f"{x:.1f}"
    return f"{x:.2f}"


def summarize_log(log_df: pd.DataFrame, level_order: Sequence[str] | None = None) -> pd.DataFrame:
    """Mean and standard error of RMSE per aggregation level and method."""
    g = log_df.groupby(["level", "method"], sort=False)["rmse"]
    out = g.agg(mean_rmse="mean", sd=lambda s: s.std(ddof=1) if len(s) > 1 else 0.0, cells="count").reset_index()
    out["se"] = out["sd"] / np.sqrt(out["cells"])
    out = out.drop(columns="sd")
    if level_order is not None:
        rank = {lvl: i for i, lvl in enumerate(level_order)}
        out = out.sort_values(["level", "method"], key=lambda c: c.map(rank) if c.name == "level" else c, kind="stable")
    out["display"] = [f"{format_value(m)} ({format_value(s)})" for m, s in zip(out["mean_rmse"], out["se"])]
    return out.reset_index(drop=True)


def build_report(results: Sequence[SplitResult], S: SummingMatrix) -> EvalReport:
    levels = S.index.levels
    labels = np.array(S.node_labels, dtype=object)
    rows = []
    for r in results:
        ok = np.isfinite(r.actual)
        for key, fc in (("reconciled", r.reconciled), ("base", r.base), ("seasonal-naive", r.naive)):
            err = np.where(ok & np.isfinite(fc), (r.actual - fc) ** 2, np.nan)
            cnt = np.sum(np.isfinite(err), axis=1)
            with np.errstate(invalid="ignore"):
                score = np.sqrt(np.nansum(err, axis=1) / np.where(cnt > 0, cnt, np.nan))
            valid = cnt > 0
            rows.append(
                pd.DataFrame(
                    {
                        "split": r.split,
                        "node": labels[valid],
                        "level": levels[valid],
                        "method": METHOD_LABELS[key],
                        "rmse": score[valid],
                    }
                )
            )
    log_df = pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=["split", "node", "level", "method", "rmse"])
    order = [name for name, _, _ in S.index.blocks]
    summary = summarize_log(log_df, order)
    timings = pd.DataFrame([{"split": r.split, **r.timings} for r in results])
    failures = pd.DataFrame(
        [{"split": r.split, "node": k, "reason": v} for r in results for k, v in r.failed.items()],
        columns=["split", "node", "reason"],
    )
    return EvalReport(summary=summary, log=log_df, timings=timings, failures=failures)


@dataclass
class PipelineResult:
    plan: CvPlan
    splits: list[SplitResult]
    report: EvalReport
    errors: dict[int, str] = field(default_factory=dict)


_WORKER_STATE: dict = {}


def _worker_init(collection, cfg, intervals):
    _WORKER_STATE.update(collection=collection, cfg=cfg, intervals=intervals)


def _worker_run(args):
    s, train, test = args
    st = _WORKER_STATE
    try:
        return run_split(st["collection"], s, train, test, st["cfg"], st["intervals"])
    except (PipelineError, ValueError) as exc:
        return str(exc)


def iter_splits(collection, plan: CvPlan, cfg: PipelineConfig, intervals=True, only: Sequence[int] | None = None):
    """Yield (split index, SplitResult or error message) sequentially."""
    pool: list[np.ndarray] = []
    for s, (train, test) in enumerate(plan.splits):
        if only is not None and s not in only:
            continue
        try:
            res = run_split(collection, s, train, test, cfg, intervals, prior_errors=pool[-cfg.error_pool:] if cfg.error_pool else ())
        except (PipelineError, ValueError) as exc:
            log.error("%s", exc)
            yield s, str(exc)
            continue
        if cfg.error_pool:
            pool.append(res.errors)
            pool = pool[-cfg.error_pool:]
        yield s, res


def run_pipeline(
    collection: SeriesCollection,
    plan: CvPlan,
    cfg: PipelineConfig = PipelineConfig(),
    intervals: bool = True,
    workers: int = 1,
    only: Sequence[int] | None = None,
) -> PipelineResult:
    """Run every split of ``plan`` and summarise.

    Splits are independent unless ``cfg.error_pool`` is set, so with
    ``workers > 1`` they run in separate processes; random streams are keyed by
    (seed, split, node) and results do not depend on ``workers``.
    """
    results: list[SplitResult] = []
    errors: dict[int, str] = {}
    todo = [(s, tr, te) for s, (tr, te) in enumerate(plan.splits) if only is None or s in only]
    if workers > 1 and not cfg.error_pool and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init, initargs=(collection, cfg, intervals)) as ex:
            for (s, _, _), res in zip(todo, ex.map(_worker_run, todo)):
                if isinstance(res, str):
                    errors[s] = res
                else:
                    results.append(res)
    else:
        for s, res in iter_splits(collection, plan, cfg, intervals, only):
            if isinstance(res, str):
                errors[s] = res
            else:
                results.append(res)
    return PipelineResult(plan=plan, splits=results, report=build_report(results, collection.S), errors=errors)
