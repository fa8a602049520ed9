"""Upper-bound anomaly detection and per-holiday, per-day-part count tables."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .bootstrap import IntervalSet
from .hierarchy import SummingMatrix

DAY_PARTS = {1: (0, 5), 2: (6, 11), 3: (12, 17), 4: (18, 23)}
BUCKETS = ("0-1.5", "1.5-3", "3-4.5", ">=4.5")
BUCKET_EDGES = (1.5, 3.0, 4.5)
DEFAULT_LEVEL = 0.05


class CalendarError(ValueError):
    pass


@dataclass(frozen=True)
class Holiday:
    start: dt.date
    end: dt.date
    label: str

    def __post_init__(self):
        if self.end < self.start:
            raise CalendarError(f"holiday {self.label!r} ends before it starts")

    @property
    def days(self) -> int:
        return (self.end - self.start).days + 1

    @property
    def year(self) -> int:
        return self.start.year


def _date(v) -> dt.date:
    if isinstance(v, dt.datetime):
        return v.date()
    if isinstance(v, dt.date):
        return v
    return pd.Timestamp(str(v).strip()).date()


class HolidayCalendar:
    """Non-overlapping date ranges (inclusive ends), kept in start order."""

    def __init__(self, holidays: Iterable[Holiday | tuple]):
        items = []
        for h in holidays:
            if not isinstance(h, Holiday):
                start, end, *rest = h
                start, end = _date(start), _date(end)
                label = rest[0] if rest else f"{start:%m-%d} to {end:%m-%d}"
                h = Holiday(start, end, label)
            items.append(h)
        items.sort(key=lambda h: h.start)
        for a, b in zip(items, items[1:]):
            if b.start <= a.end:
                raise CalendarError(f"holidays {a.label!r} and {b.label!r} overlap")
        self.holidays: tuple[Holiday, ...] = tuple(items)
        self._days = {a.start + dt.timedelta(days=k): a for a in items for k in range(a.days)}

    def __len__(self):
        return len(self.holidays)

    def __iter__(self):
        return iter(self.holidays)

    @property
    def total_days(self) -> int:
        return sum(h.days for h in self.holidays)

    def lookup(self, when) -> Holiday | None:
        return self._days.get(_date(when))

    def hours_in(self, index: pd.DatetimeIndex) -> np.ndarray:
        """Positions of ``index`` that fall on a holiday."""
        dates = index.date
        return np.flatnonzero([d in self._days for d in dates])

    def within(self, first, last) -> "HolidayCalendar":
        """Holidays clipped to the date range [first, last]; empty ones are dropped."""
        first, last = _date(first), _date(last)
        kept = []
        for h in self.holidays:
            s, e = max(h.start, first), min(h.end, last)
            if s <= e:
                kept.append(Holiday(s, e, h.label if (s, e) == (h.start, h.end) else f"{s:%m-%d} to {e:%m-%d}"))
        return HolidayCalendar(kept)

    @classmethod
    def from_csv(cls, path: str | Path) -> "HolidayCalendar":
        """CSV with columns ``start,end`` and an optional ``label``."""
        try:
            df = pd.read_csv(path, dtype=str, comment="#")
        except pd.errors.EmptyDataError as exc:
            raise CalendarError(f"{path}: empty calendar file") from exc
        missing = {"start", "end"} - set(df.columns)
        if missing:
            raise CalendarError(f"{path}: calendar needs columns start,end (missing {sorted(missing)})")
        rows = []
        for i, r in df.iterrows():
            try:
                s, e = _date(r["start"]), _date(r["end"])
            except ValueError as exc:
                raise CalendarError(f"{path}: line {i + 2}: bad date ({exc})") from exc
            label = r.get("label") if isinstance(r.get("label"), str) and r.get("label") else f"{s:%m-%d} to {e:%m-%d}"
            rows.append(Holiday(s, e, label))
        return cls(rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"start": h.start.isoformat(), "end": h.end.isoformat(), "label": h.label, "days": h.days} for h in self]
        )


_TAIWAN_2019_2021 = {
    2019: ["02-02/02-10", "02-28/03-03", "04-04/04-07", "06-07/06-09", "09-13/09-15", "10-10/10-13"],
    2020: ["01-23/01-29", "02-28/03-01", "04-02/04-05", "05-01/05-03", "06-25/06-28", "10-01/10-04", "10-09/10-11"],
    2021: ["01-01/01-03", "02-10/02-16", "02-27/03-01", "04-02/04-05", "04-30/04-30"],
}


def taiwan_calendar() -> HolidayCalendar:
    """The 18 consecutive holidays of 2019-01-01 .. 2021-04-30 (73 days)."""
    out = []
    for year, spans in _TAIWAN_2019_2021.items():
        for span in spans:
            a, b = span.split("/")
            out.append(Holiday(dt.date.fromisoformat(f"{year}-{a}"), dt.date.fromisoformat(f"{year}-{b}"), f"{a} to {b}"))
    return HolidayCalendar(out)


def day_part(hour: int | np.ndarray):
    """1 for 00-05, 2 for 06-11, 3 for 12-17, 4 for 18-23."""
    return np.asarray(hour) // 6 + 1 if np.ndim(hour) else int(hour) // 6 + 1


def bucket(per_day: float | np.ndarray):
    idx = np.searchsorted(BUCKET_EDGES, per_day, side="right")
    return np.asarray(BUCKETS, dtype=object)[idx] if np.ndim(per_day) else BUCKETS[int(idx)]


@dataclass(frozen=True)
class AnomalyRecord:
    node: str
    timestamp: pd.Timestamp
    observed: float
    upper: float
    level: float
    day_part: int
    holiday: str | None
    side: str = "upper"

    def __post_init__(self):
        if self.side == "upper" and not self.observed > self.upper:
            raise ValueError("an upper anomaly must exceed its bound")
        if self.day_part != day_part(self.timestamp.hour):
            raise ValueError("day_part does not match the timestamp")


def detect(
    observed: np.ndarray,
    intervals: IntervalSet,
    level: float = DEFAULT_LEVEL,
    node_labels: Sequence[str] | None = None,
    timestamps: pd.DatetimeIndex | Sequence | None = None,
    calendar: HolidayCalendar | None = None,
    symmetric: bool = False,
    nodes: Sequence[int] | None = None,
) -> list[AnomalyRecord]:
    """Cells where the observation is strictly above the upper bound.

    ``observed`` is n x h, aligned with the interval arrays. Missing
    observations are never flagged. With ``symmetric`` values strictly below
    the lower bound are also returned (``side="lower"``; the ``upper`` field
    then holds the lower bound). ``nodes`` restricts the search to those rows.
    """
    lo, hi = intervals.bounds(level)
    obs = np.asarray(observed, dtype=np.float64)
    if obs.shape != hi.shape:
        raise ValueError(f"observed shape {obs.shape} does not match intervals {hi.shape}")
    n, h = obs.shape
    labels = list(node_labels) if node_labels is not None else [str(i) for i in range(n)]
    ts = pd.DatetimeIndex(timestamps) if timestamps is not None else pd.DatetimeIndex(pd.Timestamp(0) + pd.to_timedelta(np.arange(h), "h"))
    if len(ts) != h:
        raise ValueError("timestamps must have one entry per horizon step")
    mask = np.zeros(n, dtype=bool)
    mask[list(range(n)) if nodes is None else list(nodes)] = True
    with np.errstate(invalid="ignore"):
        up = (obs > hi) & mask[:, None]
        down = (obs < lo) & mask[:, None] if symmetric else np.zeros_like(up)
    out = []
    for side, flags, bound in (("upper", up, hi), ("lower", down, lo)):
        for i, j in zip(*np.nonzero(flags)):
            t = ts[j]
            hol = calendar.lookup(t) if calendar is not None else None
            out.append(
                AnomalyRecord(
                    node=labels[i],
                    timestamp=t,
                    observed=float(obs[i, j]),
                    upper=float(bound[i, j]),
                    level=float(level),
                    day_part=int(day_part(t.hour)),
                    holiday=hol.label if hol else None,
                    side=side,
                )
            )
    out.sort(key=lambda r: (r.timestamp, r.node, r.side))
    return out


def records_frame(records: Sequence[AnomalyRecord]) -> pd.DataFrame:
    cols = ["node", "timestamp", "observed", "upper", "level", "day_part", "holiday", "side"]
    return pd.DataFrame([[getattr(r, c) for c in cols] for r in records], columns=cols)


def _crossing_block(S: SummingMatrix, group: str, second: str) -> tuple[str, list[int]]:
    for name in (f"{group} x {second}", f"{second} x {group}"):
        try:
            return name, list(S.index.block(name))
        except KeyError:
            continue
    raise KeyError(f"structure has no {group} x {second} crossing")


@dataclass(frozen=True)
class AnomalyTable:
    """Long form: one row per holiday x group x direction x day_part."""

    data: pd.DataFrame
    group: str
    by: str

    def wide(self, decimals: int = 1) -> pd.DataFrame:
        """Holidays as rows; (direction, group value, day_part) columns, rounded."""
        w = self.data.pivot_table(
            index=["year", "holiday"], columns=[self.by, self.group, "day_part"], values="per_day", sort=False
        )
        order = self.data.drop_duplicates(["year", "holiday"])[["year", "holiday"]]
        w = w.reindex(pd.MultiIndex.from_frame(order))
        return w.round(decimals)

    def total_count(self) -> int:
        return int(self.data["count"].sum())


def tabulate(
    records: Sequence[AnomalyRecord],
    calendar: HolidayCalendar,
    S: SummingMatrix,
    by: Sequence[str] = ("region", "direction"),
) -> AnomalyTable:
    """Anomalies per holiday day at the ``by[0] x by[1]`` crossing nodes.

    Only records at those nodes are counted. Every combination present in the
    structure gets a row for every holiday and day part, zero when empty.
    """
    group, second = by
    _, rows = _crossing_block(S, group, second)
    tags = {S.node_labels[i]: S.index.tags[i] for i in rows}
    counts: dict[tuple, int] = {}
    for r in records:
        if r.node not in tags:
            continue
        hol = calendar.lookup(r.timestamp)
        if hol is None:
            raise CalendarError(f"anomaly at {r.timestamp} ({r.node}) lies outside every calendar holiday")
        key = (hol.label, hol.start, tags[r.node][group], tags[r.node][second], r.day_part)
        counts[key] = counts.get(key, 0) + 1
    combos = _order(S, group, second)
    out = []
    for hol in calendar:
        for d, g in combos:
            for part in DAY_PARTS:
                c = counts.get((hol.label, hol.start, g, d, part), 0)
                out.append(
                    {
                        "year": hol.year,
                        "holiday": hol.label,
                        "days": hol.days,
                        second: d,
                        group: g,
                        "day_part": part,
                        "count": c,
                        "per_day": c / hol.days,
                    }
                )
    df = pd.DataFrame(out, columns=["year", "holiday", "days", second, group, "day_part", "count", "per_day"])
    df["bucket"] = bucket(df["per_day"].to_numpy()) if len(df) else pd.Series(dtype=object)
    return AnomalyTable(data=df, group=group, by=second)


def _order(S: SummingMatrix, group: str, second: str) -> list[tuple[str, str]]:
    """(second, group) combos ordered by the second field then the group, as they first appear."""
    _, rows = _crossing_block(S, group, second)
    seen: list[tuple[str, str]] = []
    for i in rows:
        t = S.index.tags[i]
        c = (t[second], t[group])
        if c not in seen:
            seen.append(c)
    firsts = list(dict.fromkeys(c[0] for c in seen))
    return sorted(seen, key=lambda c: firsts.index(c[0]))


def _window(parts: Sequence[int]) -> str:
    lo, hi = DAY_PARTS[min(parts)][0], DAY_PARTS[max(parts)][1]
    return f"{lo:02d}:00-{hi:02d}:00"


def _pick(rates: pd.Series, tol: float) -> list:
    top = rates.max()
    return [k for k, v in rates.items() if v >= top - tol] if top > 0 else []


def summarize_most_frequent(
    region_table: AnomalyTable,
    highway_table: AnomalyTable | None = None,
    tie_tol: float = 1e-9,
    window_share: float = 0.8,
) -> pd.DataFrame:
    """Dominant group, highway and time window per year and direction.

    Rates are anomalies per holiday day pooled over the year's holidays. Groups
    within ``tie_tol`` of the maximum are joined with "/". The time window
    spans the day parts whose rate is at least ``window_share`` of the best
    one (contiguous runs merged; separate runs joined with ", ").
    """
    tables = [("region", region_table)] + ([("highway", highway_table)] if highway_table is not None else [])
    if region_table.data.empty:
        raise ValueError("empty anomaly table")
    rows = []
    for year, ydf in region_table.data.groupby("year", sort=True):
        days = ydf.drop_duplicates("holiday")["days"].sum()
        for direction in ydf[region_table.by].drop_duplicates():
            entry = {"year": int(year), "direction": direction}
            for kind, tab in tables:
                d = tab.data[(tab.data["year"] == year) & (tab.data[tab.by] == direction)]
                rates = d.groupby(tab.group, sort=False)["count"].sum() / days
                entry[kind] = "/".join(map(str, _pick(rates, tie_tol))) or "-"
            d = ydf[ydf[region_table.by] == direction]
            best = [g for g in entry["region"].split("/") if g != "-"]
            sub = d[d[region_table.group].isin(best)] if best else d
            part_rate = sub.groupby("day_part")["count"].sum() / days
            top = part_rate.max()
            if top > 0:
                chosen = sorted(p for p, v in part_rate.items() if v >= window_share * top - tie_tol)
                runs, cur = [], [chosen[0]]
                for p in chosen[1:]:
                    if p == cur[-1] + 1:
                        cur.append(p)
                    else:
                        runs.append(cur)
                        cur = [p]
                runs.append(cur)
                entry["time"] = ", ".join(_window(r) for r in runs)
            else:
                entry["time"] = "-"
            rows.append(entry)
    cols = ["year", "direction", "region"] + (["highway"] if highway_table is not None else []) + ["time"]
    return pd.DataFrame(rows, columns=cols)


@dataclass
class DetectionRun:
    records: list[AnomalyRecord]
    calendar: HolidayCalendar
    splits: list
    errors: dict[int, str]
    skipped_days: list[dt.date]


def holiday_starts(calendar: HolidayCalendar, index: pd.DatetimeIndex) -> tuple[list[int], list[dt.date]]:
    """Positions of midnight on every holiday day covered by ``index``."""
    pos = pd.Series(np.arange(len(index)), index=index)
    starts, missing = [], []
    for hol in calendar:
        for k in range(hol.days):
            day = hol.start + dt.timedelta(days=k)
            ts = pd.Timestamp(day)
            if ts in pos.index:
                starts.append(int(pos[ts]))
            else:
                missing.append(day)
    return starts, missing


def run_detection(
    collection,
    calendar: HolidayCalendar,
    cfg,
    T_train: int = 336,
    detect_levels: Sequence[float] | None = None,
    symmetric: bool = False,
    nodes: Sequence[int] | None = None,
    workers: int = 1,
) -> DetectionRun:
    """Forecast each holiday day from the preceding ``T_train`` hours and flag exceedances.

    ``cfg`` is a :class:`~olsrecon.evaluate.PipelineConfig`. Days without
    enough history, or running past the data, are skipped and listed.
    """
    from .evaluate import plan_for_starts, run_pipeline

    index = collection.index
    cal = calendar.within(index[0], index[-1])
    if len(cal) == 0:
        raise CalendarError("holiday calendar does not intersect the data range")
    starts, _ = holiday_starts(cal, index)
    plan = plan_for_starts(starts, collection.T, T_train, 24)
    planned = {s for (_, (s, _)) in plan.splits}
    skipped = [index[s].date() for s in starts if s not in planned]
    if not plan.splits:
        raise CalendarError("no holiday day has enough preceding history to forecast")
    result = run_pipeline(collection, plan, cfg, intervals=True, workers=workers)
    labels = collection.S.node_labels
    levels = tuple(cfg.levels if detect_levels is None else detect_levels)
    records: list[AnomalyRecord] = []
    for r in result.splits:
        ts = index[r.test[0]:r.test[1]]
        for a in levels:
            records += detect(r.actual, r.intervals, a, labels, ts, cal, symmetric=symmetric, nodes=nodes)
    return DetectionRun(records=records, calendar=cal, splits=result.splits, errors=result.errors, skipped_days=skipped)
