"""Raw 5-minute detector records to hourly node series, plus dataset files."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .hierarchy import StructureSpec, SummingMatrix, aggregate, build_summing_matrix

log = logging.getLogger(__name__)

RAW_COLUMNS = ("timestamp", "station", "direction", "highway", "vehicle_type", "count")
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M"
ZERO_SHARE_LIMIT = 0.8


class IngestError(ValueError):
    def __init__(self, message: str, diagnostics: Sequence[str] = ()):
        self.diagnostics = list(diagnostics)
        super().__init__(message if not diagnostics else message + "\n  " + "\n  ".join(self.diagnostics[:20]))


@dataclass(frozen=True)
class RawRecord:
    timestamp: pd.Timestamp
    station: str
    direction: str
    highway: str
    vehicle_type: str
    count: int

    def __post_init__(self):
        if self.count < 0:
            raise ValueError(f"negative count {self.count}")


@dataclass(frozen=True)
class HourlyBottom:
    index: pd.DatetimeIndex
    keys: tuple[tuple[str, ...], ...]
    values: np.ndarray  # (T, m), NaN where the hour had no source data


@dataclass(frozen=True)
class SeriesCollection:
    index: pd.DatetimeIndex
    bottom: np.ndarray
    S: SummingMatrix
    metadata: Mapping = field(default_factory=dict)

    @cached_property
    def nodes(self) -> np.ndarray:
        """T x n values for every node, derived from the bottom series."""
        return aggregate(self.S, self.bottom.T).T

    @property
    def T(self) -> int:
        return self.bottom.shape[0]


def read_raw_csv(
    path: str | Path,
    spec: StructureSpec | None = None,
    columns: Mapping[str, str] | None = None,
    strict: bool = False,
) -> pd.DataFrame:
    """Read and validate a raw record CSV.

    ``columns`` maps canonical names to the file's column names. Malformed rows
    are logged with their line number and skipped, or raise when ``strict``.
    """
    path = Path(path)
    rename = {v: k for k, v in (columns or {}).items()}
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise IngestError(f"{path}: empty file") from exc
    df = df.rename(columns=rename)
    missing = [c for c in RAW_COLUMNS if c not in df.columns]
    if missing:
        raise IngestError(
            f"{path}: header row lacks column(s) {missing}",
            [f"line 1: found header {list(df.columns)}"],
        )
    df = df[list(RAW_COLUMNS)].copy()
    lines = np.arange(len(df)) + 2
    ts = pd.to_datetime(df["timestamp"].str.strip(), format=TIMESTAMP_FORMAT, errors="coerce")
    cnt = pd.to_numeric(df["count"].str.strip(), errors="coerce")
    problems: list[str] = []
    bad = ts.isna().to_numpy()
    problems += [f"line {ln}: unparseable timestamp {v!r}" for ln, v in zip(lines[bad], df["timestamp"][bad])]
    cbad = (cnt.isna() | (cnt < 0) | (cnt != np.floor(cnt))).to_numpy()
    problems += [f"line {ln}: invalid count {v!r}" for ln, v in zip(lines[cbad], df["count"][cbad])]
    bad |= cbad
    for col in ("station", "direction", "highway", "vehicle_type"):
        df[col] = df[col].str.strip()
        empty = (df[col] == "").to_numpy()
        problems += [f"line {ln}: empty {col}" for ln in lines[empty]]
        bad |= empty
    if spec is not None:
        for attr, dom in spec.group_attributes.items():
            if attr in df.columns:
                out = (~df[attr].isin(dom)).to_numpy() & ~bad
                problems += [f"line {ln}: {attr}={v!r} outside domain" for ln, v in zip(lines[out], df[attr][out])]
                bad |= out
        if len(spec.hierarchy_levels) > 1:
            finest = spec.hierarchy_levels[-1]
            col = "station" if finest not in df.columns else finest
            out = (~df[col].isin(list(spec.parents))).to_numpy() & ~bad
            problems += [f"line {ln}: {col}={v!r} has no parent mapping" for ln, v in zip(lines[out], df[col][out])]
            bad |= out
    if problems:
        if strict:
            raise IngestError(f"{path}: {len(problems)} malformed row(s)", problems)
        for p in problems:
            log.warning("%s: %s (skipped)", path, p)
    df["timestamp"] = ts
    df["count"] = cnt
    df = df[~bad]
    df["count"] = df["count"].astype(np.int64)
    return df.reset_index(drop=True)


def records_frame(records: Iterable[RawRecord]) -> pd.DataFrame:
    rows = [(r.timestamp, r.station, r.direction, r.highway, r.vehicle_type, r.count) for r in records]
    df = pd.DataFrame(rows, columns=list(RAW_COLUMNS))
    df["timestamp"] = pd.to_datetime(df["timestamp"])
    return df


def aggregate_hourly(
    records: pd.DataFrame | Iterable[RawRecord],
    key_fields: Sequence[str],
    start: str | pd.Timestamp | None = None,
    end: str | pd.Timestamp | None = None,
) -> HourlyBottom:
    """Sum 5-minute counts into hourly bottom series.

    The hourly index covers whole days from ``start`` to ``end`` (inclusive
    dates; defaults to the days spanned by the records). An hour with no
    records at all is missing (NaN) for every series; in an hour with any
    records, a series without records counts zero.

    ``key_fields`` names the record columns that form a bottom key; the
    structure's finest hierarchy level reads from the ``station`` column.
    """
    df = records if isinstance(records, pd.DataFrame) else records_frame(records)
    if df.empty:
        raise IngestError("no valid records")
    cols = [f if f in df.columns else "station" for f in key_fields]
    hour = df["timestamp"].dt.floor("h")
    first = pd.Timestamp(start).normalize() if start is not None else hour.min().normalize()
    last = pd.Timestamp(end).normalize() if end is not None else hour.max().normalize()
    index = pd.date_range(first, last + pd.Timedelta(hours=23), freq="h")
    grouped = df.assign(_hour=hour).groupby(["_hour"] + cols, sort=True)["count"].sum()
    wide = grouped.unstack(cols) if cols else grouped.to_frame()
    wide = wide.reindex(index)
    covered = index.isin(hour.unique())
    values = wide.to_numpy(dtype=np.float64)
    values[covered] = np.nan_to_num(values[covered], nan=0.0)
    values[~covered] = np.nan
    if cols:
        keys = tuple(tuple(str(v) for v in (k if isinstance(k, tuple) else (k,))) for k in wide.columns)
    else:
        keys = ((),)
    return HourlyBottom(index=index, keys=keys, values=values)


def zero_share(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    obs = np.isfinite(v)
    n_obs = obs.sum(axis=0)
    zeros = ((v == 0) & obs).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_obs > 0, zeros / np.maximum(n_obs, 1), 1.0)


def filter_degenerate(bottom: HourlyBottom, limit: float = ZERO_SHARE_LIMIT) -> tuple[HourlyBottom, list[tuple[str, ...]]]:
    """Drop series that are all zero or have at least ``limit`` share of zeros."""
    share = zero_share(bottom.values)
    keep = share < limit
    dropped = [k for k, ok in zip(bottom.keys, keep) if not ok]
    kept = HourlyBottom(
        index=bottom.index,
        keys=tuple(k for k, ok in zip(bottom.keys, keep) if ok),
        values=bottom.values[:, keep],
    )
    return kept, dropped


def collection_from_bottom(bottom: HourlyBottom, spec: StructureSpec, metadata: Mapping | None = None) -> SeriesCollection:
    S = build_summing_matrix(spec, bottom.keys)
    meta = dict(metadata or {})
    meta.setdefault("structure", spec.to_dict())
    return SeriesCollection(index=bottom.index, bottom=bottom.values, S=S, metadata=meta)


def _fmt(v: float) -> str:
    if not np.isfinite(v):
        return ""
    if v == np.round(v):
        return str(int(v))
    return repr(float(v))


def write_dataset(outdir: str | Path, collection: SeriesCollection, dropped: Sequence[Sequence[str]] = (), header: str | None = None) -> tuple[Path, Path]:
    """Write ``hourly.csv`` (timestamp,node,value; bottom series) and ``metadata.json``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ts = collection.index.strftime(TIMESTAMP_FORMAT)
    labels = collection.S.bottom_labels
    csv_path = outdir / "hourly.csv"
    vals = collection.bottom
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("timestamp,node,value\n")
        for j, lab in enumerate(labels):
            col = vals[:, j]
            fh.writelines(f"{t},{lab},{_fmt(v)}\n" for t, v in zip(ts, col))
    meta = {
        k: v for k, v in dict(collection.metadata).items() if k not in ("structure", "dropped")
    }
    meta.update(
        {
            "start": collection.index[0].strftime(TIMESTAMP_FORMAT),
            "end": collection.index[-1].strftime(TIMESTAMP_FORMAT),
            "hours": int(collection.T),
            "key_fields": list(StructureSpec.from_dict(collection.metadata["structure"]).key_fields)
            if "structure" in collection.metadata
            else [],
            "bottom_keys": [list(k) for k in collection.S.bottom_keys],
            "bottom_labels": list(labels),
            "node_labels": list(collection.S.node_labels),
            "dropped": [list(k) for k in dropped] or list(collection.metadata.get("dropped", [])),
            "structure": collection.metadata.get("structure"),
        }
    )
    meta_path = outdir / "metadata.json"
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return csv_path, meta_path


def read_dataset(datadir: str | Path, spec: StructureSpec | None = None) -> SeriesCollection:
    """Load a dataset written by :func:`write_dataset`."""
    datadir = Path(datadir)
    meta = json.loads((datadir / "metadata.json").read_text(encoding="utf-8"))
    if spec is None:
        if not meta.get("structure"):
            raise IngestError(f"{datadir}: metadata has no structure; pass one explicitly")
        spec = StructureSpec.from_dict(meta["structure"])
    df = pd.read_csv(datadir / "hourly.csv", comment="#", dtype={"node": str})
    labels = meta["bottom_labels"]
    keys = [tuple(k) for k in meta["bottom_keys"]]
    index = pd.date_range(pd.Timestamp(meta["start"]), pd.Timestamp(meta["end"]), freq="h")
    pos = {lab: j for j, lab in enumerate(labels)}
    unknown = set(df["node"]) - set(pos)
    if unknown:
        raise IngestError(f"{datadir}: hourly.csv has nodes not in metadata: {sorted(unknown)[:5]}")
    tpos = pd.Series(np.arange(len(index)), index=index.strftime(TIMESTAMP_FORMAT))
    rows = tpos.reindex(df["timestamp"]).to_numpy()
    if np.isnan(rows.astype(float)).any():
        raise IngestError(f"{datadir}: hourly.csv has timestamps outside the metadata range")
    values = np.full((len(index), len(labels)), np.nan)
    values[rows.astype(int), df["node"].map(pos).to_numpy()] = df["value"].to_numpy(dtype=np.float64)
    S = build_summing_matrix(spec, keys)
    meta["structure"] = spec.to_dict()
    return SeriesCollection(index=index, bottom=values, S=S, metadata=meta)
