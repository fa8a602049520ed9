"""Synthetic coherent traffic-count datasets with injected surges.

Bottom series follow ``level * daily * weekly + AR(1) noise`` rounded to
nonnegative counts. Noise innovations mix an idiosyncratic part with shared
factors (global and per top hierarchy level) so aggregates are cross-correlated.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .hierarchy import StructureSpec, build_summing_matrix
from .ingest import SeriesCollection

HIGHWAYS = ("No.1", "Elevated No.1", "No.3")
DIRECTIONS = ("N", "S", "E", "W")
VEHICLES = ("car", "small truck", "bus", "big truck", "tractor-trailer")
REGIONS = ("north", "center", "south")


@dataclass(frozen=True)
class Surge:
    node: str
    hour: int
    sigmas: float


@dataclass(frozen=True)
class InjectedAnomaly:
    node: str
    hour: int
    timestamp: pd.Timestamp
    amount: float
    sigmas: float


@dataclass(frozen=True)
class NoiseModel:
    ar: float = 0.5
    relative_sd: float = 0.06
    shared: float = 0.4


def full_keys(spec: StructureSpec) -> list[tuple[str, ...]]:
    """Every combination of finest hierarchy label and attribute values."""
    keys: list[tuple[str, ...]] = [()]
    if spec.hierarchy_levels:
        finest = list(spec.parents) if len(spec.hierarchy_levels) > 1 else []
        if not finest:
            raise ValueError("cannot enumerate finest-level labels; pass bottom_keys")
        keys = [(f,) for f in finest]
    for dom in spec.group_attributes.values():
        keys = [k + (v,) for k in keys for v in dom]
    return keys


def demo_structure() -> tuple[StructureSpec, list[tuple[str, ...]]]:
    """Two regions, six stations, two highways, two directions, two vehicle types."""
    stations = {
        "N01": ("north", "No.1", "N"),
        "N02": ("north", "No.1", "S"),
        "N03": ("north", "No.3", "N"),
        "S01": ("south", "No.1", "S"),
        "S02": ("south", "No.3", "N"),
        "S03": ("south", "No.3", "S"),
    }
    spec = StructureSpec(
        hierarchy_levels=("region", "station"),
        parents={s: {"region": r} for s, (r, _, _) in stations.items()},
        group_attributes={"highway": ("No.1", "No.3"), "direction": ("N", "S"), "vehicle_type": ("car", "truck")},
        crossings=(("region", "direction"), ("region", "highway"), ("highway", "direction")),
    )
    keys = [(s, hw, d, v) for s, (_, hw, d) in stations.items() for v in ("car", "truck")]
    return spec, keys


def taiwan_like_structure() -> tuple[StructureSpec, list[tuple[str, ...]]]:
    """A 1998-node layout with the aggregation-level sizes of a real national detector network.

    319 stations over 3 regions; each station carries one highway and one
    direction, and 5 vehicle types, minus 5 dropped station/vehicle keys.
    """
    routes = [
        ("north", "No.1", "N", 24), ("north", "No.1", "S", 24),
        ("north", "Elevated No.1", "N", 8), ("north", "Elevated No.1", "S", 8),
        ("north", "Elevated No.1", "E", 6), ("north", "Elevated No.1", "W", 6),
        ("north", "No.3", "N", 22), ("north", "No.3", "S", 22),
        ("center", "No.1", "N", 25), ("center", "No.1", "S", 25),
        ("center", "No.3", "N", 24), ("center", "No.3", "S", 24),
        ("south", "No.1", "N", 26), ("south", "No.1", "S", 26),
        ("south", "No.3", "N", 25), ("south", "No.3", "S", 24),
    ]
    stations = []
    for region, hw, d, count in routes:
        tag = {"No.1": "01F", "Elevated No.1": "01H", "No.3": "03F"}[hw]
        for i in range(count):
            stations.append((f"{tag}{region[0].upper()}{len(stations):03d}{d}", region, hw, d))
    assert len(stations) == 319
    spec = StructureSpec(
        hierarchy_levels=("region", "station"),
        parents={s: {"region": r} for s, r, _, _ in stations},
        group_attributes={"highway": HIGHWAYS, "direction": DIRECTIONS, "vehicle_type": VEHICLES},
        crossings=(
            ("region", "direction"), ("region", "highway"), ("region", "vehicle_type"),
            ("highway", "direction"), ("highway", "vehicle_type"), ("direction", "vehicle_type"),
        ),
    )
    keys = [(s, hw, d, v) for s, _, hw, d in stations for v in VEHICLES]
    drop = {keys[5 * i + (i % 5)] for i in (3, 70, 140, 210, 300)}
    return spec, [k for k in keys if k not in drop]


def generate_synthetic(
    spec: StructureSpec,
    days: int,
    seed: int = 0,
    anomaly_plan: Sequence[Surge] = (),
    bottom_keys: Sequence[Sequence[str]] | None = None,
    start: str = "2021-01-04",
    noise: NoiseModel = NoiseModel(),
) -> tuple[SeriesCollection, list[InjectedAnomaly]]:
    """Simulate ``days`` whole days of hourly counts for every bottom key.

    Surges add ``sigmas`` times the series' stationary noise sd (rounded up)
    at the given bottom node and hour; aggregates inherit them through S.
    """
    if days < 15:
        raise ValueError("need at least 15 days for one training/test split")
    keys = [tuple(k) for k in (bottom_keys if bottom_keys is not None else full_keys(spec))]
    S = build_summing_matrix(spec, keys)
    m, T = S.m, days * 24
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=np.float64)

    level = rng.uniform(40.0, 400.0, size=m)
    phase_d = rng.normal(0.0, 0.6, size=m)
    amp_d = rng.uniform(0.35, 0.55, size=m)
    amp_w = rng.uniform(0.02, 0.05, size=m)
    daily = (
        1.0
        + amp_d * np.cos(2 * np.pi * (t[:, None] - 15.0 - phase_d) / 24)
        + 0.45 * amp_d * np.cos(4 * np.pi * (t[:, None] - 9.0 - phase_d) / 24)
        + 0.12 * amp_d * np.cos(6 * np.pi * (t[:, None] - 2.0) / 24)
    )
    weekly = 1.0 + amp_w * np.cos(2 * np.pi * (t[:, None] - 120.0) / 168) + 0.5 * amp_w * np.sin(4 * np.pi * t[:, None] / 168)
    mean = level * daily * weekly

    resolved = [spec.resolve(k) for k in keys]
    top = spec.hierarchy_levels[0] if len(spec.hierarchy_levels) > 1 else None
    groups = sorted({r[top] for r in resolved}) if top else ["all"]
    gid = np.array([groups.index(r[top]) if top else 0 for r in resolved])
    sd = noise.relative_sd * level
    z_idio = rng.standard_normal((T, m))
    z_glob = rng.standard_normal((T, 1))
    z_grp = rng.standard_normal((T, len(groups)))[:, gid]
    c = noise.shared
    innov = sd * (np.sqrt(1.0 - c) * z_idio + np.sqrt(c / 2) * (z_glob + z_grp))
    eps = np.empty_like(innov)
    stat = 1.0 / np.sqrt(1.0 - noise.ar**2)
    eps[0] = innov[0] * stat
    for i in range(1, T):
        eps[i] = noise.ar * eps[i - 1] + innov[i]
    values = np.maximum(np.round(mean + eps), 0.0)
    marginal_sd = sd * stat

    index = pd.date_range(pd.Timestamp(start), periods=T, freq="h")
    pos = {lab: j for j, lab in enumerate(S.bottom_labels)}
    truth = []
    for surge in anomaly_plan:
        if surge.node not in pos:
            raise KeyError(f"anomaly plan references unknown bottom node {surge.node!r}")
        if not 0 <= surge.hour < T:
            raise IndexError(f"anomaly hour {surge.hour} outside 0..{T - 1}")
        j = pos[surge.node]
        amount = float(np.ceil(surge.sigmas * marginal_sd[j]))
        values[surge.hour, j] += amount
        truth.append(InjectedAnomaly(surge.node, surge.hour, index[surge.hour], amount, surge.sigmas))

    meta = {
        "source": "synthetic",
        "seed": int(seed),
        "days": int(days),
        "noise_sd": marginal_sd.tolist(),
        "structure": spec.to_dict(),
    }
    return SeriesCollection(index=index, bottom=values, S=S, metadata=meta), truth


def plan_surges(
    S,
    index: pd.DatetimeIndex,
    hours: Sequence[int],
    per_day: float,
    sigmas: float,
    seed: int = 0,
) -> list[Surge]:
    """Random surges at bottom nodes among ``hours``, about ``per_day`` per 24 hours.

    No (node, hour) cell is used twice.
    """
    rng = np.random.default_rng(seed)
    hours = np.asarray(sorted(hours), dtype=int)
    count = int(round(per_day * len(hours) / 24))
    if count == 0 or hours.size == 0:
        return []
    cells = rng.choice(hours.size * S.m, size=min(count, hours.size * S.m), replace=False)
    plan = [Surge(S.bottom_labels[c % S.m], int(hours[c // S.m]), float(sigmas)) for c in cells]
    return sorted(plan, key=lambda s: (s.hour, s.node))
