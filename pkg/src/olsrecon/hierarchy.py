"""Summing matrix construction for hierarchical and grouped series.

Node rows are laid out in a fixed order::

    total | hierarchy levels (top-down) | group attributes | crossings | bottom

Labels use ``name=value`` parts joined by ``/``; the total node is ``Total``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
from scipy import sparse

TOTAL = "Total"
BOTTOM = "bottom"


class StructureError(ValueError):
    """Raised when a structure description or a set of bottom keys is inconsistent."""


@dataclass(frozen=True)
class StructureSpec:
    """Declarative description of the aggregation structure.

    ``hierarchy_levels`` lists level names from coarsest to finest. The finest
    level's label is the first element of every bottom key; ``parents`` maps a
    finest-level label to its label at each coarser level.

    ``group_attributes`` maps attribute name to its ordered category domain.
    Bottom keys carry one value per attribute, in declaration order, after the
    finest hierarchy label.

    ``crossings`` are tuples of level/attribute names whose observed
    combinations become aggregation nodes.
    """

    hierarchy_levels: tuple[str, ...] = ()
    parents: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    group_attributes: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    crossings: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hierarchy_levels", tuple(self.hierarchy_levels))
        object.__setattr__(
            self,
            "group_attributes",
            {str(k): tuple(str(v) for v in vals) for k, vals in dict(self.group_attributes).items()},
        )
        object.__setattr__(
            self,
            "parents",
            {str(k): {str(a): str(b) for a, b in dict(v).items()} for k, v in dict(self.parents).items()},
        )
        object.__setattr__(self, "crossings", tuple(tuple(c) for c in self.crossings))

        names = list(self.hierarchy_levels) + list(self.group_attributes)
        if len(set(names)) != len(names):
            raise StructureError(f"level and attribute names must be distinct: {names}")
        for attr, dom in self.group_attributes.items():
            if len(set(dom)) != len(dom):
                raise StructureError(f"duplicate category in domain of {attr!r}")
        seen = set()
        for cr in self.crossings:
            if len(cr) < 2 or len(set(cr)) != len(cr):
                raise StructureError(f"crossing {cr} must combine at least two distinct names")
            for part in cr:
                if part not in names:
                    raise StructureError(f"crossing {cr} references unknown name {part!r}")
            key = frozenset(cr)
            if key in seen:
                raise StructureError(f"duplicate crossing {cr}")
            seen.add(key)

    @property
    def key_fields(self) -> tuple[str, ...]:
        """Field names of a bottom key tuple."""
        finest = self.hierarchy_levels[-1:] if self.hierarchy_levels else ()
        return tuple(finest) + tuple(self.group_attributes)

    def resolve(self, key: Sequence[str]) -> dict[str, str]:
        """All level and attribute values of one bottom key."""
        key = tuple(str(k) for k in key)
        fields = self.key_fields
        if len(key) != len(fields):
            raise StructureError(f"key {key} has {len(key)} parts, expected {len(fields)} ({fields})")
        values = dict(zip(fields, key))
        for attr, dom in self.group_attributes.items():
            if values[attr] not in dom:
                raise StructureError(f"key {key}: {attr}={values[attr]!r} outside declared domain {dom}")
        if self.hierarchy_levels:
            finest = self.hierarchy_levels[-1]
            label = values[finest]
            coarser = self.hierarchy_levels[:-1]
            if coarser:
                up = self.parents.get(label)
                if up is None:
                    raise StructureError(f"key {key}: no parent mapping for {finest}={label!r}")
                for lvl in coarser:
                    if lvl not in up:
                        raise StructureError(f"key {key}: {finest}={label!r} has no {lvl} parent")
                    values[lvl] = up[lvl]
        return values

    @classmethod
    def from_dict(cls, data: Mapping) -> "StructureSpec":
        if not isinstance(data, Mapping):
            raise StructureError("structure must be a mapping")
        unknown = set(data) - {"hierarchy", "attributes", "crossings"}
        if unknown:
            raise StructureError(f"unknown structure section(s) {sorted(unknown)}; expected hierarchy, attributes, crossings")
        hier = data.get("hierarchy") or {}
        if set(hier) - {"levels", "parents"}:
            raise StructureError(f"unknown hierarchy key(s) {sorted(set(hier) - {'levels', 'parents'})}")
        return cls(
            hierarchy_levels=tuple(hier.get("levels", ())),
            parents=hier.get("parents", {}) or {},
            group_attributes={k: tuple(v) for k, v in (data.get("attributes") or {}).items()},
            crossings=tuple(tuple(c) for c in (data.get("crossings") or ())),
        )

    def to_dict(self) -> dict:
        return {
            "hierarchy": {"levels": list(self.hierarchy_levels), "parents": {k: dict(v) for k, v in self.parents.items()}},
            "attributes": {k: list(v) for k, v in self.group_attributes.items()},
            "crossings": [list(c) for c in self.crossings],
        }


def node_label(parts: Sequence[tuple[str, str]]) -> str:
    if not parts:
        return TOTAL
    return "/".join(f"{k}={v}" for k, v in parts)


@dataclass(frozen=True)
class NodeIndex:
    labels: tuple[str, ...]
    blocks: tuple[tuple[str, int, int], ...]
    tags: tuple[Mapping[str, str], ...]

    @cached_property
    def position(self) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, label: str) -> int:
        return self.position[label]

    def level_of(self, i: int) -> str:
        for name, start, stop in self.blocks:
            if start <= i < stop:
                return name
        raise IndexError(i)

    @cached_property
    def levels(self) -> np.ndarray:
        """Block name of every row, as an object array."""
        out = np.empty(len(self.labels), dtype=object)
        for name, start, stop in self.blocks:
            out[start:stop] = name
        return out

    def block(self, name: str) -> range:
        for b, start, stop in self.blocks:
            if b == name:
                return range(start, stop)
        raise KeyError(f"no aggregation level named {name!r}")


@dataclass(frozen=True)
class SummingMatrix:
    entries: np.ndarray
    node_labels: tuple[str, ...]
    bottom_labels: tuple[str, ...]
    index: NodeIndex
    bottom_keys: tuple[tuple[str, ...], ...] = ()

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def m(self) -> int:
        return self.entries.shape[1]

    @cached_property
    def csr(self) -> sparse.csr_matrix:
        return sparse.csr_matrix(self.entries.astype(np.float64))

    @cached_property
    def aggregate_csr(self) -> sparse.csr_matrix:
        return self.csr[: self.n - self.m]

    def block_sizes(self) -> list[tuple[str, int]]:
        return [(name, stop - start) for name, start, stop in self.index.blocks]

    def rows(self, labels: Sequence[str]) -> np.ndarray:
        return np.array([self.index[lab] for lab in labels], dtype=int)


def build_summing_matrix(spec: StructureSpec, bottom_keys: Sequence[Sequence[str]]) -> SummingMatrix:
    """Build S for ``bottom_keys`` under ``spec``.

    Aggregation nodes are created only for values and combinations that occur
    among the bottom keys. Hierarchy levels are ordered by first appearance in
    ``bottom_keys``; attribute values follow their declared domain order.

    A level or attribute that alone makes up the bottom key gets no separate
    block, since its nodes would be the bottom series themselves.
    """
    keys = [tuple(str(p) for p in k) for k in bottom_keys]
    if not keys:
        raise StructureError("bottom_keys must be nonempty")
    if len(set(keys)) != len(keys):
        dup = next(k for k in keys if keys.count(k) > 1)
        raise StructureError(f"duplicate bottom key {dup}")
    resolved = [spec.resolve(k) for k in keys]
    m = len(keys)

    def order_for(name: str) -> list[str]:
        if name in spec.group_attributes:
            present = {r[name] for r in resolved}
            return [v for v in spec.group_attributes[name] if v in present]
        seen: dict[str, None] = {}
        for r in resolved:
            seen.setdefault(r[name], None)
        return list(seen)

    blocks: list[tuple[str, list[tuple[tuple[str, str], ...]]]] = [(TOTAL, [()])]
    for name in list(spec.hierarchy_levels) + list(spec.group_attributes):
        if spec.key_fields == (name,):
            continue
        blocks.append((name, [((name, v),) for v in order_for(name)]))
    for cr in spec.crossings:
        if set(spec.key_fields) <= set(cr):
            raise StructureError(f"crossing {cr} spans every key field and duplicates the bottom level")
        present = {tuple(r[c] for c in cr) for r in resolved}
        combos = [()]
        for c in cr:
            combos = [prev + (v,) for prev in combos for v in order_for(c)]
        nodes = [tuple(zip(cr, combo)) for combo in combos if combo in present]
        blocks.append((" x ".join(cr), nodes))

    fields = spec.key_fields
    bottom_parts = [tuple(zip(fields, k)) for k in keys]
    bottom_labels = tuple(node_label(p) if p else "bottom" for p in bottom_parts)

    rows: list[np.ndarray] = []
    labels: list[str] = []
    tags: list[dict[str, str]] = []
    block_index: list[tuple[str, int, int]] = []
    columns = {name: np.array([r[name] for r in resolved], dtype=object) for name in resolved[0]}
    for name, nodes in blocks:
        start = len(labels)
        for parts in nodes:
            hit = np.ones(m, dtype=bool)
            for k, v in parts:
                hit &= columns[k] == v
            rows.append(hit.astype(np.int8))
            labels.append(node_label(parts))
            tags.append(dict(parts))
        block_index.append((name, start, len(labels)))
    start = len(labels)
    rows.extend(np.eye(m, dtype=np.int8))
    labels.extend(bottom_labels)
    tags.extend(dict(p) for p in bottom_parts)
    block_index.append((BOTTOM, start, len(labels)))

    if len(set(labels)) != len(labels):
        raise StructureError("node labels are not unique; check level/attribute naming")
    entries = np.vstack(rows)
    entries.setflags(write=False)
    index = NodeIndex(labels=tuple(labels), blocks=tuple(block_index), tags=tuple(tags))
    return SummingMatrix(
        entries=entries,
        node_labels=tuple(labels),
        bottom_labels=bottom_labels,
        index=index,
        bottom_keys=tuple(keys),
    )


def aggregate(S: SummingMatrix, bottom: np.ndarray) -> np.ndarray:
    """Stack all node values from bottom values: ``y = S b``.

    ``bottom`` is an m-vector or an (m, T) array with one column per time step.
    Missing (NaN) bottom values propagate to every ancestor.
    """
    b = np.asarray(bottom)
    if b.shape[0] != S.m:
        raise ValueError(f"bottom has leading dimension {b.shape[0]}, expected m={S.m}")
    if np.issubdtype(b.dtype, np.integer):
        return S.entries.astype(np.int64) @ b
    flat = b.reshape(S.m, -1).astype(np.float64)
    nan = np.isnan(flat)
    out = np.asarray(S.csr @ np.where(nan, 0.0, flat))
    if nan.any():
        out[np.asarray(S.csr @ nan.astype(np.float64)) > 0] = np.nan
    return out.reshape((S.n,) + b.shape[1:])


def coherence_residual(S: SummingMatrix, y: np.ndarray, relative: bool = False) -> float:
    """Max-norm of the aggregation-constraint violation of ``y`` (n or n x h)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != S.n:
        raise ValueError(f"y has leading dimension {y.shape[0]}, expected n={S.n}")
    flat = y.reshape(S.n, -1)
    agg = flat[: S.n - S.m]
    gap = agg - S.aggregate_csr @ flat[S.n - S.m:]
    res = float(np.max(np.abs(gap))) if gap.size else 0.0
    if relative:
        res /= max(1.0, float(np.max(np.abs(flat))))
    return res
