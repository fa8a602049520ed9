from __future__ import annotations

import numpy as np
import pytest

from olsrecon.hierarchy import StructureSpec
from olsrecon.synthetic import demo_structure, generate_synthetic


def small_tree_spec() -> tuple[StructureSpec, list[tuple[str]]]:
    """Two-level tree: A -> AA, AB and B -> BA, BB."""
    spec = StructureSpec(
        hierarchy_levels=("top", "leaf"),
        parents={"AA": {"top": "A"}, "AB": {"top": "A"}, "BA": {"top": "B"}, "BB": {"top": "B"}},
    )
    return spec, [("AA",), ("AB",), ("BA",), ("BB",)]


SMALL_TREE_S = np.array(
    [
        [1, 1, 1, 1],
        [1, 1, 0, 0],
        [0, 0, 1, 1],
        [1, 0, 0, 0],
        [0, 1, 0, 0],
        [0, 0, 1, 0],
        [0, 0, 0, 1],
    ]
)

NETWORK_BLOCKS = (1, 3, 319, 3, 4, 5, 8, 7, 15, 8, 15, 20, 1590)


@pytest.fixture(scope="session")
def demo_collection():
    spec, keys = demo_structure()
    col, _ = generate_synthetic(spec, 20, seed=11, bottom_keys=keys)
    return col


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
