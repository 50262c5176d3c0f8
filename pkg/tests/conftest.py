from __future__ import annotations

import sys
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from flowtrack.models import FrameSequence, PointId  # noqa: E402
from flowtrack.network import Edge, EdgeKind, FlowNetwork  # noqa: E402

NetworkFactory = Callable[..., FlowNetwork]


def line_sequence(sizes: Sequence[int]) -> FrameSequence:
    """Frames of points on the x axis at unit spacing; positions do not matter for LP tests."""
    return FrameSequence(
        frames=tuple(
            np.column_stack([np.arange(n, dtype=float), np.zeros(n), np.zeros(n)]) for n in sizes
        )
    )


def _build(
    sizes: Sequence[int],
    temporal: dict[tuple[int, int, int], float],
    loop: dict[tuple[int, int], float] | None = None,
    source_weight: float = 1.0,
) -> FlowNetwork:
    """temporal maps (t, i, j) -> weight for edge (t, i) -> (t + 1, j); loop maps (i, j) T -> 1."""
    sequence = line_sequence(sizes)
    edges = [
        Edge(EdgeKind.SOURCE, None, PointId(1, i), source_weight) for i in range(1, sizes[0] + 1)
    ]
    for (t, i, j), weight in sorted(temporal.items()):
        edges.append(Edge(EdgeKind.TEMPORAL, PointId(t, i), PointId(t + 1, j), weight))
    for (i, j), weight in sorted((loop or {}).items()):
        edges.append(Edge(EdgeKind.LOOP, PointId(len(sizes), i), PointId(1, j), weight))
    return FlowNetwork(sequence=sequence, edges=tuple(edges), loop=bool(loop))


def _random(
    rng: np.random.Generator,
    frames: int,
    max_points: int,
    nk: int,
    loop: bool,
) -> FlowNetwork:
    sizes = [int(rng.integers(1, max_points + 1)) for _ in range(frames)]
    temporal: dict[tuple[int, int, int], float] = {}
    for t in range(1, frames):
        for i in range(1, sizes[t - 1] + 1):
            heads = rng.choice(sizes[t], size=min(nk, sizes[t]), replace=False) + 1
            for j in heads:
                temporal[(t, i, int(j))] = float(rng.uniform(0.01, 1.0))
    loop_edges: dict[tuple[int, int], float] = {}
    if loop:
        for i in range(1, sizes[-1] + 1):
            heads = rng.choice(sizes[0], size=min(nk, sizes[0]), replace=False) + 1
            for j in heads:
                loop_edges[(i, int(j))] = float(rng.uniform(0.01, 1.0))
    return _build(sizes, temporal, loop_edges)


@pytest.fixture
def network_factory() -> NetworkFactory:
    return _build


@pytest.fixture
def random_network() -> Callable[..., FlowNetwork]:
    return _random


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)
