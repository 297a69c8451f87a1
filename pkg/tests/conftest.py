import numpy as np
import pytest

from fdti.roadnet import Direction, graph_from_edges
from fdti.simulator import SimConfig, run

L, S, R = Direction.LEFT, Direction.STRAIGHT, Direction.RIGHT


def chain(n: int, lengths=None):
    """Movements 0 -> 1 -> ... -> n-1, all straight."""
    lengths = lengths or [100.0] * n
    return graph_from_edges([S] * n, lengths, [(k, k + 1) for k in range(n - 1)])


def random_graph(rng: np.random.Generator, n: int, p: float = 0.3):
    edges = [(j, i) for j in range(n) for i in range(n) if i != j and rng.random() < p]
    dirs = [list(Direction)[k] for k in rng.integers(0, 3, n)]
    lengths = rng.integers(50, 400, n).astype(float)
    return graph_from_edges(dirs, lengths, edges)


@pytest.fixture(scope="session")
def small_data():
    """2x2 grid, 40 minutes; enough for every split with window 3."""
    return run(SimConfig(rows=2, cols=2, duration_min=40, warmup_min=5, demand_vpm=12, seed=3))
