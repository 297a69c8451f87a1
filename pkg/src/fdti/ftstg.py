"""Layered spatio-temporal graph with signal-derived edge weights.

Vertex ``(t, i)`` is movement ``i`` at frame ``t`` of a ``T``-frame window.
Edges only join adjacent frames: ``(t, j) -> (t+1, i)`` exists when ``j``
feeds ``i`` in the static graph or ``j == i``. The edge structure is the same
for every transition, so it is stored once; weights vary per transition
because they follow the source movement's green time.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .roadnet import Direction, MovementGraph, SignalPlan

N_FEATURES = 6

SELF_EDGE_GATED = "gated"
SELF_EDGE_CONSTANT = "constant"


def edge_weight(p, dt: int = 1, normalize: bool = True):
    """Mobility weight of an existing edge whose source has ``p`` green seconds."""
    if dt < 1 or int(dt) != dt:
        raise ValueError(f"layer gap must be an integer >= 1, got {dt}")
    p = np.asarray(p, dtype=float)
    frac = p / 60.0 if normalize else p
    out = frac / dt
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Ftstg:
    n_nodes: int
    n_layers: int
    src: np.ndarray  # (E,) per transition, sorted by (dst, src)
    dst: np.ndarray  # (E,)
    weights: np.ndarray  # (n_layers - 1, E); row t is the transition t -> t+1
    t0: int = 0

    def __post_init__(self):
        for name in ("src", "dst", "weights"):
            getattr(self, name).setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.n_nodes * self.n_layers

    @property
    def n_edges(self) -> int:
        return self.weights.size

    @cached_property
    def seg_start(self) -> np.ndarray:
        """Index of the first in-edge of every destination node."""
        counts = np.bincount(self.dst, minlength=self.n_nodes)
        if np.any(counts == 0):
            raise ValueError("every vertex needs at least one in-edge")
        return np.concatenate(([0], np.cumsum(counts)[:-1]))

    def edge_rows(self):
        """Yield ``(t, src, dst, weight)`` in ``(t, dst, src)`` order."""
        for t in range(self.n_layers - 1):
            for j, i, w in zip(self.src, self.dst, self.weights[t]):
                yield t, int(j), int(i), float(w)

    def dump(self) -> str:
        buf = io.StringIO()
        buf.write("t,src,dst,weight\n")
        for t in range(self.n_layers - 1):
            tt = self.t0 + t
            for j, i, w in zip(self.src.tolist(), self.dst.tolist(), self.weights[t].tolist()):
                buf.write(f"{tt},{j},{i},{w:.17g}\n")
        return buf.getvalue()


def edge_structure(g: MovementGraph) -> tuple[np.ndarray, np.ndarray]:
    """Static edges plus self pairs, sorted by ``(dst, src)``."""
    n = g.n
    pairs = np.concatenate([g.edge_array, np.stack([np.arange(n), np.arange(n)], axis=1)])
    order = np.lexsort((pairs[:, 0], pairs[:, 1]))
    pairs = pairs[order]
    return pairs[:, 0].copy(), pairs[:, 1].copy()


def build_ftstg(
    g: MovementGraph,
    signal: SignalPlan | np.ndarray,
    t0: int,
    T: int,
    *,
    normalize: bool = True,
    self_edges: str = SELF_EDGE_GATED,
    dynamic: bool = True,
    structure: tuple[np.ndarray, np.ndarray] | None = None,
) -> Ftstg:
    """Build the ``T``-frame graph for minutes ``[t0, t0 + T)``.

    ``signal`` may be a plan or a raw ``(T, N)`` green-seconds array already
    aligned with the window. ``dynamic=False`` fixes every weight to 1.
    """
    if T < 1:
        raise ValueError("window length must be at least 1")
    if isinstance(signal, SignalPlan):
        green = signal.window(t0, t0 + T)
    else:
        green = np.asarray(signal, dtype=float)
        if green.shape != (T, g.n):
            raise ValueError(f"green array must have shape ({T}, {g.n})")
    src, dst = structure if structure is not None else edge_structure(g)
    if dynamic:
        w = edge_weight(green[:-1][:, src], 1, normalize=normalize).reshape(T - 1, len(src))
        if self_edges == SELF_EDGE_CONSTANT:
            w[:, src == dst] = 1.0
        elif self_edges != SELF_EDGE_GATED:
            raise ValueError(f"unknown self-edge mode {self_edges!r}")
    else:
        w = np.ones((T - 1, len(src)))
    return Ftstg(g.n, T, src, dst, np.ascontiguousarray(w, dtype=float), t0)


def node_features(x, p, length, l_max, d: Direction) -> np.ndarray:
    """``[volume, green fraction, relative length, one-hot direction]``."""
    if not 0 < length <= l_max:
        raise ValueError("need 0 < length <= l_max")
    return np.concatenate(([float(x), float(p) / 60.0, float(length) / float(l_max)], d.one_hot()))


def static_features(g: MovementGraph) -> np.ndarray:
    """Per-node ``[relative length, one-hot direction]``, shape ``(N, 4)``."""
    rel = g.lengths / g.lengths.max()
    onehot = np.zeros((g.n, 3))
    onehot[np.arange(g.n), [d.index for d in g.directions]] = 1.0
    return np.column_stack([rel, onehot])


def window_features(volumes: np.ndarray, green: np.ndarray, static: np.ndarray) -> np.ndarray:
    """Vectorised :func:`node_features` over a ``(T, N)`` window -> ``(T, N, 6)``."""
    T, n = volumes.shape
    out = np.empty((T, n, N_FEATURES))
    out[..., 0] = volumes
    out[..., 1] = green / 60.0
    out[..., 2:] = static[None]
    return out
