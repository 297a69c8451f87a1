"""Error metrics, graph smoothness (STMAD) and sanity baselines."""
from __future__ import annotations

import io
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .roadnet import MovementGraph


def rmse(y, y_hat) -> float:
    y, y_hat = np.asarray(y, float).ravel(), np.asarray(y_hat, float).ravel()
    if y.size == 0:
        raise ValueError("rmse of an empty sequence")
    if y.shape != y_hat.shape:
        raise ValueError("rmse: length mismatch")
    return math.sqrt(float(np.mean((y - y_hat) ** 2)))


def mape_counted(y, y_hat) -> tuple[float, int]:
    """MAPE in percent over non-zero targets, and the number of excluded zero targets."""
    y, y_hat = np.asarray(y, float).ravel(), np.asarray(y_hat, float).ravel()
    if y.shape != y_hat.shape:
        raise ValueError("mape: length mismatch")
    keep = y != 0
    if not keep.any():
        raise ValueError("mape undefined: every target is zero")
    value = float(np.mean(np.abs(y[keep] - y_hat[keep]) / np.abs(y[keep]))) * 100.0
    return value, int((~keep).sum())


def mape(y, y_hat) -> float:
    return mape_counted(y, y_hat)[0]


@dataclass(frozen=True)
class HorizonMetrics:
    horizon: int
    rmse: float
    mape: float
    n_cells: int
    n_excluded: int


@dataclass
class MetricsReport:
    entries: dict[int, HorizonMetrics] = field(default_factory=dict)

    def to_csv(self, label: str | None = None) -> str:
        buf = io.StringIO()
        lead = "model," if label is not None else ""
        buf.write(f"{lead}horizon,rmse,mape,n_cells,n_excluded\n")
        for q, e in sorted(self.entries.items()):
            pre = f"{label}," if label is not None else ""
            buf.write(f"{pre}{q},{e.rmse:.17g},{e.mape:.17g},{e.n_cells},{e.n_excluded}\n")
        return buf.getvalue()

    def summary(self) -> str:
        lines = ["horizon    RMSE     MAPE%   cells  excluded"]
        for q, e in sorted(self.entries.items()):
            lines.append(f"{q:>7} {e.rmse:8.4f} {e.mape:8.2f} {e.n_cells:7d} {e.n_excluded:9d}")
        return "\n".join(lines)


def evaluate(
    predictions: Mapping[int, np.ndarray],
    truth: Mapping[int, np.ndarray],
    horizons: Sequence[int] = (1, 3, 5),
) -> MetricsReport:
    """Per-horizon RMSE and MAPE over every (origin, node) cell."""
    report = MetricsReport()
    for q in horizons:
        if q not in predictions or q not in truth:
            raise ValueError(f"horizon {q} missing from predictions or truth")
        p, y = np.asarray(predictions[q], float), np.asarray(truth[q], float)
        if p.shape != y.shape:
            raise ValueError(f"horizon {q}: predictions {p.shape} and truth {y.shape} are misaligned")
        m, excluded = mape_counted(y, p)
        report.entries[q] = HorizonMetrics(q, rmse(y, p), m, int(y.size), excluded)
    return report


# -- k-hop neighbourhoods -----------------------------------------------------


def _adjacency(g: MovementGraph, directed: bool) -> list[list[int]]:
    adj: list[set[int]] = [set() for _ in range(g.n)]
    for j, i in g.edges:
        adj[j].add(i)
        if not directed:
            adj[i].add(j)
    return [sorted(a) for a in adj]


def khop_neighbors(g: MovementGraph, i: int, k: int, directed: bool = False, adj=None) -> set[int]:
    """Nodes at shortest-path distance exactly ``k`` from ``i``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if not 0 <= i < g.n:
        raise ValueError(f"invalid movement id {i}")
    adj = adj if adj is not None else _adjacency(g, directed)
    dist = {i: 0}
    frontier = deque([i])
    ring = set()
    while frontier:
        u = frontier.popleft()
        if dist[u] == k:
            ring.add(u)
            continue
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                frontier.append(v)
    return ring


def khop_table(g: MovementGraph, k: int, directed: bool = False) -> list[np.ndarray]:
    adj = _adjacency(g, directed)
    return [np.array(sorted(khop_neighbors(g, i, k, directed, adj)), dtype=np.int64) for i in range(g.n)]


# -- MAD / STMAD --------------------------------------------------------------


@dataclass(frozen=True)
class MadResult:
    value: float
    n_nodes: int  # nodes contributing at least one valid pair
    n_skipped_pairs: int  # pairs dropped because a vector had zero norm


def mad_k_detail(features: np.ndarray, g: MovementGraph, k: int, neighbors=None) -> MadResult:
    H = np.asarray(features, dtype=float)
    if H.ndim != 2 or H.shape[0] != g.n or H.shape[1] < 1:
        raise ValueError(f"features must have shape ({g.n}, P) with P >= 1")
    neighbors = neighbors if neighbors is not None else khop_table(g, k)
    norms = np.linalg.norm(H, axis=1)
    node_means = []
    skipped = 0
    for i in range(g.n):
        nb = neighbors[i]
        if len(nb) == 0:
            continue
        if norms[i] == 0:
            skipped += len(nb)
            continue
        valid = nb[norms[nb] > 0]
        skipped += len(nb) - len(valid)
        if len(valid) == 0:
            continue
        cos = (H[valid] @ H[i]) / (norms[valid] * norms[i])
        node_means.append(float(np.mean(1.0 - np.clip(cos, -1.0, 1.0))))
    if not node_means:
        raise ValueError("MAD undefined: no node has a neighbour pair with non-zero features")
    return MadResult(float(np.mean(node_means)), len(node_means), skipped)


def mad_k(features: np.ndarray, g: MovementGraph, k: int, neighbors=None) -> float:
    """Mean over nodes of the mean cosine distance to their exact-``k``-hop neighbours."""
    return mad_k_detail(features, g, k, neighbors).value


@dataclass(frozen=True)
class SmoothnessEntry:
    k: int
    stmad: float
    window: int
    n_subgraphs: int
    mads: tuple[float, ...]
    n_skipped_pairs: int


def stmad(series: np.ndarray, g: MovementGraph, k: int, window: int = 5, directed: bool = False) -> SmoothnessEntry:
    """Average MAD over disjoint consecutive windows of a ``(minutes, N)`` series."""
    series = np.asarray(series, dtype=float)
    n_min = series.shape[0]
    if window < 1 or n_min < window:
        raise ValueError(f"series of {n_min} minutes is shorter than the window {window}")
    neighbors = khop_table(g, k, directed)
    mads, skipped = [], 0
    for m in range(n_min // window):
        res = mad_k_detail(series[m * window : (m + 1) * window].T, g, k, neighbors)
        mads.append(res.value)
        skipped += res.n_skipped_pairs
    return SmoothnessEntry(k, float(np.mean(mads)), window, len(mads), tuple(mads), skipped)


def smoothness_csv(rows: Mapping[str, Sequence[SmoothnessEntry]]) -> str:
    buf = io.StringIO()
    buf.write("series,k,stmad,window,n_subgraphs,n_skipped_pairs\n")
    for name, entries in rows.items():
        for e in entries:
            buf.write(f"{name},{e.k},{e.stmad:.17g},{e.window},{e.n_subgraphs},{e.n_skipped_pairs}\n")
    return buf.getvalue()


# -- baselines ----------------------------------------------------------------


def baseline_ha(train_series: np.ndarray) -> np.ndarray:
    """Per-node mean of the training series; used for every test minute and horizon."""
    train_series = np.asarray(train_series, dtype=float)
    if train_series.size == 0 or train_series.shape[0] == 0:
        raise ValueError("historical average needs a non-empty training series")
    return train_series.mean(axis=0)


def baseline_persistence(x_t, horizon: int = 1) -> np.ndarray:
    return np.array(x_t, dtype=float, copy=True)


def neighbor_average(x_t, g: MovementGraph) -> np.ndarray:
    """Mean of each node's value and its undirected 1-hop neighbours' values."""
    x_t = np.asarray(x_t, dtype=float)
    adj = _adjacency(g, directed=False)
    return np.array([x_t[[i, *adj[i]]].mean() for i in range(g.n)])


@dataclass
class LinearModel:
    coef: np.ndarray
    intercept: float
    ridge: bool

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coef + self.intercept


RIDGE = 1e-8


def baseline_linreg(X, y) -> LinearModel:
    """Least squares with intercept via the normal equations.

    Features are centred so the intercept drops out of the system. A
    rank-deficient design is solved with a ``1e-8`` ridge term on the
    feature weights (the intercept is never penalised) and flagged.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim == 1:
        X = X[:, None]
    if len(X) == 0 or len(X) != len(y):
        raise ValueError("linear regression needs matching, non-empty X and y")
    x_mean, y_mean = X.mean(axis=0), y.mean()
    Xc = X - x_mean
    gram = Xc.T @ Xc
    rhs = Xc.T @ (y - y_mean)
    ridge = np.linalg.matrix_rank(Xc) < X.shape[1]
    if ridge:
        gram = gram + RIDGE * np.eye(X.shape[1])
    coef = np.linalg.solve(gram, rhs)
    return LinearModel(coef, float(y_mean - x_mean @ coef), bool(ridge))
