"""Traffic-movement graph and per-minute signal plans.

A movement is a group of lanes on one intersection approach sharing a turning
direction. Movements are the graph nodes; a directed edge ``(j, i)`` means
vehicles leaving movement ``j`` enter movement ``i``.
"""
from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class RoadnetError(ValueError):
    """Raised for malformed or inconsistent roadnet / signal documents."""


class Direction(enum.Enum):
    LEFT = "L"
    STRAIGHT = "S"
    RIGHT = "R"

    @property
    def index(self) -> int:
        return _DIRECTION_ORDER.index(self)

    def one_hot(self) -> np.ndarray:
        v = np.zeros(3)
        v[self.index] = 1.0
        return v


_DIRECTION_ORDER = (Direction.LEFT, Direction.STRAIGHT, Direction.RIGHT)


@dataclass(frozen=True)
class TrafficMovement:
    id: int
    direction: Direction
    length_m: float

    def __post_init__(self):
        if not self.length_m > 0:
            raise RoadnetError(f"movement {self.id}: length must be positive, got {self.length_m}")


@dataclass(frozen=True)
class MovementGraph:
    movements: tuple[TrafficMovement, ...]
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        object.__setattr__(self, "movements", tuple(self.movements))
        object.__setattr__(self, "edges", frozenset(self.edges))
        ids = [m.id for m in self.movements]
        if sorted(ids) != list(range(len(ids))) or ids != sorted(ids):
            raise RoadnetError("movement ids must be unique, ordered and contiguous 0..N-1")
        n = len(ids)
        for j, i in self.edges:
            if not (0 <= j < n and 0 <= i < n):
                raise RoadnetError(f"edge ({j}, {i}) references an unknown movement")
            if i == j:
                raise RoadnetError(f"self-loop ({i}, {i}) is not allowed in the static graph")

    @property
    def n(self) -> int:
        return len(self.movements)

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([m.length_m for m in self.movements], dtype=float)

    @cached_property
    def directions(self) -> tuple[Direction, ...]:
        return tuple(m.direction for m in self.movements)

    @cached_property
    def edge_array(self) -> np.ndarray:
        """Edges as an ``(E, 2)`` int array of ``(src, dst)`` sorted by ``(dst, src)``."""
        if not self.edges:
            return np.zeros((0, 2), dtype=np.int64)
        arr = np.array(sorted(self.edges, key=lambda e: (e[1], e[0])), dtype=np.int64)
        return arr

    @cached_property
    def _upstream(self) -> tuple[tuple[int, ...], ...]:
        ups: list[list[int]] = [[] for _ in range(self.n)]
        for j, i in self.edges:
            ups[i].append(j)
        return tuple(tuple(sorted(u)) for u in ups)

    @cached_property
    def _downstream(self) -> tuple[tuple[int, ...], ...]:
        downs: list[list[int]] = [[] for _ in range(self.n)]
        for j, i in self.edges:
            downs[j].append(i)
        return tuple(tuple(sorted(d)) for d in downs)

    def downstream(self, i: int) -> tuple[int, ...]:
        self._check_id(i)
        return self._downstream[i]

    def _check_id(self, i: int) -> None:
        if not (isinstance(i, (int, np.integer)) and 0 <= i < self.n):
            raise RoadnetError(f"invalid movement id {i!r}")

    def relabel(self, perm: Sequence[int]) -> "MovementGraph":
        """Return the graph with movement ``k`` renamed to ``perm[k]``."""
        perm = list(perm)
        if sorted(perm) != list(range(self.n)):
            raise RoadnetError("relabel expects a permutation of 0..N-1")
        moved = sorted(
            (TrafficMovement(perm[m.id], m.direction, m.length_m) for m in self.movements),
            key=lambda m: m.id,
        )
        return MovementGraph(tuple(moved), frozenset((perm[j], perm[i]) for j, i in self.edges))


def upstream(g: MovementGraph, i: int) -> tuple[int, ...]:
    """Movements feeding into ``i``, ascending."""
    g._check_id(i)
    return g._upstream[i]


def parse_roadnet(text: str) -> MovementGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RoadnetError(f"malformed roadnet document: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("movements"), list):
        raise RoadnetError("roadnet document needs a top-level 'movements' list")

    entries = {}
    for raw in doc["movements"]:
        try:
            mid = raw["id"]
            direction = Direction(raw["direction"])
            length = float(raw["length_m"])
            downstream = list(raw.get("downstream", []))
        except (KeyError, TypeError, ValueError) as exc:
            raise RoadnetError(f"malformed movement entry {raw!r}: {exc}") from exc
        if not isinstance(mid, int) or isinstance(mid, bool) or mid < 0:
            raise RoadnetError(f"movement id must be a non-negative integer, got {mid!r}")
        if mid in entries:
            raise RoadnetError(f"duplicate movement id {mid}")
        entries[mid] = (direction, length, downstream)

    n = len(entries)
    if sorted(entries) != list(range(n)):
        raise RoadnetError("movement ids must form the contiguous range 0..N-1")
    movements = tuple(TrafficMovement(k, entries[k][0], entries[k][1]) for k in range(n))
    edges = set()
    for j in range(n):
        for i in entries[j][2]:
            if not isinstance(i, int) or not 0 <= i < n:
                raise RoadnetError(f"movement {j} lists unknown downstream id {i!r}")
            if (j, i) in edges:
                raise RoadnetError(f"duplicate edge ({j}, {i})")
            edges.add((j, i))
    return MovementGraph(movements, frozenset(edges))


def serialize_roadnet(g: MovementGraph) -> str:
    doc = {
        "movements": [
            {
                "id": m.id,
                "direction": m.direction.value,
                "length_m": m.length_m,
                "downstream": list(g.downstream(m.id)),
            }
            for m in g.movements
        ]
    }
    return json.dumps(doc, indent=1)


@dataclass(frozen=True)
class SignalPlan:
    """Green seconds per (minute, movement) over ``[t0, t0 + len)``."""

    green_s: np.ndarray
    t0: int = 0

    def __post_init__(self):
        arr = np.array(self.green_s, dtype=float)
        if arr.ndim != 2:
            raise RoadnetError("green_s must be a (minutes, movements) array")
        if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 60):
            raise RoadnetError("green seconds must lie in [0, 60]")
        arr.setflags(write=False)
        object.__setattr__(self, "green_s", arr)

    @property
    def t_range(self) -> tuple[int, int]:
        return self.t0, self.t0 + self.green_s.shape[0]

    @property
    def n(self) -> int:
        return self.green_s.shape[1]

    def covers(self, t0: int, t1: int) -> bool:
        return self.t0 <= t0 and t1 <= self.t_range[1]

    def at(self, t: int, i: int | None = None):
        lo, hi = self.t_range
        if not lo <= t < hi:
            raise RoadnetError(f"signal plan does not cover minute {t} (range [{lo}, {hi}))")
        row = self.green_s[t - self.t0]
        return row if i is None else row[i]

    def window(self, t0: int, t1: int) -> np.ndarray:
        if not self.covers(t0, t1):
            raise RoadnetError(f"signal plan {self.t_range} does not cover [{t0}, {t1})")
        return self.green_s[t0 - self.t0 : t1 - self.t0]

    def __eq__(self, other):
        if not isinstance(other, SignalPlan):
            return NotImplemented
        return self.t0 == other.t0 and np.array_equal(self.green_s, other.green_s)

    __hash__ = None


SIGNAL_HEADER = ("t_min", "node_id", "green_s")


def parse_signal_plan(text: str, g: MovementGraph, t_range: tuple[int, int]) -> SignalPlan:
    t0, t1 = t_range
    green = np.full((t1 - t0, g.n), np.nan)
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != SIGNAL_HEADER:
        raise RoadnetError(f"signal document header must be {','.join(SIGNAL_HEADER)}")
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            t, i, p = int(row[0]), int(row[1]), float(row[2])
        except (IndexError, ValueError) as exc:
            raise RoadnetError(f"line {lineno}: malformed row {row!r}") from exc
        if not 0 <= i < g.n:
            raise RoadnetError(f"line {lineno}: unknown movement id {i}")
        if not 0.0 <= p <= 60.0:
            raise RoadnetError(f"line {lineno}: green seconds {p} outside [0, 60]")
        if not t0 <= t < t1:
            continue
        if not np.isnan(green[t - t0, i]):
            raise RoadnetError(f"line {lineno}: duplicate entry for minute {t}, movement {i}")
        green[t - t0, i] = p
    missing = np.argwhere(np.isnan(green))
    if len(missing):
        t, i = missing[0]
        raise RoadnetError(
            f"signal plan missing {len(missing)} entries, first at minute {t + t0}, movement {i}"
        )
    return SignalPlan(green, t0)


def serialize_signal_plan(plan: SignalPlan) -> str:
    buf = io.StringIO()
    buf.write(",".join(SIGNAL_HEADER) + "\n")
    t0, _ = plan.t_range
    for dt, row in enumerate(plan.green_s):
        for i, p in enumerate(row):
            buf.write(f"{t0 + dt},{i},{p:.17g}\n")
    return buf.getvalue()


def graph_from_edges(
    directions: Iterable[Direction], lengths: Iterable[float], edges: Iterable[tuple[int, int]]
) -> MovementGraph:
    movements = tuple(
        TrafficMovement(k, d, float(length)) for k, (d, length) in enumerate(zip(directions, lengths))
    )
    return MovementGraph(movements, frozenset(edges))
