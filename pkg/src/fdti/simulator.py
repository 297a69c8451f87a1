"""Signal-gated queue simulator producing per-minute volumes and flows.

Each movement holds a queue. Every second a movement discharges
``min(queue, saturation * green)`` vehicles which are split over its
downstream movements by turn ratio; boundary movements discharge out of the
network. Entry movements receive Poisson arrivals from per-movement
counter-based random streams.

Vehicle counts are tracked internally as integers in units of ``1 / UNIT``
vehicles. Fractional vehicles are therefore allowed, every transfer conserves
vehicles exactly, and every exported float is exactly representable so the
per-minute identity ``x[t+1] = x[t] + inflow[t] - outflow[t]`` holds bit for
bit in float64.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .roadnet import (
    Direction,
    MovementGraph,
    SignalPlan,
    graph_from_edges,
    parse_roadnet,
    parse_signal_plan,
    serialize_roadnet,
    serialize_signal_plan,
)

UNIT = 1 << 20
DATASET_FORMAT = 1

# travel headings, clockwise; (row, col) step taken when driving that way
_HEADINGS = ("N", "E", "S", "W")
_STEP = {"N": (-1, 0), "E": (0, 1), "S": (1, 0), "W": (0, -1)}
_TURN = {Direction.LEFT: -1, Direction.STRAIGHT: 0, Direction.RIGHT: 1}
_DIRS = (Direction.LEFT, Direction.STRAIGHT, Direction.RIGHT)

LENGTH_STREAM = 1 << 63


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    rows: int = 2
    cols: int = 2
    saturation_vps: float = 0.5
    demand_vpm: float = 6.0
    turn_ratios: Mapping[Direction, float] = field(
        default_factory=lambda: {Direction.LEFT: 0.2, Direction.STRAIGHT: 0.6, Direction.RIGHT: 0.2}
    )
    cycle_s: int = 60
    split: float = 0.5
    duration_min: int = 60
    warmup_min: int = 10
    seed: int = 1
    right_turn_green: bool = False
    length_range_m: tuple[float, float] = (100.0, 400.0)

    def __post_init__(self):
        ratios = {Direction(k) if not isinstance(k, Direction) else k: float(v)
                  for k, v in dict(self.turn_ratios).items()}
        object.__setattr__(self, "turn_ratios", ratios)
        if set(ratios) != set(_DIRS):
            raise SimConfigError("turn_ratios must give a value for L, S and R")
        if any(v < 0 for v in ratios.values()) or abs(sum(ratios.values()) - 1.0) > 1e-9:
            raise SimConfigError("turn_ratios must be non-negative and sum to 1")
        if self.rows < 1 or self.cols < 1:
            raise SimConfigError("rows and cols must be positive")
        if self.saturation_vps <= 0:
            raise SimConfigError("saturation_vps must be positive")
        if self.demand_vpm < 0:
            raise SimConfigError("demand_vpm must be non-negative")
        if self.cycle_s < 1:
            raise SimConfigError("cycle_s must be a positive integer")
        if not 0.0 <= self.split <= 1.0:
            raise SimConfigError("split must lie in [0, 1]")
        if self.duration_min < 1 or self.warmup_min < 0:
            raise SimConfigError("duration_min must be positive and warmup_min non-negative")
        if self.warmup_min >= self.duration_min:
            raise SimConfigError("warmup_min must be smaller than duration_min")
        if not 0 <= self.seed < 2**64:
            raise SimConfigError("seed must be a 64-bit unsigned integer")
        lo, hi = self.length_range_m
        if not 0 < lo <= hi:
            raise SimConfigError("length_range_m must satisfy 0 < lo <= hi")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise SimConfigError(f"unknown simulator config keys: {sorted(unknown)}")
        kw = dict(raw)
        if "turn_ratios" in kw:
            kw["turn_ratios"] = {Direction(k): v for k, v in kw["turn_ratios"].items()}
        if "length_range_m" in kw:
            kw["length_range_m"] = tuple(kw["length_range_m"])
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["turn_ratios"] = {k.value: v for k, v in self.turn_ratios.items()}
        out["length_range_m"] = list(self.length_range_m)
        return out


def _stream(seed: int, stream: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(key=seed | (stream << 64)))


@dataclass(frozen=True)
class _Grid:
    graph: MovementGraph
    heading: np.ndarray  # index into _HEADINGS of the arrival heading
    intersection: np.ndarray  # r * cols + c
    entry: np.ndarray  # bool, approach fed from outside the grid


def _grid(config: SimConfig) -> _Grid:
    rows, cols = config.rows, config.cols

    def mid(r, c, h, d):
        return ((r * cols + c) * 4 + h) * 3 + d

    lo, hi = config.length_range_m
    road = np.round(_stream(config.seed, LENGTH_STREAM).uniform(lo, hi, size=rows * cols * 4))

    directions, lengths, edges = [], [], []
    heading, inter, entry = [], [], []
    for r in range(rows):
        for c in range(cols):
            for h, name in enumerate(_HEADINGS):
                dr, dc = _STEP[name]
                fed_from_outside = not (0 <= r - dr < rows and 0 <= c - dc < cols)
                for d, direction in enumerate(_DIRS):
                    me = mid(r, c, h, d)
                    directions.append(direction)
                    lengths.append(road[(r * cols + c) * 4 + h])
                    heading.append(h)
                    inter.append(r * cols + c)
                    entry.append(fed_from_outside)
                    out_h = (h + _TURN[direction]) % 4
                    sr, sc = _STEP[_HEADINGS[out_h]]
                    nr, nc = r + sr, c + sc
                    if 0 <= nr < rows and 0 <= nc < cols:
                        edges.extend((me, mid(nr, nc, out_h, k)) for k in range(3))
    graph = graph_from_edges(directions, lengths, edges)
    return _Grid(graph, np.array(heading), np.array(inter), np.array(entry))


def green_schedule(config: SimConfig, grid: _Grid | None = None) -> np.ndarray:
    """Per-second green indicator, shape ``(duration_min * 60, N)``, bool.

    Two-phase fixed-time control: north/south-bound approaches share phase A,
    east/west-bound share phase B. Adjacent intersections are offset by half a
    cycle.
    """
    grid = grid or _grid(config)
    r = grid.intersection // config.cols
    c = grid.intersection % config.cols
    offset = ((r + c) % 2) * (config.cycle_s // 2)
    green_a = int(round(config.split * config.cycle_s))
    secs = np.arange(config.duration_min * 60)[:, None]
    phase_pos = (secs + offset[None, :]) % config.cycle_s
    in_a = phase_pos < green_a
    is_a = np.isin(grid.heading, (0, 2))[None, :]
    mask = np.where(is_a, in_a, ~in_a)
    if config.right_turn_green:
        rights = np.array([d is Direction.RIGHT for d in grid.graph.directions])
        mask = mask | rights[None, :]
    return mask


def plan_from_schedule(mask: np.ndarray, t0: int = 0) -> SignalPlan:
    seconds, n = mask.shape
    return SignalPlan(mask.reshape(seconds // 60, 60, n).sum(axis=1).astype(float), t0)


def schedule_from_plan(plan: SignalPlan) -> np.ndarray:
    """Expand per-minute green seconds to a per-second mask.

    Green occupies the first ``ceil(p)`` seconds of the minute; fractional
    green is rounded up so ``p > 0`` always yields some discharge.
    """
    g = np.ceil(plan.green_s).astype(int)
    pos = np.arange(60)[None, :, None]
    return (pos < g[:, None, :]).reshape(-1, plan.n)


def build_grid_network(config: SimConfig) -> tuple[MovementGraph, SignalPlan]:
    grid = _grid(config)
    return grid.graph, plan_from_schedule(green_schedule(config, grid))


@dataclass(frozen=True)
class SimState:
    """Integer-unit queues and the conservation ledger after ``clock_s`` seconds."""

    queue: np.ndarray
    entered: int = 0
    exited: int = 0
    initial_total: int = 0
    clock_s: int = 0
    last_inflow: np.ndarray | None = None
    last_outflow: np.ndarray | None = None

    @classmethod
    def empty(cls, n: int) -> "SimState":
        return cls(np.zeros(n, dtype=np.int64))

    @classmethod
    def from_vehicles(cls, queue_veh) -> "SimState":
        q = to_units(queue_veh)
        if np.any(q < 0):
            raise ValueError("queues must be non-negative")
        return cls(q, initial_total=int(q.sum()))

    @property
    def queue_veh(self) -> np.ndarray:
        return self.queue / UNIT

    def ledger_balance(self) -> int:
        """``entered - exited - sum(queue)``; constant ``-initial_total`` when conserved."""
        return self.entered - self.exited - int(self.queue.sum())


def to_units(veh) -> np.ndarray:
    return np.round(np.asarray(veh, dtype=float) * UNIT).astype(np.int64)


@dataclass(frozen=True)
class _Routing:
    src: np.ndarray  # movement ids with at least one downstream
    dst: np.ndarray  # (len(src), k) downstream ids, padded with -1
    share: np.ndarray  # (len(src), k) turn share per downstream, padded with 0
    boundary: np.ndarray  # bool per movement: discharges leave the network


def _routing(g: MovementGraph, turn_ratios: Mapping[Direction, float]) -> _Routing:
    downs = [g.downstream(i) for i in range(g.n)]
    src = np.array([i for i in range(g.n) if downs[i]], dtype=np.int64)
    width = max((len(d) for d in downs), default=0) or 1
    dst = np.full((len(src), width), -1, dtype=np.int64)
    share = np.zeros((len(src), width))
    for row, j in enumerate(src):
        w = np.array([turn_ratios[g.directions[i]] for i in downs[j]], dtype=float)
        w = w / w.sum() if w.sum() > 0 else np.full(len(w), 1.0 / len(w))
        dst[row, : len(w)] = downs[j]
        share[row, : len(w)] = w
    boundary = np.array([not d for d in downs])
    return _Routing(src, dst, share, boundary)


def step(
    state: SimState,
    g: MovementGraph,
    green: np.ndarray,
    config: SimConfig,
    arrivals: np.ndarray | None = None,
    routing: _Routing | None = None,
) -> SimState:
    """Advance the network by one second.

    ``green`` is the 0/1 indicator for this second, ``arrivals`` the external
    arrivals in vehicles (defaults to none). Discharges are computed from the
    queues at the start of the second; transfers land after.
    """
    routing = routing or _routing(g, config.turn_ratios)
    cap = int(round(config.saturation_vps * UNIT))
    q = state.queue
    discharge = np.minimum(q, cap * np.asarray(green, dtype=np.int64))

    inflow = np.zeros_like(q)
    ext = 0
    if arrivals is not None:
        arr = to_units(arrivals)
        inflow += arr
        ext = int(arr.sum())

    if len(routing.src):
        d = discharge[routing.src]
        parts = np.floor(d[:, None] * routing.share).astype(np.int64)
        # remainder from flooring goes to the largest share so nothing is lost
        main = np.argmax(routing.share, axis=1)
        parts[np.arange(len(d)), main] += d - parts.sum(axis=1)
        valid = routing.dst >= 0
        np.add.at(inflow, routing.dst[valid], parts[valid])

    left = int(discharge[routing.boundary].sum())
    return SimState(
        queue=q - discharge + inflow,
        entered=state.entered + ext,
        exited=state.exited + left,
        initial_total=state.initial_total,
        clock_s=state.clock_s + 1,
        last_inflow=inflow,
        last_outflow=discharge,
    )


@dataclass(frozen=True)
class Dataset:
    volumes: np.ndarray  # (minutes, N) vehicles at the start of each minute
    inflow: np.ndarray  # (minutes, N) vehicles entering during the minute
    outflow: np.ndarray  # (minutes, N) vehicles leaving during the minute
    signal: SignalPlan
    graph: MovementGraph
    t0: int = 0
    warmup_min: int = 0

    def __post_init__(self):
        for name in ("volumes", "inflow", "outflow"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape[1] != self.graph.n:
                raise ValueError(f"{name} must have shape (minutes, {self.graph.n})")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.volumes.shape == self.inflow.shape == self.outflow.shape):
            raise ValueError("volume and flow arrays must be aligned")
        if self.signal.n != self.graph.n or not self.signal.covers(*self.t_range):
            raise ValueError("signal plan must cover the dataset time range")

    @property
    def n_minutes(self) -> int:
        return self.volumes.shape[0]

    @property
    def t_range(self) -> tuple[int, int]:
        return self.t0, self.t0 + self.n_minutes

    @property
    def warmup_mask(self) -> np.ndarray:
        return np.arange(self.t0, self.t0 + self.n_minutes) < self.t0 + self.warmup_min

    def conservation_residual(self) -> np.ndarray:
        """``x[t+1] - (x[t] + inflow[t] - outflow[t])`` for every cell with a successor."""
        x = self.volumes
        return x[1:] - (x[:-1] + self.inflow[:-1] - self.outflow[:-1])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.t0 == other.t0
            and self.warmup_min == other.warmup_min
            and self.graph == other.graph
            and self.signal == other.signal
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("volumes", "inflow", "outflow")
            )
        )

    __hash__ = None


def simulate(
    g: MovementGraph,
    green: np.ndarray,
    config: SimConfig,
    entry: np.ndarray | None = None,
) -> tuple[Dataset, SimState]:
    """Run the queue model from an empty network on an explicit per-second green mask.

    ``entry`` flags movements fed by external demand; by default every
    movement without an upstream is an entry.
    """
    seconds = green.shape[0]
    if seconds % 60 or green.shape[1] != g.n:
        raise ValueError("green mask must have shape (minutes * 60, N)")
    minutes = seconds // 60
    if entry is None:
        has_up = np.zeros(g.n, dtype=bool)
        for _, i in g.edges:
            has_up[i] = True
        entry = ~has_up
    routing = _routing(g, config.turn_ratios)

    arrivals = np.zeros((seconds, g.n), dtype=np.int64)
    for i in np.flatnonzero(entry):
        lam = config.demand_vpm * config.turn_ratios[g.directions[i]] / 60.0
        if lam > 0:
            arrivals[:, i] = _stream(config.seed, int(i)).poisson(lam, size=seconds)

    vol = np.zeros((minutes, g.n), dtype=np.int64)
    inflow = np.zeros_like(vol)
    outflow = np.zeros_like(vol)
    state = SimState.empty(g.n)
    for s in range(seconds):
        t = s // 60
        if s % 60 == 0:
            vol[t] = state.queue
        state = step(state, g, green[s], config, arrivals[s], routing)
        inflow[t] += state.last_inflow
        outflow[t] += state.last_outflow

    plan = plan_from_schedule(green)
    data = Dataset(vol / UNIT, inflow / UNIT, outflow / UNIT, plan, g, 0, config.warmup_min)
    return data, state


def run(config: SimConfig) -> Dataset:
    grid = _grid(config)
    data, _ = simulate(grid.graph, green_schedule(config, grid), config, grid.entry)
    return data


# -- file formats -------------------------------------------------------------

VOLUMES_HEADER = ("t_min", "node_id", "volume")
FLOWS_HEADER = ("t_min", "node_id", "inflow", "outflow")


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def export_dataset(d: Dataset, directory, extra_manifest: Mapping | None = None) -> dict[str, Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "roadnet": out / "roadnet.json",
        "signal": out / "signal.csv",
        "volumes": out / "volumes.csv",
        "flows": out / "flows.csv",
    }
    paths["roadnet"].write_text(serialize_roadnet(d.graph))
    paths["signal"].write_text(serialize_signal_plan(d.signal))

    vol = io.StringIO()
    flo = io.StringIO()
    vol.write(",".join(VOLUMES_HEADER) + "\n")
    flo.write(",".join(FLOWS_HEADER) + "\n")
    for k in range(d.n_minutes):
        t = d.t0 + k
        for i in range(d.graph.n):
            vol.write(f"{t},{i},{_fmt(d.volumes[k, i])}\n")
            flo.write(f"{t},{i},{_fmt(d.inflow[k, i])},{_fmt(d.outflow[k, i])}\n")
    paths["volumes"].write_text(vol.getvalue())
    paths["flows"].write_text(flo.getvalue())

    meta = {
        "format": DATASET_FORMAT,
        "t_range": list(d.t_range),
        "warmup_min": d.warmup_min,
        "n_nodes": d.graph.n,
    }
    if extra_manifest:
        meta.update(extra_manifest)
    paths["manifest"] = out / "manifest.json"
    paths["manifest"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def read_node_table(path, header: tuple[str, ...], n: int, t_range: tuple[int, int] | None = None):
    """Read a ``t_min,node_id,...`` file into ``(t0, array[minutes, n, cols])``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        got = tuple(next(reader, ()))
        if got != header:
            raise ValueError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
        rows = [r for r in reader if r]
    ncols = len(header) - 2
    if t_range is None:
        if not rows:
            return 0, np.zeros((0, n, ncols))
        ts = [int(r[0]) for r in rows]
        t_range = (min(ts), max(ts) + 1)
    t0, t1 = t_range
    out = np.full((t1 - t0, n, ncols), np.nan)
    for r in rows:
        t, i = int(r[0]), int(r[1])
        if not (t0 <= t < t1 and 0 <= i < n):
            raise ValueError(f"{path}: row {r!r} outside the declared range")
        out[t - t0, i] = [float(v) for v in r[2:]]
    if np.isnan(out).any():
        raise ValueError(f"{path}: missing (t_min, node_id) rows")
    return t0, out


def import_dataset(directory) -> Dataset:
    src = Path(directory)
    meta = json.loads((src / "manifest.json").read_text())
    if meta.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {meta.get('format')!r}")
    t_range = tuple(meta["t_range"])
    g = parse_roadnet((src / "roadnet.json").read_text())
    plan = parse_signal_plan((src / "signal.csv").read_text(), g, t_range)
    _, vol = read_node_table(src / "volumes.csv", VOLUMES_HEADER, g.n, t_range)
    _, flo = read_node_table(src / "flows.csv", FLOWS_HEADER, g.n, t_range)
    return Dataset(vol[..., 0], flo[..., 0], flo[..., 1], plan, g, t_range[0], meta["warmup_min"])


def empty_like(d: Dataset) -> Dataset:
    n = d.graph.n
    z = np.zeros((0, n))
    return Dataset(z, z, z, SignalPlan(np.zeros((0, n)), d.t0), d.graph, d.t0, 0)

