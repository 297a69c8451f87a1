from fractions import Fraction

import numpy as np
import pytest

from fdti.roadnet import Direction, SignalPlan, graph_from_edges, upstream
from fdti.simulator import (
    FLOWS_HEADER,
    VOLUMES_HEADER,
    SimConfig,
    SimConfigError,
    SimState,
    build_grid_network,
    empty_like,
    export_dataset,
    green_schedule,
    import_dataset,
    plan_from_schedule,
    run,
    schedule_from_plan,
    simulate,
    step,
)

from conftest import S, chain

HEADINGS = "NESW"
DIRS = "LSR"


def mid(inter, heading, d):
    """Documented id layout: ((intersection * 4 + heading) * 3 + direction)."""
    return (inter * 4 + HEADINGS.index(heading)) * 3 + DIRS.index(d)


# Hand-enumerated 2x2 wiring. Intersections 0=(0,0) 1=(0,1) 2=(1,0) 3=(1,1);
# heading is the travel direction on arrival. Each entry: (intersection,
# arrival heading, turn) -> (next intersection, next heading), or absent if
# the turn leaves the grid.
WIRING_2X2 = {
    (0, "N", "R"): (1, "E"),
    (0, "E", "S"): (1, "E"), (0, "E", "R"): (2, "S"),
    (0, "S", "L"): (1, "E"), (0, "S", "S"): (2, "S"),
    (0, "W", "L"): (2, "S"),
    (1, "N", "L"): (0, "W"),
    (1, "E", "R"): (3, "S"),
    (1, "S", "S"): (3, "S"), (1, "S", "R"): (0, "W"),
    (1, "W", "L"): (3, "S"), (1, "W", "S"): (0, "W"),
    (2, "N", "S"): (0, "N"), (2, "N", "R"): (3, "E"),
    (2, "E", "L"): (0, "N"), (2, "E", "S"): (3, "E"),
    (2, "S", "L"): (3, "E"),
    (2, "W", "R"): (0, "N"),
    (3, "N", "L"): (2, "W"), (3, "N", "S"): (1, "N"),
    (3, "E", "L"): (1, "N"),
    (3, "S", "R"): (2, "W"),
    (3, "W", "S"): (2, "W"), (3, "W", "R"): (1, "N"),
}


def test_grid_1x1_all_boundary():
    g, plan = build_grid_network(SimConfig(rows=1, cols=1))
    assert g.n == 12
    assert g.edges == frozenset()
    assert all(g.downstream(i) == () for i in range(g.n))


def test_grid_2x2_wiring_by_hand():
    g, _ = build_grid_network(SimConfig(rows=2, cols=2))
    assert g.n == 48
    expected = set()
    for (inter, h, d), (nxt, nh) in WIRING_2X2.items():
        for d2 in DIRS:
            expected.add((mid(inter, h, d), mid(nxt, nh, d2)))
    assert g.edges == expected
    assert len(expected) == 72
    assert [g.directions[mid(0, "N", d)] for d in DIRS] == [Direction.LEFT, Direction.STRAIGHT, Direction.RIGHT]


def test_grid_lengths_shared_per_approach():
    g, _ = build_grid_network(SimConfig(rows=2, cols=2))
    lengths = g.lengths.reshape(16, 3)
    assert np.all(lengths == lengths[:, :1])
    assert np.all((lengths >= 100) & (lengths <= 400))


def test_signal_split_30_30():
    config = SimConfig(rows=2, cols=2, cycle_s=60, split=0.5, duration_min=5, warmup_min=0)
    _, plan = build_grid_network(config)
    assert np.all(plan.green_s == 30)


def test_signal_phases_alternate():
    config = SimConfig(rows=1, cols=2, duration_min=1, warmup_min=0)
    mask = green_schedule(config)
    # intersection 0, second 0: N/S-bound green, E/W-bound red
    assert mask[0, mid(0, "N", "S")] and mask[0, mid(0, "S", "L")]
    assert not mask[0, mid(0, "E", "S")]
    # neighbour is offset by half a cycle
    assert mask[0, mid(1, "E", "S")] and not mask[0, mid(1, "N", "S")]
    # never both phases at once
    assert not np.any(mask[:, mid(0, "N", "S")] & mask[:, mid(0, "E", "S")])


def test_right_turn_green_option():
    mask = green_schedule(SimConfig(rows=1, cols=1, duration_min=1, warmup_min=0, right_turn_green=True))
    assert mask[:, 2::3].all()


def test_schedule_plan_roundtrip():
    mask = green_schedule(SimConfig(rows=1, cols=1, duration_min=3, warmup_min=0, cycle_s=45))
    plan = plan_from_schedule(mask)
    assert np.array_equal(plan_from_schedule(schedule_from_plan(plan)).green_s, plan.green_s)


# -- one-second step ----------------------------------------------------------

ONE = graph_from_edges([S], [100.0], [])


def _step(queue, green, sat):
    config = SimConfig(rows=1, cols=1, saturation_vps=sat)
    return step(SimState.from_vehicles([queue]), ONE, np.array([green]), config)


def test_step_discharge_capped():
    s = _step(5.0, 1, 2.0)
    assert s.last_outflow[0] / 2**20 == 2.0
    assert s.queue_veh[0] == 3.0


def test_step_red_holds():
    s = _step(5.0, 0, 2.0)
    assert s.last_outflow[0] == 0
    assert s.queue_veh[0] == 5.0


def test_step_drains_partial_queue():
    s = _step(1.5, 1, 2.0)
    assert s.last_outflow[0] / 2**20 == 1.5
    assert s.queue_veh[0] == 0.0


def test_step_routes_by_turn_ratio():
    g = graph_from_edges(
        [S, Direction.LEFT, Direction.STRAIGHT, Direction.RIGHT], [1.0] * 4, [(0, 1), (0, 2), (0, 3)]
    )
    config = SimConfig(rows=1, cols=1, saturation_vps=10.0)
    s = step(SimState.from_vehicles([10.0, 0, 0, 0]), g, np.array([1, 0, 0, 0]), config)
    assert s.queue_veh.tolist() == pytest.approx([0.0, 2.0, 6.0, 2.0], abs=2**-19)
    assert s.queue.sum() == 10 * 2**20
    assert s.ledger_balance() == -s.initial_total


# -- full runs ----------------------------------------------------------------


def test_zero_demand_is_empty():
    d = run(SimConfig(rows=2, cols=2, demand_vpm=0, duration_min=15))
    assert not d.volumes.any() and not d.inflow.any() and not d.outflow.any()


def test_conservation_every_cell(small_data):
    assert np.all(small_data.conservation_residual() == 0)


def test_ledger_from_flow_file(tmp_path):
    """entered == exited + final count, summed independently from the exported flows."""
    config = SimConfig(rows=2, cols=2, demand_vpm=6, duration_min=60, seed=1)
    d, state = simulate(*_grid_and_mask(config), config)
    export_dataset(d, tmp_path)
    g, _ = build_grid_network(config)
    rows = (tmp_path / "flows.csv").read_text().splitlines()[1:]
    entered = exited = Fraction(0)
    last_in, last_out = {}, {}
    for line in rows:
        t, i, inflow, outflow = line.split(",")
        t, i = int(t), int(i)
        if not upstream(g, i):
            entered += exact(inflow)
        if not g.downstream(i):
            exited += exact(outflow)
        if t == 59:
            last_in[i], last_out[i] = exact(inflow), exact(outflow)
    vol_rows = (tmp_path / "volumes.csv").read_text().splitlines()[1:]
    final = Fraction(0)
    for line in vol_rows:
        t, i, v = line.split(",")
        if int(t) == 59:
            final += exact(v) + last_in[int(i)] - last_out[int(i)]
    assert entered > 0
    assert entered == exited + final
    assert final == Fraction(int(state.queue.sum()), 2**20)


def exact(text):
    """17 significant digits round-trip a float exactly; Fraction keeps the sum exact."""
    return Fraction(float(text))


def _grid_and_mask(config):
    from fdti.simulator import _grid

    grid = _grid(config)
    return grid.graph, green_schedule(config, grid)


def test_determinism_and_seed_sensitivity():
    a = run(SimConfig(seed=7, duration_min=20))
    b = run(SimConfig(seed=7, duration_min=20))
    c = run(SimConfig(seed=8, duration_min=20))
    assert a == b
    assert a != c


def test_export_import_roundtrip(tmp_path, small_data):
    paths = export_dataset(small_data, tmp_path)
    assert sorted(p.name for p in paths.values()) == [
        "flows.csv", "manifest.json", "roadnet.json", "signal.csv", "volumes.csv"
    ]
    assert import_dataset(tmp_path) == small_data


def test_export_row_count(tmp_path):
    d = run(SimConfig(rows=2, cols=2, duration_min=60))
    export_dataset(d, tmp_path)
    assert len((tmp_path / "volumes.csv").read_text().splitlines()) == 1 + 60 * 48


def test_export_empty_dataset(tmp_path, small_data):
    export_dataset(empty_like(small_data), tmp_path)
    assert (tmp_path / "volumes.csv").read_text() == ",".join(VOLUMES_HEADER) + "\n"
    assert (tmp_path / "flows.csv").read_text() == ",".join(FLOWS_HEADER) + "\n"


def test_dataset_arrays_read_only(small_data):
    with pytest.raises(ValueError):
        small_data.volumes[0, 0] = 1.0


@pytest.mark.parametrize("kw", [
    {"rows": 0}, {"saturation_vps": 0}, {"demand_vpm": -1}, {"split": 1.5},
    {"warmup_min": 60, "duration_min": 60}, {"seed": -1}, {"turn_ratios": {"L": 0.5, "S": 0.6, "R": 0.2}},
])
def test_config_validation(kw):
    with pytest.raises(SimConfigError):
        SimConfig.from_dict(kw)


def test_config_dict_roundtrip():
    c = SimConfig(rows=3, seed=99, turn_ratios={"L": 0.1, "S": 0.8, "R": 0.1})
    assert SimConfig.from_dict(c.to_dict()) == c
    with pytest.raises(SimConfigError, match="unknown"):
        SimConfig.from_dict({"rowz": 1})
