import numpy as np
import pytest

from fdti.ftstg import (
    build_ftstg,
    edge_structure,
    edge_weight,
    node_features,
    static_features,
    window_features,
)
from fdti.roadnet import Direction, SignalPlan, graph_from_edges

from conftest import L, S, R, chain


def test_edge_weight_examples():
    assert edge_weight(30, 1) == 0.5
    assert edge_weight(0, 1) == 0.0
    assert edge_weight(60, 2) == 0.5


def test_edge_weight_raw_green():
    assert edge_weight(30, 2, normalize=False) == 15.0


@pytest.mark.parametrize("dt", [0, -1, 1.5])
def test_edge_weight_bad_gap(dt):
    with pytest.raises(ValueError):
        edge_weight(30, dt)


def test_chain_counts():
    g = chain(2)
    fg = build_ftstg(g, SignalPlan(np.full((3, 2), 30.0)), 0, 3)
    assert fg.n_vertices == 6
    assert fg.n_edges == 6
    assert list(fg.src) == [0, 0, 1] and list(fg.dst) == [0, 1, 1]


def test_all_red_zero_weights_same_structure():
    g = chain(3)
    green = build_ftstg(g, SignalPlan(np.full((4, 3), 45.0)), 0, 4)
    red = build_ftstg(g, SignalPlan(np.zeros((4, 3))), 0, 4)
    assert not red.weights.any()
    assert np.array_equal(red.src, green.src) and np.array_equal(red.dst, green.dst)


def test_weights_follow_source_green_at_frame_t():
    g = chain(2)
    plan = SignalPlan(np.array([[60.0, 0.0], [15.0, 30.0], [0.0, 0.0]]), t0=10)
    fg = build_ftstg(g, plan, 10, 3)
    # edges (0,0), (0,1), (1,1)
    assert fg.weights.tolist() == [[1.0, 1.0, 0.0], [0.25, 0.25, 0.5]]


def test_self_edge_and_dynamic_modes():
    g = chain(2)
    plan = SignalPlan(np.zeros((2, 2)))
    const = build_ftstg(g, plan, 0, 2, self_edges="constant")
    assert const.weights.tolist() == [[1.0, 0.0, 1.0]]
    static = build_ftstg(g, plan, 0, 2, dynamic=False)
    assert static.weights.tolist() == [[1.0, 1.0, 1.0]]
    with pytest.raises(ValueError):
        build_ftstg(g, plan, 0, 2, self_edges="other")


def test_coverage_error():
    with pytest.raises(ValueError):
        build_ftstg(chain(2), SignalPlan(np.zeros((2, 2))), 0, 3)


def test_single_frame_has_no_edges():
    fg = build_ftstg(chain(2), SignalPlan(np.zeros((1, 2))), 0, 1)
    assert fg.n_edges == 0 and fg.n_vertices == 2


def test_dump_rows():
    fg = build_ftstg(chain(2), SignalPlan(np.full((2, 2), 30.0), t0=5), 5, 2)
    assert fg.dump() == "t,src,dst,weight\n5,0,0,0.5\n5,0,1,0.5\n5,1,1,0.5\n"
    assert list(fg.edge_rows()) == [(0, 0, 0, 0.5), (0, 0, 1, 0.5), (0, 1, 1, 0.5)]


def test_edge_structure_has_self_pairs():
    g = graph_from_edges([S] * 3, [1.0] * 3, [(2, 0), (0, 1)])
    src, dst = edge_structure(g)
    assert list(zip(src.tolist(), dst.tolist())) == [(0, 0), (2, 0), (0, 1), (1, 1), (2, 2)]


def test_weights_read_only():
    fg = build_ftstg(chain(2), SignalPlan(np.zeros((2, 2))), 0, 2)
    with pytest.raises(ValueError):
        fg.weights[0, 0] = 1


# -- node features --------------------------------------------------------------


def test_node_feature_examples():
    assert node_features(7, 30, 120, 240, Direction.LEFT).tolist() == [7, 0.5, 0.5, 1, 0, 0]
    assert node_features(0, 0, 100, 100, Direction.RIGHT).tolist() == [0, 0, 1, 0, 0, 1]
    assert node_features(3.5, 60, 50, 100, Direction.STRAIGHT).tolist() == [3.5, 1, 0.5, 0, 1, 0]


def test_node_feature_bad_length():
    with pytest.raises(ValueError):
        node_features(1, 1, 200, 100, Direction.LEFT)


def test_window_features_match_scalar_version():
    g = graph_from_edges([L, S, R], [50.0, 100.0, 80.0], [(0, 1)])
    vol = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    green = np.array([[0.0, 30.0, 60.0], [15.0, 45.0, 6.0]])
    feats = window_features(vol, green, static_features(g))
    for t in range(2):
        for i in range(3):
            want = node_features(vol[t, i], green[t, i], g.lengths[i], 100.0, g.directions[i])
            assert feats[t, i].tolist() == want.tolist()
