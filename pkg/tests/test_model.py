import numpy as np
import pytest

from fdti.ftstg import build_ftstg, static_features, window_features
from fdti.model import (
    GraphContext,
    ModelConfig,
    aggregate,
    backward,
    discounted_accumulate,
    discounted_partial_sums,
    embed,
    flow_loss,
    flow_loss_grad,
    forward,
    init_params,
    loss_and_grad,
    make_window,
    param_count,
    param_count_formula,
    param_names,
    param_shapes,
    propagate,
    rollout,
    transition_one_step,
)
from fdti.roadnet import SignalPlan

from conftest import chain, random_graph
from gradcheck import max_relative_error, random_instance


def test_config_defaults_and_validation():
    c = ModelConfig()
    assert (c.hidden_dim, c.n_layers, c.window, c.discount) == (256, 4, 5, 0.9)
    assert c.clamp_nonneg and c.use_residual
    for bad in ({"window": 2, "n_layers": 2}, {"discount": 0.0}, {"discount": 1.5}, {"hidden_dim": 0}):
        with pytest.raises(ValueError):
            ModelConfig(**bad)
    assert ModelConfig.from_dict(c.to_dict()) == c


# -- parameters -----------------------------------------------------------------


def test_param_count_d8_l2():
    params = init_params(ModelConfig(hidden_dim=8, n_layers=2))
    assert param_count(params) == 56 + 2 * (17 * 8) + 2 * 9 == 346
    assert param_count_formula(6, 8, 2) == 346


def test_init_deterministic_and_zero_bias():
    c = ModelConfig(hidden_dim=8, n_layers=2, seed=5)
    a, b = init_params(c), init_params(c)
    assert list(a) == param_names(2)
    for k in a:
        assert np.array_equal(a[k], b[k])
        assert a[k].shape == param_shapes(c)[k]
        if k.startswith("b"):
            assert not a[k].any()
    other = init_params(ModelConfig(hidden_dim=8, n_layers=2, seed=6))
    assert not np.array_equal(a["W_emb"], other["W_emb"])


# -- building blocks --------------------------------------------------------------


def _zero_params(d=4, L=1):
    return {k: np.zeros(s) for k, s in param_shapes(ModelConfig(hidden_dim=d, n_layers=L)).items()}


def test_embed_zero_params():
    assert not embed(np.random.default_rng(0).normal(size=(3, 6)), _zero_params()).any()


def test_embed_zero_input():
    p = _zero_params()
    p["W_emb"] = np.eye(6, 4)
    assert not embed(np.zeros((2, 6)), p).any()


def test_embed_bounded():
    p = init_params(ModelConfig(hidden_dim=8, n_layers=1))
    h = embed(np.random.default_rng(1).normal(scale=100, size=(5, 6)), p)
    assert np.all(np.abs(h) <= 1)


def test_propagate_examples():
    out = propagate([(np.array([1.0, -2.0]), 0.5), (np.array([0.2, 3.0]), 1.0)])
    assert out.tolist() == [0.5, 3.0]
    assert propagate([], dim=2).tolist() == [0.0, 0.0]
    assert propagate([(np.array([2.0, -1.0]), 0.0)]).tolist() == [0.0, 0.0]
    with pytest.raises(ValueError):
        propagate([])


def test_aggregate_examples():
    h_self = np.array([0.3, -0.2])
    h_prop = np.array([0.9, 0.1])
    W, b = np.zeros((4, 2)), np.zeros(2)
    assert aggregate(h_self, h_prop, W, b, True).tolist() == h_self.tolist()
    assert aggregate(h_self, h_prop, W, b, False).tolist() == [0.0, 0.0]
    rng = np.random.default_rng(0)
    W, b = rng.normal(size=(4, 2)), rng.normal(size=2)
    assert aggregate(np.zeros(2), np.zeros(2), W, b, True).tolist() == np.tanh(b).tolist()
    with pytest.raises(ValueError):
        aggregate(np.zeros(2), np.zeros(3), W, b)


def test_forward_shapes():
    feats, fg, params, config, _, _ = random_instance(0, n=6, T=5, L=4, d=8)
    res = forward(feats, fg, params, config)
    assert res.hidden.shape == (6, 8)
    assert res.inflow.shape == (6,) and res.outflow.shape == (6,)


def test_forward_all_red_zero_embedding_gives_head_bias():
    g = chain(4)
    T = 3
    green = np.zeros((T, 4))
    feats = window_features(np.random.default_rng(0).uniform(0, 9, (T, 4)), green, static_features(g))
    fg = build_ftstg(g, SignalPlan(green), 0, T)
    config = ModelConfig(hidden_dim=4, n_layers=2, window=T)
    params = init_params(config)
    params["W_emb"][:] = 0.0
    params["b_in"][:] = 0.75
    params["b_out"][:] = -1.25
    res = forward(feats, fg, params, config)
    assert np.all(res.inflow == 0.75) and np.all(res.outflow == -1.25)


def test_forward_matches_reference_loop():
    """Vectorised layer update equals a per-vertex loop over propagate/aggregate."""
    feats, fg, params, config, _, _ = random_instance(3, n=5, T=4, L=2, d=3)
    res = forward(feats, fg, params, config)
    T, L, n = 4, 2, 5
    H = {t: embed(feats[t], params) for t in range(T)}
    for l in range(L):
        new = {}
        for t in range(l + 1, T):
            rows = []
            for i in range(n):
                msgs = [(H[t - 1][j], w) for j, k, w in zip(fg.src, fg.dst, fg.weights[t - 1]) if k == i]
                rows.append(aggregate(H[t][i], propagate(msgs, 3), params[f"W_agg.{l}"], params[f"b_agg.{l}"]))
            new[t] = np.array(rows)
        H = new
    assert np.allclose(res.hidden, H[T - 1], rtol=0, atol=1e-13)


def test_forward_receptive_field():
    """Only the last L+1 frames matter; earlier frames can change freely."""
    feats, fg, params, config, _, _ = random_instance(4, n=6, T=5, L=2, d=4)
    a = forward(feats, fg, params, config)
    feats2 = feats.copy()
    feats2[:2] += 10.0
    b = forward(feats2, fg, params, config)
    assert np.array_equal(a.inflow, b.inflow)


# -- transition and rollout -----------------------------------------------------


def test_transition_examples():
    assert transition_one_step(10, 3, 2) == 11
    assert transition_one_step(5, 0, 0) == 5
    assert transition_one_step(1, 0, 2.5, clamp_nonneg=True) == 0
    assert transition_one_step(1, 0, 2.5, clamp_nonneg=False) == -1.5


def test_discounted_examples():
    assert discounted_accumulate([10.0], [[2.0], [2.0]], 0.5).tolist() == [13.0]
    assert discounted_accumulate([4.0], [[1.5]], 1.0).tolist() == transition_one_step([4.0], [1.5], [0.0]).tolist()
    parts = discounted_partial_sums([10.0], [[2.0], [2.0]], 0.5)
    assert parts[:, 0].tolist() == [12.0, 13.0]


def _rollout_setup(discount=0.9, clamp=True):
    data = chain(3)
    ctx = GraphContext.of(data)
    config = ModelConfig(hidden_dim=4, n_layers=1, window=2, discount=discount, clamp_nonneg=clamp)
    rng = np.random.default_rng(2)
    params = init_params(config)
    params["b_out"][:] = 0.5
    return ctx, config, params, rng.uniform(0, 3, (2, 3)), rng.uniform(0, 60, (6, 3))


def test_rollout_one_step_matches_transition():
    ctx, config, params, hist, green = _rollout_setup(discount=1.0)
    roll = rollout(ctx, hist, green, params, config, 1)
    feats, fg = make_window(ctx, hist, green[:2], config)
    res = forward(feats, fg, params, config)
    assert np.array_equal(roll.volumes[0], transition_one_step(hist[-1], res.inflow, res.outflow))


def test_rollout_accumulator_matches_closed_form():
    ctx, config, params, hist, green = _rollout_setup(discount=0.7, clamp=False)
    roll = rollout(ctx, hist, green, params, config, 5)
    closed = discounted_accumulate(hist[-1], roll.inflow - roll.outflow, 0.7)
    assert np.allclose(roll.accumulated[-1], closed, rtol=1e-12, atol=0)
    assert np.array_equal(roll.volumes, roll.accumulated)


def test_rollout_clamps_fed_back_volumes():
    ctx, config, params, hist, green = _rollout_setup()
    params["b_out"][:] = 100.0
    roll = rollout(ctx, hist, green, params, config, 3)
    assert np.all(roll.volumes == 0) and np.all(roll.accumulated < 0)


def test_rollout_validates_inputs():
    ctx, config, params, hist, green = _rollout_setup()
    with pytest.raises(ValueError):
        rollout(ctx, hist[:1], green, params, config, 1)
    with pytest.raises(ValueError):
        rollout(ctx, hist, green[:3], params, config, 3)


# -- loss and gradients -----------------------------------------------------------


def test_flow_loss_examples():
    assert flow_loss([1.0, 2.0], [0.5, 0.0], [1.0, 2.0], [0.5, 0.0]) == 0.0
    assert flow_loss([2.0], [0.0], [1.0], [0.0]) == 1.0
    assert flow_loss([0.0], [0.0], [1.0], [2.0]) == 5.0
    with pytest.raises(ValueError):
        flow_loss([], [], [], [])


def test_zero_loss_zero_gradients():
    feats, fg, params, config, _, _ = random_instance(1, n=5, T=3, L=2, d=4)
    res = forward(feats, fg, params, config)
    loss, grads, _ = loss_and_grad(feats, fg, params, config, res.inflow, res.outflow)
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_gradient_check_reference_instance():
    assert max_relative_error(*random_instance(0, n=6, T=3, L=2, d=4)) < 1e-4


@pytest.mark.parametrize("kw", [
    {"use_residual": False}, {"volume_scale": 3.0}, {"roadnet_features": False}, {"dynamic_edges": False}
])
def test_gradient_check_variants(kw):
    assert max_relative_error(*random_instance(11, n=5, T=3, L=2, d=3, **kw)) < 1e-4


def test_duplicated_cell_doubles_gradient():
    feats, fg, params, config, true_in, true_out = random_instance(2, n=4, T=3, L=1, d=3)
    res = forward(feats, fg, params, config)
    k = 2
    # batch {k} against {k, k} with the normaliser held at one cell
    gi1, go1 = flow_loss_grad(res.inflow[k:k + 1], res.outflow[k:k + 1], true_in[k:k + 1], true_out[k:k + 1], 1)
    gi2, go2 = flow_loss_grad(res.inflow[[k, k]], res.outflow[[k, k]], true_in[[k, k]], true_out[[k, k]], 1)
    assert gi2.sum() == 2 * gi1.sum() and go2.sum() == 2 * go1.sum()
    one = np.zeros(4)
    one[k] = gi1[0]
    two = np.zeros(4)
    two[k] = gi2.sum()
    g1 = backward(res, params, config, one, np.zeros(4))
    g2 = backward(res, params, config, two, np.zeros(4))
    for name in g1:
        assert np.allclose(g2[name], 2 * g1[name], rtol=1e-14, atol=0)
