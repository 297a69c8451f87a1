"""Dynamic mobility convolution network with hand-written reverse mode.

Layer ``l`` updates every vertex ``(t, i)`` from its own previous-layer state
and a weighted max-pool over the previous-layer states of its in-neighbours
at frame ``t - 1``. One layer therefore moves information one transition
forward in time and one hop downstream. Two linear heads read the final
frame and predict per-movement inflow and outflow; volumes follow from flow
conservation.

Parameters live in a plain ``dict[str, ndarray]`` whose key order is fixed by
:func:`param_names`; gradients use the same keys.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from .ftstg import N_FEATURES, SELF_EDGE_GATED, Ftstg, build_ftstg, window_features
from .roadnet import MovementGraph

Params = dict


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 256
    n_layers: int = 4
    window: int | None = None
    discount: float = 0.9
    clamp_nonneg: bool = True
    use_residual: bool = True
    seed: int = 0
    # volumes are divided by this before embedding and flows multiplied by it
    # after the heads; set from training data so tanh does not saturate
    volume_scale: float = 1.0
    roadnet_features: bool = True
    dynamic_edges: bool = True
    normalize_green: bool = True
    self_edges: str = SELF_EDGE_GATED

    def __post_init__(self):
        if self.window is None:
            object.__setattr__(self, "window", self.n_layers + 1)
        if self.hidden_dim < 1 or self.n_layers < 1:
            raise ValueError("hidden_dim and n_layers must be positive")
        if self.window < self.n_layers + 1:
            raise ValueError(
                f"window {self.window} cannot cover {self.n_layers} layers (need >= {self.n_layers + 1})"
            )
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if not self.volume_scale > 0:
            raise ValueError("volume_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)


def param_names(n_layers: int) -> list[str]:
    names = ["W_emb", "b_emb"]
    for l in range(n_layers):
        names += [f"W_agg.{l}", f"b_agg.{l}"]
    return names + ["W_in", "b_in", "W_out", "b_out"]


def param_shapes(config: ModelConfig, n_features: int = N_FEATURES) -> dict[str, tuple[int, ...]]:
    d = config.hidden_dim
    shapes = {"W_emb": (n_features, d), "b_emb": (d,)}
    for l in range(config.n_layers):
        shapes[f"W_agg.{l}"] = (2 * d, d)
        shapes[f"b_agg.{l}"] = (d,)
    shapes.update({"W_in": (d, 1), "b_in": (1,), "W_out": (d, 1), "b_out": (1,)})
    return shapes


def param_count_formula(n_features: int, d: int, n_layers: int) -> int:
    return (n_features + 1) * d + n_layers * (2 * d + 1) * d + 2 * (d + 1)


def param_count(params: Params) -> int:
    return int(sum(v.size for v in params.values()))


def init_params(config: ModelConfig, n_features: int = N_FEATURES) -> Params:
    """Glorot-uniform weights, zero biases, deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config, n_features).items():
        if name.startswith("W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def check_params(params: Params, config: ModelConfig, n_features: int = N_FEATURES) -> None:
    expected = param_shapes(config, n_features)
    if list(params) != list(expected):
        raise ValueError(f"parameter names {list(params)} do not match {list(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape} does not match config {shape}")


# -- building blocks ----------------------------------------------------------


def embed(features: np.ndarray, params: Params) -> np.ndarray:
    W, b = params["W_emb"], params["b_emb"]
    if features.shape[-1] != W.shape[0]:
        raise ValueError(f"features have {features.shape[-1]} columns, embedding expects {W.shape[0]}")
    return np.tanh(features @ W + b)


def propagate(messages, dim: int | None = None) -> np.ndarray:
    """Element-wise max of ``w * h`` over ``(h, w)`` pairs.

    An empty set (a vertex with no in-edges) yields the zero vector of length
    ``dim``.
    """
    messages = list(messages)
    if not messages:
        if dim is None:
            raise ValueError("an empty message set needs an explicit dim")
        return np.zeros(dim)
    return np.max(np.stack([w * np.asarray(h, dtype=float) for h, w in messages]), axis=0)


def aggregate(h_self, h_prop, W_agg, bias, use_residual: bool = True) -> np.ndarray:
    h_self = np.asarray(h_self, dtype=float)
    h_prop = np.asarray(h_prop, dtype=float)
    if h_self.shape != h_prop.shape or W_agg.shape[0] != 2 * h_self.shape[-1]:
        raise ValueError("aggregate: shape mismatch")
    out = np.tanh(np.concatenate([h_self, h_prop], axis=-1) @ W_agg + bias)
    return out + h_self if use_residual else out


def transition_one_step(x, inflow, outflow, clamp_nonneg: bool = True) -> np.ndarray:
    nxt = np.asarray(x, dtype=float) + np.asarray(inflow, dtype=float) - np.asarray(outflow, dtype=float)
    return np.maximum(nxt, 0.0) if clamp_nonneg else nxt


def prepare_features(features: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Apply volume scaling and the roadnet-feature ablation."""
    x = np.array(features, dtype=float)
    x[..., 0] /= config.volume_scale
    if not config.roadnet_features:
        x[..., 1:] = 0.0
    return x


# -- forward / backward -------------------------------------------------------


@dataclass
class ForwardResult:
    hidden: np.ndarray  # final-layer states at the last frame, (N, d)
    inflow: np.ndarray  # (N,)
    outflow: np.ndarray  # (N,)
    cache: dict


def forward(features: np.ndarray, fg: Ftstg, params: Params, config: ModelConfig) -> ForwardResult:
    """Run the network on one window and predict flows for its last frame.

    ``features`` has shape ``(T, N, F)``. Only the vertices inside the
    backward cone of the last frame are evaluated: layer ``l`` needs frames
    ``T-1-(L-l) .. T-1``.
    """
    T, L = fg.n_layers, config.n_layers
    if features.shape[:2] != (T, fg.n_nodes):
        raise ValueError(f"features shape {features.shape} does not match graph ({T}, {fg.n_nodes})")
    if T < L + 1:
        raise ValueError(f"window of {T} frames is too short for {L} layers")

    x = prepare_features(features, config)
    first = T - 1 - L
    src, seg = fg.src, fg.seg_start

    H = [dict() for _ in range(L + 1)]
    for t in range(first, T):
        H[0][t] = embed(x[t], params)
    layers = []
    for l in range(1, L + 1):
        W, b = params[f"W_agg.{l - 1}"], params[f"b_agg.{l - 1}"]
        per_t = {}
        for t in range(first + l, T):
            w = fg.weights[t - 1]
            msg = w[:, None] * H[l - 1][t - 1][src]
            pooled = np.maximum.reduceat(msg, seg, axis=0)
            cat = np.concatenate([H[l - 1][t], pooled], axis=1)
            act = np.tanh(cat @ W + b)
            H[l][t] = act + H[l - 1][t] if config.use_residual else act
            per_t[t] = (msg, pooled, cat, act)
        layers.append(per_t)

    h = H[L][T - 1]
    s = config.volume_scale
    inflow = s * (h @ params["W_in"] + params["b_in"])[:, 0]
    outflow = s * (h @ params["W_out"] + params["b_out"])[:, 0]
    cache = {"x": x, "H": H, "layers": layers, "fg": fg, "first": first}
    return ForwardResult(h, inflow, outflow, cache)


def _argmax_edges(msg: np.ndarray, pooled: np.ndarray, fg: Ftstg) -> np.ndarray:
    """Edge index of the winning message per (node, channel); ties -> lowest source id."""
    E = msg.shape[0]
    hit = msg == pooled[fg.dst]
    idx = np.where(hit, np.arange(E)[:, None], E)
    return np.minimum.reduceat(idx, fg.seg_start, axis=0)


def backward(result: ForwardResult, params: Params, config: ModelConfig, grad_in, grad_out) -> Params:
    """Gradients of a scalar loss given its gradients w.r.t. the two heads."""
    c = result.cache
    fg: Ftstg = c["fg"]
    H, layers, first = c["H"], c["layers"], c["first"]
    T, L = fg.n_layers, config.n_layers
    n, d = result.hidden.shape
    s = config.volume_scale
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    gi = s * np.asarray(grad_in, dtype=float)[:, None]
    go = s * np.asarray(grad_out, dtype=float)[:, None]
    h = result.hidden
    grads["W_in"] = h.T @ gi
    grads["b_in"] = gi.sum(axis=0)
    grads["W_out"] = h.T @ go
    grads["b_out"] = go.sum(axis=0)

    dH = [dict() for _ in range(L + 1)]
    dH[L][T - 1] = gi @ params["W_in"].T + go @ params["W_out"].T

    cols = np.arange(d)[None, :]
    for l in range(L, 0, -1):
        W = params[f"W_agg.{l - 1}"]
        gW = grads[f"W_agg.{l - 1}"]
        gb = grads[f"b_agg.{l - 1}"]
        for t in range(T - 1, first + l - 1, -1):
            g_out = dH[l].get(t)
            if g_out is None:
                continue
            msg, pooled, cat, act = layers[l - 1][t]
            dz = g_out * (1.0 - act * act)
            gW += cat.T @ dz
            gb += dz.sum(axis=0)
            dcat = dz @ W.T
            d_self = dcat[:, :d]
            if config.use_residual:
                d_self = d_self + g_out
            dH[l - 1][t] = dH[l - 1].get(t, 0.0) + d_self

            d_pool = dcat[:, d:]
            arg = _argmax_edges(msg, pooled, fg)
            w = fg.weights[t - 1]
            flat = (fg.src[arg] * d + cols).ravel()
            contrib = np.bincount(flat, weights=(w[arg] * d_pool).ravel(), minlength=n * d)
            dH[l - 1][t - 1] = dH[l - 1].get(t - 1, 0.0) + contrib.reshape(n, d)

    x = c["x"]
    for t, g0 in dH[0].items():
        dz = g0 * (1.0 - H[0][t] ** 2)
        grads["W_emb"] += x[t].T @ dz
        grads["b_emb"] += dz.sum(axis=0)
    return grads


def flow_loss(pred_in, pred_out, true_in, true_out) -> float:
    """MSE of inflow plus MSE of outflow over the batch of cells."""
    pred_in, pred_out = np.asarray(pred_in, float), np.asarray(pred_out, float)
    true_in, true_out = np.asarray(true_in, float), np.asarray(true_out, float)
    if pred_in.size == 0:
        raise ValueError("flow loss over an empty batch")
    if not (pred_in.shape == pred_out.shape == true_in.shape == true_out.shape):
        raise ValueError("flow loss: shape mismatch")
    return float(np.mean((true_in - pred_in) ** 2) + np.mean((true_out - pred_out) ** 2))


def flow_loss_grad(pred_in, pred_out, true_in, true_out, n_cells: int | None = None):
    """Gradient of :func:`flow_loss` w.r.t. the predictions.

    ``n_cells`` overrides the normaliser, e.g. to keep it fixed while cells
    are duplicated.
    """
    n = n_cells or np.size(pred_in)
    return (
        2.0 * (np.asarray(pred_in, float) - true_in) / n,
        2.0 * (np.asarray(pred_out, float) - true_out) / n,
    )


def loss_and_grad(features, fg, params, config, true_in, true_out):
    res = forward(features, fg, params, config)
    loss = flow_loss(res.inflow, res.outflow, true_in, true_out)
    if not np.isfinite(loss):
        # max-pool routing is undefined on NaN; let the caller report divergence
        return loss, {k: np.full_like(v, np.nan) for k, v in params.items()}, res
    gi, go = flow_loss_grad(res.inflow, res.outflow, true_in, true_out)
    return loss, backward(res, params, config, gi, go), res


# -- windows and rollout ------------------------------------------------------


@dataclass(frozen=True)
class GraphContext:
    """Per-graph constants reused by every window."""

    graph: MovementGraph
    static: np.ndarray
    structure: tuple[np.ndarray, np.ndarray]

    @classmethod
    def of(cls, g: MovementGraph) -> "GraphContext":
        from .ftstg import edge_structure, static_features

        return cls(g, static_features(g), edge_structure(g))


def make_window(ctx: GraphContext, volumes: np.ndarray, green: np.ndarray, config: ModelConfig, t0: int = 0):
    """Features and graph for a window of ``(T, N)`` volumes and green seconds."""
    feats = window_features(volumes, green, ctx.static)
    fg = build_ftstg(
        ctx.graph,
        green,
        t0,
        volumes.shape[0],
        normalize=config.normalize_green,
        self_edges=config.self_edges,
        dynamic=config.dynamic_edges,
        structure=ctx.structure,
    )
    return feats, fg


def discounted_accumulate(x, deltas, discount: float) -> np.ndarray:
    """``x + sum_q discount**q * deltas[q]`` in closed form."""
    deltas = np.asarray(deltas, dtype=float)
    weights = discount ** np.arange(deltas.shape[0], dtype=float)
    return np.asarray(x, dtype=float) + np.tensordot(weights, deltas, axes=1)


def discounted_partial_sums(x, deltas, discount: float) -> np.ndarray:
    """Running values of :func:`discounted_accumulate` after each step, shape ``(Q, N)``."""
    acc = np.array(x, dtype=float)
    scale = 1.0
    out = []
    for delta in np.asarray(deltas, dtype=float):
        acc = acc + scale * delta
        scale *= discount
        out.append(acc.copy())
    return np.array(out)


@dataclass
class Rollout:
    volumes: np.ndarray  # (Q, N) predicted X_{t+1..t+Q}, clamped if configured
    inflow: np.ndarray  # (Q, N)
    outflow: np.ndarray  # (Q, N)
    accumulated: np.ndarray  # (Q, N) unclamped discounted partial sums


def rollout(
    ctx: GraphContext,
    history: np.ndarray,
    green: np.ndarray,
    params: Params,
    config: ModelConfig,
    horizon: int,
) -> Rollout:
    """Predict ``horizon`` minutes ahead from the last ``T`` observed minutes.

    ``history`` holds true volumes for minutes ``t-T+1 .. t``; ``green`` holds
    the preset green seconds for minutes ``t-T+1 .. t+horizon-1``. Predicted
    volumes replace the true ones in later windows.
    """
    T = config.window
    if history.shape[0] != T:
        raise ValueError(f"history must hold exactly {T} minutes")
    if green.shape[0] < T + horizon - 1:
        raise ValueError(f"need green times for {T + horizon - 1} minutes, got {green.shape[0]}")
    vols = np.concatenate([history, np.zeros((horizon, history.shape[1]))]).astype(float)
    acc = history[-1].astype(float)
    scale = 1.0
    out_v, out_i, out_o, out_acc = [], [], [], []
    for q in range(horizon):
        feats, fg = make_window(ctx, vols[q : q + T], green[q : q + T], config)
        res = forward(feats, fg, params, config)
        # same operation order as transition_one_step so lambda=1, Q=1 matches it bit for bit
        acc = acc + scale * res.inflow - scale * res.outflow
        scale *= config.discount
        nxt = np.maximum(acc, 0.0) if config.clamp_nonneg else acc.copy()
        vols[T + q] = nxt
        out_v.append(nxt)
        out_i.append(res.inflow)
        out_o.append(res.outflow)
        out_acc.append(acc.copy())
    return Rollout(np.array(out_v), np.array(out_i), np.array(out_o), np.array(out_acc))
