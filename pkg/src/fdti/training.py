"""Chronological splits, Adam, the epoch loop and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import (
    GraphContext,
    ModelConfig,
    Params,
    check_params,
    init_params,
    forward,
    loss_and_grad,
    make_window,
    param_shapes,
    transition_one_step,
)
from .simulator import Dataset

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fdti-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Split:
    """Half-open absolute minute ranges."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def ranges(self) -> dict[str, tuple[int, int]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def chronological_split(n_minutes: int, warmup_min: int, ratios=(0.6, 0.2, 0.2), t0: int = 0) -> Split:
    """Drop warm-up, then cut train/val/test in order; test takes the remainder."""
    m = n_minutes - warmup_min
    n_train = math.floor(ratios[0] * m)
    n_val = math.floor(ratios[1] * m)
    n_test = m - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(
            f"{n_minutes} minutes with {warmup_min} warm-up leave an empty split "
            f"({n_train}/{n_val}/{n_test})"
        )
    a = t0 + warmup_min
    return Split((a, a + n_train), (a + n_train, a + n_train + n_val), (a + n_train + n_val, a + m))


def sample_origins(span: tuple[int, int], window: int, horizon: int = 1) -> list[int]:
    """Origins ``t`` whose input minutes ``t-window+1..t`` and targets up to ``t+horizon`` lie in ``span``."""
    lo, hi = span
    return list(range(lo + window - 1, hi - horizon))


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Params, lr: float = 5e-4) -> "AdamState":
        return cls(
            lr=lr,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: Params, grads: Params, state: AdamState) -> tuple[Params, AdamState]:
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1**t)
        v_hat = v[k] / (1 - b2**t)
        new_params[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(state.lr, b1, b2, state.eps, t, m, v)


# -- training loop ------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    epochs: int = 500
    patience: int = 20
    seed: int = 0
    shuffle: bool = True
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        kw = dict(raw)
        if "ratios" in kw:
            kw["ratios"] = tuple(kw["ratios"])
        return cls(**kw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ratios"] = list(self.ratios)
        return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    best_val_rmse: float


@dataclass
class TrainResult:
    params: Params
    config: ModelConfig
    history: list[EpochRecord]
    split: Split
    best_epoch: int


class WindowSource:
    """Slices a dataset into model windows for a fixed graph and config."""

    def __init__(self, data: Dataset, config: ModelConfig):
        self.data = data
        self.config = config
        self.ctx = GraphContext.of(data.graph)
        self._green = data.signal.window(*data.t_range)

    def _rows(self, a: int, b: int) -> slice:
        return slice(a - self.data.t0, b - self.data.t0)

    def window(self, t: int):
        """Features and graph for the window ending at minute ``t``."""
        T = self.config.window
        rows = self._rows(t - T + 1, t + 1)
        return make_window(self.ctx, self.data.volumes[rows], self._green[rows], self.config, t - T + 1)

    def flows(self, t: int):
        k = t - self.data.t0
        return self.data.inflow[k], self.data.outflow[k]

    def volume(self, t: int) -> np.ndarray:
        return self.data.volumes[t - self.data.t0]

    def green(self, a: int, b: int) -> np.ndarray:
        return self._green[self._rows(a, b)]

    def history(self, t: int) -> np.ndarray:
        return self.data.volumes[self._rows(t - self.config.window + 1, t + 1)]


def one_step_rmse(source: WindowSource, params: Params, origins) -> float:
    sq, n = 0.0, 0
    for t in origins:
        feats, fg = source.window(t)
        res = forward(feats, fg, params, source.config)
        pred = transition_one_step(source.volume(t), res.inflow, res.outflow, source.config.clamp_nonneg)
        sq += float(np.sum((pred - source.volume(t + 1)) ** 2))
        n += pred.size
    return math.sqrt(sq / n)


def volume_scale_for(data: Dataset, span: tuple[int, int]) -> float:
    vals = data.volumes[span[0] - data.t0 : span[1] - data.t0]
    return max(1.0, float(np.std(vals)))


def train(
    data: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig = TrainConfig(),
    split: Split | None = None,
    params: Params | None = None,
) -> TrainResult:
    """Fit on training windows with one Adam step per window.

    Validation one-step volume RMSE after each epoch selects the returned
    parameters; training stops after ``patience`` epochs without improvement.
    """
    split = split or chronological_split(data.n_minutes, data.warmup_min, train_config.ratios, data.t0)
    source = WindowSource(data, model_config)
    T = model_config.window
    train_t = sample_origins(split.train, T)
    val_t = sample_origins(split.val, T)
    if not train_t or not val_t:
        raise ValueError(f"window of {T} minutes does not fit into the train/val splits {split}")

    params = params if params is not None else init_params(model_config)
    check_params(params, model_config)
    opt = AdamState.for_params(params, train_config.lr)
    rng = np.random.default_rng(train_config.seed)
    windows = {t: source.window(t) for t in train_t}

    history: list[EpochRecord] = []
    best_rmse, best_params, best_epoch, stale = math.inf, params, 0, 0
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(train_t) if train_config.shuffle else np.array(train_t)
        total = 0.0
        for t in order:
            feats, fg = windows[int(t)]
            iota, out = source.flows(int(t))
            loss, grads, _ = loss_and_grad(feats, fg, params, model_config, iota, out)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, window ending at minute {t}")
            params, opt = adam_step(params, grads, opt)
            total += loss
        val = one_step_rmse(source, params, val_t)
        if not math.isfinite(val):
            raise TrainingDiverged(f"validation RMSE became {val} at epoch {epoch}")
        if val < best_rmse:
            best_rmse, best_params, best_epoch, stale = val, params, epoch, 0
        else:
            stale += 1
        history.append(EpochRecord(epoch, total / len(train_t), val, best_rmse))
        log.debug("epoch %d loss %.6g val %.6g", epoch, total / len(train_t), val)
        if stale >= train_config.patience:
            break
    return TrainResult(best_params, model_config, history, split, best_epoch)


# -- checkpoints --------------------------------------------------------------


def _num(v: float) -> str:
    if not math.isfinite(v):
        raise CheckpointError("cannot checkpoint non-finite parameters")
    return f"{v:.17g}"


def save_checkpoint(params: Params, config: ModelConfig, path, extra: Mapping | None = None) -> None:
    check_params(params, config)
    head = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "extra": dict(extra or {}),
    }
    parts = [json.dumps(head, sort_keys=True)[:-1], ', "params": {']
    entries = []
    for name, arr in params.items():
        data = ", ".join(_num(v) for v in arr.ravel().tolist())
        entries.append(f'\n  "{name}": {{"shape": {json.dumps(list(arr.shape))}, "data": [{data}]}}')
    parts.append(",".join(entries))
    parts.append("\n}}\n")
    Path(path).write_text("".join(parts))


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[Params, ModelConfig, dict]:
    """Read a checkpoint; with ``expected`` the stored shapes must fit that config."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict(doc["config"])
    params = {}
    for name, entry in doc["params"].items():
        arr = np.array(entry["data"], dtype=float)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: {name} holds {arr.size} values for shape {shape}")
        params[name] = arr.reshape(shape)
    target = expected or config
    want = param_shapes(target)
    for name, shape in want.items():
        if name not in params or params[name].shape != shape:
            got = params[name].shape if name in params else None
            raise CheckpointError(f"{path}: {name} has shape {got}, config expects {shape}")
    if list(params) != list(want):
        raise CheckpointError(f"{path}: parameter set does not match config")
    return params, config, doc.get("extra", {})
