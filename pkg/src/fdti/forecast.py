"""Multi-horizon forecasts over a range of origins, for FDTI and baselines.

A forecast is ``{horizon: array (n_origins, N)}`` where row ``k`` predicts
the volumes at minute ``origins[k] + horizon``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import LinearModel, baseline_ha, baseline_linreg, baseline_persistence, neighbor_average
from .ftstg import static_features
from .model import GraphContext, ModelConfig, Params, rollout
from .simulator import Dataset
from .training import Split, WindowSource

PREDICTIONS_HEADER = ("t_min", "node_id", "horizon", "volume")


@dataclass
class Forecast:
    origins: list[int]
    horizons: list[int]
    values: dict[int, np.ndarray]


def truth(data: Dataset, origins: Sequence[int], horizons: Sequence[int]) -> dict[int, np.ndarray]:
    return {q: np.array([data.volumes[t + q - data.t0] for t in origins]) for q in horizons}


def fdti_forecast(
    data: Dataset, params: Params, config: ModelConfig, origins: Sequence[int], horizons: Sequence[int]
) -> Forecast:
    source = WindowSource(data, config)
    ctx = GraphContext.of(data.graph)
    qmax = max(horizons)
    T = config.window
    values = {q: [] for q in horizons}
    for t in origins:
        green = source.green(t - T + 1, t + qmax)
        roll = rollout(ctx, source.history(t), green, params, config, qmax)
        for q in horizons:
            values[q].append(roll.volumes[q - 1])
    return Forecast(list(origins), list(horizons), {q: np.array(v) for q, v in values.items()})


def ha_forecast(data: Dataset, split: Split, origins, horizons) -> Forecast:
    a, b = split.train
    mean = baseline_ha(data.volumes[a - data.t0 : b - data.t0])
    return Forecast(list(origins), list(horizons), {q: np.tile(mean, (len(origins), 1)) for q in horizons})


def persistence_forecast(data: Dataset, origins, horizons) -> Forecast:
    vals = {q: np.array([baseline_persistence(data.volumes[t - data.t0], q) for t in origins]) for q in horizons}
    return Forecast(list(origins), list(horizons), vals)


def neighbor_average_forecast(data: Dataset, origins, horizons) -> Forecast:
    """Smooth reference predictor: neighbourhood mean of the current volumes."""
    vals = {
        q: np.array([neighbor_average(data.volumes[t - data.t0], data.graph) for t in origins])
        for q in horizons
    }
    return Forecast(list(origins), list(horizons), vals)


def _lr_design(x, green, static) -> np.ndarray:
    """Per-node rows ``[x, p/60, length, one-hot]`` matching the model features."""
    return np.column_stack([x, green / 60.0, static])


def fit_linreg(data: Dataset, split: Split) -> LinearModel:
    static = static_features(data.graph)
    green = data.signal.window(*data.t_range)
    a, b = split.train
    rows, ys = [], []
    for t in range(a, b - 1):
        k = t - data.t0
        rows.append(_lr_design(data.volumes[k], green[k], static))
        ys.append(data.volumes[k + 1])
    return baseline_linreg(np.concatenate(rows), np.concatenate(ys))


def linreg_forecast(data: Dataset, split: Split, origins, horizons, model: LinearModel | None = None) -> Forecast:
    """Autoregressive one-step linear model with the preset future green times."""
    model = model or fit_linreg(data, split)
    static = static_features(data.graph)
    green = data.signal.window(*data.t_range)
    qmax = max(horizons)
    values = {q: [] for q in horizons}
    for t in origins:
        x = data.volumes[t - data.t0]
        for q in range(1, qmax + 1):
            x = model.predict(_lr_design(x, green[t + q - 1 - data.t0], static))
            if q in values:
                values[q].append(x)
    return Forecast(list(origins), list(horizons), {q: np.array(v) for q, v in values.items()})


# -- prediction files ---------------------------------------------------------


def predictions_csv(fc: Forecast) -> str:
    buf = io.StringIO()
    buf.write(",".join(PREDICTIONS_HEADER) + "\n")
    for k, t in enumerate(fc.origins):
        n = fc.values[fc.horizons[0]].shape[1]
        for i in range(n):
            for q in sorted(fc.horizons):
                buf.write(f"{t},{i},{q},{fc.values[q][k, i]:.17g}\n")
    return buf.getvalue()


def write_predictions(fc: Forecast, path) -> None:
    Path(path).write_text(predictions_csv(fc))


def read_predictions(path) -> Forecast:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != PREDICTIONS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(PREDICTIONS_HEADER)}")
        rows = [(int(r[0]), int(r[1]), int(r[2]), float(r[3])) for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no predictions")
    origins = sorted({r[0] for r in rows})
    horizons = sorted({r[2] for r in rows})
    n = max(r[1] for r in rows) + 1
    pos = {t: k for k, t in enumerate(origins)}
    values = {q: np.full((len(origins), n), np.nan) for q in horizons}
    for t, i, q, v in rows:
        values[q][pos[t], i] = v
    if any(np.isnan(v).any() for v in values.values()):
        raise ValueError(f"{path}: incomplete prediction grid")
    return Forecast(origins, horizons, values)
