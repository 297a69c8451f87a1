"""Command-line entry point: ``fdti <subcommand> ...``.

Exit codes: 0 success, 2 usage, 3 validation, 4 training divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .evaluation import MetricsReport, evaluate, smoothness_csv, stmad
from .forecast import (
    Forecast,
    fdti_forecast,
    ha_forecast,
    linreg_forecast,
    neighbor_average_forecast,
    persistence_forecast,
    read_predictions,
    truth,
    write_predictions,
)
from .model import ModelConfig, param_count
from .roadnet import parse_roadnet
from .simulator import VOLUMES_HEADER, SimConfig, export_dataset, import_dataset, read_node_table, run
from .training import (
    TrainConfig,
    TrainingDiverged,
    chronological_split,
    load_checkpoint,
    sample_origins,
    save_checkpoint,
    train,
    volume_scale_for,
)

log = logging.getLogger("fdti")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DIVERGED = 0, 2, 3, 4

# training-config keys -> ModelConfig fields
_MODEL_KEYS = {
    "hidden_dim": "hidden_dim",
    "layers": "n_layers",
    "window": "window",
    "lambda": "discount",
    "clamp": "clamp_nonneg",
    "residual": "use_residual",
    "roadnet_features": "roadnet_features",
    "dynamic_edges": "dynamic_edges",
    "normalize_green": "normalize_green",
    "self_edges": "self_edges",
}
_TRAIN_KEYS = {"lr", "epochs", "patience", "shuffle", "ratios"}


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seeds: dict
    inputs: dict
    tool_version: str = __version__
    wall_clock_s: float = 0.0
    parameter_count: int | None = None
    outputs: list[str] = field(default_factory=list)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def digest(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(f for f in p.rglob("*") if f.is_file() and f.name != "manifest.json") if p.is_dir() else [p]
    for f in files:
        h.update(f.read_bytes())
    return h.hexdigest()


def _read_yaml(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    doc = yaml.safe_load(p.read_text()) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a key-value mapping")
    return doc


def split_train_config(raw: dict) -> tuple[dict, TrainConfig]:
    """Map a flat training config to ``(ModelConfig kwargs, TrainConfig)``."""
    unknown = set(raw) - set(_MODEL_KEYS) - _TRAIN_KEYS - {"seed"}
    if unknown:
        raise ValueError(f"unknown training config keys: {sorted(unknown)}")
    model_kw = {_MODEL_KEYS[k]: v for k, v in raw.items() if k in _MODEL_KEYS}
    train_kw = {k: v for k, v in raw.items() if k in _TRAIN_KEYS}
    if "seed" in raw:
        model_kw["seed"] = raw["seed"]
        train_kw["seed"] = raw["seed"]
    return model_kw, TrainConfig.from_dict(train_kw)


def _ablation_overrides(args) -> dict:
    out = {}
    if getattr(args, "discount", None) is not None:
        out["discount"] = args.discount
    if getattr(args, "no_roadnet_features", False):
        out["roadnet_features"] = False
    if getattr(args, "no_dynamic_edges", False):
        out["dynamic_edges"] = False
    if getattr(args, "no_clamp", False):
        out["clamp_nonneg"] = False
    return out


def _horizons(text: str) -> list[int]:
    try:
        hs = sorted({int(h) for h in text.split(",") if h.strip()})
    except ValueError as exc:
        raise UsageError(f"bad horizon list {text!r}") from exc
    if not hs or hs[0] < 1:
        raise UsageError("horizons must be positive integers")
    return hs


def _origins(data, config: ModelConfig, split_name: str, qmax: int, ratios=(0.6, 0.2, 0.2)) -> list[int]:
    if split_name == "all":
        span = (data.t0 + data.warmup_min, data.t_range[1])
    else:
        span = chronological_split(data.n_minutes, data.warmup_min, ratios, data.t0).ranges()[split_name]
    origins = sample_origins(span, config.window, qmax)
    if not origins:
        raise ValueError(f"no forecast origin fits in the {split_name} split for window {config.window}, horizon {qmax}")
    return origins


# -- subcommands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    start = time.perf_counter()
    raw = _read_yaml(args.config)
    config = SimConfig.from_dict(raw)
    data = run(config)
    out = Path(args.out)
    manifest = RunManifest(
        command="simulate",
        argv=list(args.argv),
        config=config.to_dict(),
        seeds={"simulator": config.seed},
        inputs={str(args.config): digest(args.config)},
    )
    paths = export_dataset(data, out, {"simulator": config.to_dict()})
    meta = json.loads(paths["manifest"].read_text())
    manifest.outputs = sorted(str(p.name) for p in paths.values())
    manifest.wall_clock_s = time.perf_counter() - start
    meta["run"] = asdict(manifest)
    paths["manifest"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {data.n_minutes} minutes x {data.graph.n} movements to {out}")
    return EXIT_OK


def _train(data, model_kw: dict, tconf: TrainConfig):
    split = chronological_split(data.n_minutes, data.warmup_min, tconf.ratios, data.t0)
    model_kw = dict(model_kw)
    model_kw.setdefault("volume_scale", volume_scale_for(data, split.train))
    mconf = ModelConfig(**model_kw)
    return train(data, mconf, tconf, split)


def _write_history(history, path) -> None:
    lines = ["epoch,train_loss,val_rmse,best_val_rmse"]
    lines += [f"{h.epoch},{h.train_loss:.17g},{h.val_rmse:.17g},{h.best_val_rmse:.17g}" for h in history]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    from .report import plot_training_history

    start = time.perf_counter()
    raw = _read_yaml(args.config)
    model_kw, tconf = split_train_config(raw)
    model_kw.update(_ablation_overrides(args))
    data = import_dataset(args.data)
    result = _train(data, model_kw, tconf)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, result.config, out, {"best_epoch": result.best_epoch})
    hist = out.with_suffix(".history.csv")
    _write_history(result.history, hist)
    fig = plot_training_history(result.history, out.with_suffix(".history.png"))
    RunManifest(
        command="train",
        argv=list(args.argv),
        config={"model": result.config.to_dict(), "train": tconf.to_dict(), "file": raw},
        seeds={"model": result.config.seed, "train": tconf.seed},
        inputs={str(args.config): digest(args.config), str(args.data): digest(args.data)},
        wall_clock_s=time.perf_counter() - start,
        parameter_count=param_count(result.params),
        outputs=[out.name, hist.name, fig.name],
    ).write(out.with_suffix(".manifest.json"))
    best = result.history[result.best_epoch - 1]
    print(f"trained {len(result.history)} epochs, best val RMSE {best.val_rmse:.4f} at epoch {result.best_epoch}")
    return EXIT_OK


def _forecast(model: str, data, params, config: ModelConfig, origins, horizons, ratios=(0.6, 0.2, 0.2)) -> Forecast:
    split = chronological_split(data.n_minutes, data.warmup_min, ratios, data.t0)
    if model == "fdti":
        return fdti_forecast(data, params, config, origins, horizons)
    if model == "ha":
        return ha_forecast(data, split, origins, horizons)
    if model == "persistence":
        return persistence_forecast(data, origins, horizons)
    if model == "linreg":
        return linreg_forecast(data, split, origins, horizons)
    if model == "neighbor-avg":
        return neighbor_average_forecast(data, origins, horizons)
    raise UsageError(f"unknown model {model!r}")


def cmd_predict(args) -> int:
    start = time.perf_counter()
    horizons = _horizons(args.horizons)
    data = import_dataset(args.data)
    params, config = None, None
    if args.model == "fdti":
        if not args.ckpt:
            raise UsageError("predict --model fdti requires --ckpt")
        if not Path(args.ckpt).is_file():
            raise ValueError(f"checkpoint not found: {args.ckpt}")
        params, config, _ = load_checkpoint(args.ckpt)
        config = replace(config, **_ablation_overrides(args))
    else:
        config = ModelConfig(hidden_dim=1, n_layers=1, window=args.window or 2)
    origins = _origins(data, config, args.split, max(horizons))
    fc = _forecast(args.model, data, params, config, origins, horizons)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(fc, out)
    inputs = {str(args.data): digest(args.data)}
    if args.ckpt:
        inputs[str(args.ckpt)] = digest(args.ckpt)
    RunManifest(
        command="predict",
        argv=list(args.argv),
        config={"model": args.model, "model_config": config.to_dict(), "split": args.split, "horizons": horizons},
        seeds={"model": config.seed},
        inputs=inputs,
        wall_clock_s=time.perf_counter() - start,
        parameter_count=param_count(params) if params else None,
        outputs=[out.name],
    ).write(out.with_suffix(".manifest.json"))
    print(f"wrote {len(origins)} origins x {len(horizons)} horizons to {out}")
    return EXIT_OK


def _truth_from_volumes(path, fc: Forecast) -> dict[int, np.ndarray]:
    n = fc.values[fc.horizons[0]].shape[1]
    t0, vol = read_node_table(path, VOLUMES_HEADER, n)
    vol = vol[..., 0]
    out = {}
    for q in fc.horizons:
        rows = [t + q - t0 for t in fc.origins]
        if min(rows) < 0 or max(rows) >= vol.shape[0]:
            raise ValueError(f"truth file does not cover horizon {q} for every origin")
        out[q] = vol[rows]
    return out


def cmd_evaluate(args) -> int:
    from .report import plot_horizon_metrics

    start = time.perf_counter()
    horizons = _horizons(args.horizons)
    fc = read_predictions(args.pred)
    missing = set(horizons) - set(fc.horizons)
    if missing:
        raise ValueError(f"predictions lack horizons {sorted(missing)}")
    report = evaluate(fc.values, _truth_from_volumes(args.truth, fc), horizons)
    print(report.summary())
    out = Path(args.out) if args.out else Path(args.pred).with_suffix("")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv(args.label))
    (out / "metrics.txt").write_text(report.summary() + "\n")
    plot_horizon_metrics({args.label or "model": report}, out / "metrics.png")
    RunManifest(
        command="evaluate",
        argv=list(args.argv),
        config={"horizons": horizons},
        seeds={},
        inputs={str(args.pred): digest(args.pred), str(args.truth): digest(args.truth)},
        wall_clock_s=time.perf_counter() - start,
        outputs=["metrics.csv", "metrics.txt", "metrics.png"],
    ).write(out / "manifest.json")
    return EXIT_OK


def _series_from_file(path, n: int, horizon: int) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip()
    if header == ",".join(VOLUMES_HEADER):
        _, vol = read_node_table(path, VOLUMES_HEADER, n)
        return vol[..., 0]
    fc = read_predictions(path)
    if horizon not in fc.values:
        raise ValueError(f"{path} has no horizon {horizon}")
    if fc.origins != list(range(fc.origins[0], fc.origins[0] + len(fc.origins))):
        raise ValueError(f"{path}: origins are not consecutive minutes")
    return fc.values[horizon]


def cmd_stmad(args) -> int:
    from .report import plot_stmad

    start = time.perf_counter()
    g = parse_roadnet(Path(args.graph).read_text())
    ks = _horizons(args.k)
    series = _series_from_file(args.data, g.n, args.horizon)
    if args.skip:
        series = series[args.skip :]
    entries = [stmad(series, g, k, args.window, directed=args.directed) for k in ks]
    name = Path(args.data).stem
    text = smoothness_csv({name: entries})
    print(text, end="")
    out = Path(args.out) if args.out else Path(args.data).with_suffix("")
    out.mkdir(parents=True, exist_ok=True)
    (out / "stmad.csv").write_text(text)
    plot_stmad({name: entries}, out / "stmad.png")
    RunManifest(
        command="stmad",
        argv=list(args.argv),
        config={"k": ks, "window": args.window, "directed": args.directed, "skip": args.skip},
        seeds={},
        inputs={str(args.data): digest(args.data), str(args.graph): digest(args.graph)},
        wall_clock_s=time.perf_counter() - start,
        outputs=["stmad.csv", "stmad.png"],
    ).write(out / "manifest.json")
    return EXIT_OK


def cmd_ftstg_dump(args) -> int:
    from .ftstg import build_ftstg

    data = import_dataset(args.data)
    t0, T = args.window
    fg = build_ftstg(
        data.graph, data.signal, t0, T,
        normalize=not args.raw_green, dynamic=not args.no_dynamic_edges, self_edges=args.self_edges,
    )
    text = fg.dump()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- end-to-end pipeline --------------------------------------------------------

BASELINES = ("ha", "persistence", "linreg")


@dataclass
class PipelineResult:
    metrics: dict[str, MetricsReport]
    one_step: dict[str, MetricsReport]
    discount: dict[float, MetricsReport]
    smoothness: dict
    train_seconds: float
    parameter_count: int
    history_len: int


def run_pipeline(sim_raw: dict, train_raw: dict, out, horizons=(1, 3, 5), stmad_k=(1, 2, 3), stmad_window=5,
                 discounts=(1.0, 0.9)) -> PipelineResult:
    """simulate -> train -> predict (FDTI + baselines) -> evaluate -> STMAD, with figures."""
    from .report import plot_horizon_metrics, plot_node_case, plot_stmad, plot_training_history

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sim = SimConfig.from_dict(sim_raw)
    data = run(sim)
    export_dataset(data, out / "data", {"simulator": sim.to_dict()})

    model_kw, tconf = split_train_config(train_raw)
    t = time.perf_counter()
    result = _train(data, model_kw, tconf)
    train_seconds = time.perf_counter() - t
    mconf = result.config
    save_checkpoint(result.params, mconf, out / "model.ckpt", {"best_epoch": result.best_epoch})
    _write_history(result.history, out / "history.csv")
    plot_training_history(result.history, out / "history.png")

    split = result.split
    qmax = max(horizons)
    origins = sample_origins(split.test, mconf.window, qmax)
    one_origins = sample_origins(split.test, mconf.window, 1)
    if not origins:
        raise ValueError("test split too short for the requested horizons")

    metrics, one_step = {}, {}
    forecasts = {"fdti": fdti_forecast(data, result.params, mconf, origins, horizons)}
    for name in BASELINES:
        forecasts[name] = _forecast(name, data, None, mconf, origins, horizons, tconf.ratios)
    y = truth(data, origins, horizons)
    y1 = truth(data, one_origins, [1])
    for name, fc in forecasts.items():
        write_predictions(fc, out / f"predictions_{name}.csv")
        metrics[name] = evaluate(fc.values, y, horizons)
        fc1 = (fdti_forecast(data, result.params, mconf, one_origins, [1]) if name == "fdti"
               else _forecast(name, data, None, mconf, one_origins, [1], tconf.ratios))
        one_step[name] = evaluate(fc1.values, y1, [1])
    csv_text = "".join(
        r.to_csv(name) if k == 0 else r.to_csv(name).split("\n", 1)[1]
        for k, (name, r) in enumerate(metrics.items())
    )
    (out / "metrics.csv").write_text(csv_text)
    one_text = "".join(
        r.to_csv(name) if k == 0 else r.to_csv(name).split("\n", 1)[1]
        for k, (name, r) in enumerate(one_step.items())
    )
    (out / "one_step.csv").write_text(one_text)
    plot_horizon_metrics(metrics, out / "metrics.png")

    discount = {}
    for lam in discounts:
        fc = fdti_forecast(data, result.params, replace(mconf, discount=lam), origins, horizons)
        discount[lam] = evaluate(fc.values, y, horizons)
    lines = ["lambda,horizon,rmse,mape"]
    for lam, rep in discount.items():
        for q, e in sorted(rep.entries.items()):
            lines.append(f"{lam:g},{q},{e.rmse:.17g},{e.mape:.17g}")
    (out / "discount.csv").write_text("\n".join(lines) + "\n")

    # smoothness of one-step predictions over every post-warm-up origin
    s_origins = sample_origins((data.t0 + data.warmup_min, data.t_range[1]), mconf.window, 1)
    series = {
        "truth": truth(data, s_origins, [1])[1],
        "fdti": fdti_forecast(data, result.params, mconf, s_origins, [1]).values[1],
        "neighbor-avg": neighbor_average_forecast(data, s_origins, [1]).values[1],
    }
    smooth = {name: [stmad(s, data.graph, k, stmad_window) for k in stmad_k] for name, s in series.items()}
    (out / "stmad.csv").write_text(smoothness_csv(smooth))
    plot_stmad(smooth, out / "stmad.png")
    node = int(np.argmax(series["truth"].std(axis=0)))
    plot_node_case(
        [t + 1 for t in s_origins],
        {name: s[:, node] for name, s in series.items()},
        out / "node_case.png",
        title=f"movement {node}",
    )

    summary = [f"parameters: {param_count(result.params)}", f"epochs: {len(result.history)}", ""]
    for name, rep in metrics.items():
        summary += [f"[{name}]", rep.summary(), ""]
    (out / "summary.txt").write_text("\n".join(summary))
    return PipelineResult(metrics, one_step, discount, smooth, train_seconds,
                          param_count(result.params), len(result.history))


def cmd_pipeline(args) -> int:
    start = time.perf_counter()
    sim_raw = _read_yaml(args.sim_config)
    train_raw = _read_yaml(args.train_config)
    res = run_pipeline(sim_raw, train_raw, args.out, _horizons(args.horizons))
    out = Path(args.out)
    RunManifest(
        command="pipeline",
        argv=list(args.argv),
        config={"simulator": sim_raw, "train": train_raw},
        seeds={"simulator": sim_raw.get("seed"), "train": train_raw.get("seed")},
        inputs={str(args.sim_config): digest(args.sim_config), str(args.train_config): digest(args.train_config)},
        wall_clock_s=time.perf_counter() - start,
        parameter_count=res.parameter_count,
        outputs=sorted(p.name for p in out.iterdir()),
    ).write(out / "manifest.json")
    print((out / "summary.txt").read_text())
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def _add_ablation_flags(p) -> None:
    p.add_argument("--lambda", dest="discount", type=float, default=None, help="rollout discount factor")
    p.add_argument("--no-roadnet-features", action="store_true", help="zero green/length/direction features")
    p.add_argument("--no-dynamic-edges", action="store_true", help="fix every graph edge weight to 1")
    p.add_argument("--no-clamp", action="store_true", help="allow negative predicted volumes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdti", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="multi-horizon forecasts")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--horizons", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--model", choices=("fdti", "ha", "persistence", "linreg", "neighbor-avg"), default="fdti")
    p.add_argument("--window", type=int, help="origin window length for baselines")
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="RMSE / MAPE of a predictions file")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--horizons", default="1,3,5")
    p.add_argument("--out")
    p.add_argument("--label")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stmad", help="k-hop smoothness of a volume or prediction series")
    p.add_argument("--data", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--k", default="1,2,3")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--horizon", type=int, default=1, help="horizon to read from a predictions file")
    p.add_argument("--skip", type=int, default=0, help="drop this many leading minutes (e.g. warm-up)")
    p.add_argument("--directed", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stmad)

    p = sub.add_parser("ftstg", help="inspect the spatio-temporal graph")
    fsub = p.add_subparsers(dest="ftstg_command", required=True)
    d = fsub.add_parser("dump", help="edge list t,src,dst,weight")
    d.add_argument("--data", required=True)
    d.add_argument("--window", nargs=2, type=int, metavar=("T0", "T"), required=True)
    d.add_argument("--out")
    d.add_argument("--raw-green", action="store_true", help="weights from raw green seconds")
    d.add_argument("--no-dynamic-edges", action="store_true")
    d.add_argument("--self-edges", choices=("gated", "constant"), default="gated")
    d.set_defaults(func=cmd_ftstg_dump)

    p = sub.add_parser("pipeline", help="simulate, train, forecast, evaluate and report")
    p.add_argument("--sim-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--horizons", default="1,3,5")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fdti {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"fdti {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, KeyError, OSError) as exc:
        print(f"fdti {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
