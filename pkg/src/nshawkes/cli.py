"""Command-line pipeline: fit, simulate, predict, evaluate, render, kernel-viz.

Configuration comes from an optional YAML file; command-line flags win
over config values.  All commands are deterministic given their inputs
and the seed, exit 0 only after outputs are fully written, and exit 2
when a referenced input file is missing.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import baselines as bl
from . import evaluate as ev
from .data import (
    CovariateStats,
    apply_standardization,
    load_events,
    save_events,
    split,
    standardize,
)
from .geo import build_grid, load_regions
from .model import (
    FitConfig,
    NonstationaryHawkes,
    fit,
    load_checkpoint,
    save_checkpoint,
)
from .simulate import SimConfig, simulate

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_INPUT = 2


class MissingInput(FileNotFoundError):
    pass


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{what} file not found: {p}")
    return p


def _load_config(path):
    if path is None:
        return {}
    _require(path, "config")
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return cfg


def _section(cfg, name) -> dict:
    value = cfg.get(name) or {}
    if not isinstance(value, dict):
        raise ValueError(f"config section {name!r} must be a mapping")
    return value


def _pick(flag_value, cfg_section, key, default):
    if flag_value is not None:
        return flag_value
    if key in cfg_section:
        return cfg_section[key]
    return default


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model_inputs(args, cfg, need_events=True):
    """Checkpoint + regions (standardized with checkpoint stats) + events."""
    ckpt_path = _require(args.checkpoint, "checkpoint")
    params, doc = load_checkpoint(ckpt_path)
    cov = doc.get("covariates")
    names = cov["names"] if cov else []
    regions = load_regions(_require(args.regions, "regions"), names)
    if cov:
        stats = CovariateStats(
            tuple(cov["names"]),
            np.asarray(cov["means"], dtype=float),
            np.asarray(cov["stds"], dtype=float),
        )
        regions = apply_standardization(regions, stats)
    events = None
    if need_events:
        events = load_events(_require(args.events, "events"), regions)
    return params, regions, events


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    covariates = cfg.get("covariates")
    model_cfg = _section(cfg, "model")
    fit_cfg = _section(cfg, "fit")

    regions = load_regions(_require(args.regions, "regions"), covariates)
    regions, stats = standardize(regions)
    events = load_events(_require(args.events, "events"), regions)

    config = FitConfig(
        learning_rate=float(_pick(args.learning_rate, fit_cfg, "learning_rate", 0.1)),
        max_iters=int(_pick(args.max_iters, fit_cfg, "max_iters", 300)),
        tol=float(fit_cfg.get("tol", 1e-6)),
        seed=int(_pick(args.seed, fit_cfg, "seed", 0)),
        grid_spacing=float(_pick(args.grid_spacing, fit_cfg, "grid_spacing", 0.05)),
        R=int(model_cfg.get("R", 3)),
        H=int(model_cfg.get("H", 32)),
        A=float(model_cfg.get("A", 0.35)),
        c=float(model_cfg.get("c", 0.1)),
        alpha_bw=float(model_cfg.get("alpha_bw", 1.0)),
        window_mult=float(fit_cfg.get("window_mult", 5.0)),
    )
    result = fit(events, regions, config)

    out = _out_dir(args)
    save_checkpoint(
        out / "checkpoint.json",
        result.params,
        covariate_stats=stats,
        meta={
            "n_events": len(events),
            "horizon": events.horizon,
            "converged": bool(result.converged),
            "iterations": len(result.trace),
            "seed": config.seed,
        },
    )
    with open(out / "trace.csv", "w") as fh:
        fh.write("iteration,loglik\n")
        for k, v in enumerate(result.trace):
            fh.write(f"{k},{v:.10g}\n")
    gamma = result.params.background.gamma
    with open(out / "gamma_table.txt", "w") as fh:
        fh.write("covariate\tcoefficient\n")
        for name, g in zip(stats.names, gamma):
            fh.write(f"{name}\t{g:+.4f}\n")
    print(
        f"fit: {len(result.trace)} iterations, final loglik {result.trace[-1]:.4f}, "
        f"converged={result.converged}"
    )
    print(f"wrote {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    sim_cfg = _section(cfg, "simulate")
    params, regions, _ = _load_model_inputs(args, cfg, need_events=False)
    config = SimConfig(
        horizon=float(args.horizon),
        domain=regions,
        seed=int(_pick(args.seed, sim_cfg, "seed", 0)),
        grid_spacing=float(_pick(args.grid_spacing, sim_cfg, "grid_spacing", 0.05)),
    )
    model = NonstationaryHawkes(params, regions)
    events = simulate(model, config)
    out = _out_dir(args)
    save_events(events, out / "events.csv")
    print(f"simulated {len(events)} events over {config.horizon} days")
    print(f"wrote {out / 'events.csv'}")
    return EXIT_OK


def _oos_report(args, cfg):
    eval_cfg = _section(cfg, "evaluate")
    params, regions, events = _load_model_inputs(args, cfg)
    train, test = split(events, float(args.split))
    spacing = float(_pick(args.grid_spacing, eval_cfg, "grid_spacing", 0.05))
    grid = build_grid(regions, spacing)
    model = NonstationaryHawkes(params, regions)
    report = ev.oos_predict(
        model,
        train,
        test,
        regions,
        grid,
        week_length=float(eval_cfg.get("week_length", 7.0)),
        dt_step=float(eval_cfg.get("dt_step", 0.25)),
        workers=args.workers,
    )
    return report, (params, regions, train, test, grid, eval_cfg)


def cmd_predict(args) -> int:
    cfg = _load_config(args.config)
    report, _ = _oos_report(args, cfg)
    out = _out_dir(args)
    ev.write_report(report, out / "predictions.csv")
    print(f"wrote {out / 'predictions.csv'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    report, (params, regions, train, test, grid, eval_cfg) = _oos_report(args, cfg)
    out = _out_dir(args)
    ev.write_report(report, out / "predictions.csv", out / "metrics.json")

    summary = {"model": report.summary()}
    if args.baselines:
        week_length = float(eval_cfg.get("week_length", 7.0))
        edges = np.concatenate(
            [
                np.arange(0.0, train.horizon + 1e-9, week_length),
                ev.week_edges(train.horizon, test.horizon, week_length)[1:],
            ]
        )
        all_events = _concat_events(train, test)
        series = bl.weekly_counts(all_events, regions, edges)
        n_test = len(ev.week_edges(train.horizon, test.horizon, week_length)) - 1
        observed = series.counts[:, -n_test:].astype(float)
        intervals = list(zip(edges[-n_test - 1:-1], edges[-n_test:]))
        train_counts = series.counts[:, :-n_test].sum(axis=1)
        for name, method in (("persistent", "persistent"), ("ar", "ar")):
            preds = bl.rolling_forecasts(series, n_test, method=method)
            rep = ev.make_report(regions.ids, intervals, preds, observed, train_counts)
            summary[name] = rep.summary()
        etas = bl.etas_fit(train, regions, grid=grid)
        rep = bl.etas_predict(etas, train, test, regions, grid, week_length=week_length)
        summary["etas"] = rep.summary()
    with open(out / "metrics.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    print(json.dumps(summary["model"], sort_keys=True))
    print(f"wrote {out / 'metrics.json'}")
    return EXIT_OK


def _concat_events(train, test):
    from .data import EventSequence

    return EventSequence(
        np.concatenate([train.times, test.times]),
        np.vstack([train.locs, test.locs]),
        horizon=test.horizon,
    )


def cmd_render(args) -> int:
    cfg = _load_config(args.config)
    eval_cfg = _section(cfg, "evaluate")
    params, regions, events = _load_model_inputs(args, cfg)
    spacing = float(_pick(args.grid_spacing, eval_cfg, "grid_spacing", 0.05))
    grid = build_grid(regions, spacing)
    model = NonstationaryHawkes(params, regions)
    history = events.before(float(args.time))
    out = _out_dir(args)
    ev.render_intensity(model, float(args.time), grid, history, out / "intensity.csv")
    print(f"wrote {out / 'intensity.csv'}")
    return EXIT_OK


def cmd_kernel_viz(args) -> int:
    cfg = _load_config(args.config)
    params, regions, _ = _load_model_inputs(args, cfg, need_events=False)
    out = _out_dir(args)
    ev.export_kernel_viz(
        params,
        regions,
        out / "kernel_segments.csv",
        n_locations=int(args.locations),
        seed=int(args.seed or 0),
    )
    print(f"wrote {out / 'kernel_segments.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nshawkes",
        description="Non-stationary Hawkes process toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, events=False, regions=False, checkpoint=False):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        p.add_argument("--grid-spacing", dest="grid_spacing", type=float, default=None)
        if events:
            p.add_argument("--events", required=True, help="events CSV")
        if regions:
            p.add_argument("--regions", required=True, help="regions GeoJSON")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint")

    p = sub.add_parser("fit", help="fit the model and write a checkpoint")
    common(p, events=True, regions=True)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="sample events from a checkpoint")
    common(p, regions=True, checkpoint=True)
    p.add_argument("--horizon", type=float, required=True, help="days to simulate")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("predict", help="weekly out-of-sample predictions")
    common(p, events=True, regions=True, checkpoint=True)
    p.add_argument("--split", type=float, required=True, help="train/test split day")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="predictions plus MAE/MRE metrics")
    common(p, events=True, regions=True, checkpoint=True)
    p.add_argument("--split", type=float, required=True, help="train/test split day")
    p.add_argument("--baselines", action="store_true", help="also run baseline models")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="intensity raster at one time")
    common(p, events=True, regions=True, checkpoint=True)
    p.add_argument("--time", type=float, required=True, help="evaluation time (days)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("kernel-viz", help="export focus segments and weights")
    common(p, regions=True, checkpoint=True)
    p.add_argument("--locations", type=int, default=200)
    p.set_defaults(func=cmd_kernel_viz)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
