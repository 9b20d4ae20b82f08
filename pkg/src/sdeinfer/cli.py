"""Command-line front end: ``sdeinfer {simulate,infer,plotdata,validate-config}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
The default output root for runs is taken from ``$SDEINFER_OUTPUT_ROOT``
(falling back to ``./runs``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import warnings
from datetime import datetime
from pathlib import Path

import numpy as np

from .cde import CDEDataWarning
from .config import load_config
from .errors import ConfigError, SDEInferError
from .gp import GPSurrogate
from .iakde import IAKDE
from .likelihood import LikelihoodEvaluator
from .mcmc import PosteriorChain
from .models import ObservationSeries, get_model, ou_transition_moments
from .pipeline import (OUTPUT_ROOT_ENV, benchmark_config, config_from_dict, run_pipeline,
                       simulate_observations, stage_seeds)

__all__ = ["main", "build_parser"]

logger = logging.getLogger("sdeinfer")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class _Once(argparse.Action):
    """Store a value, rejecting a second occurrence of the same flag."""

    def __call__(self, parser, namespace, values, option_string=None):
        if getattr(namespace, f"_seen_{self.dest}", False):
            parser.error(f"{option_string} given more than once")
        setattr(namespace, f"_seen_{self.dest}", True)
        setattr(namespace, self.dest, values)


def build_parser():
    p = argparse.ArgumentParser(prog="sdeinfer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, action=_Once, help="override the master seed")
        sp.add_argument("--output", help="output directory (default: timestamped under the output root)")

    s = sub.add_parser("simulate", help="simulate a trajectory and the observation series of a config")
    s.add_argument("--config", required=True)
    common(s)

    s = sub.add_parser("infer", help="run the full two-step inference")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--benchmark", choices=("ou", "doublewell"))
    s.add_argument("--threads", type=int, action=_Once, help="cap on simulation worker threads")
    common(s)

    s = sub.add_parser("plotdata", help="export grid CSVs from a completed run")
    s.add_argument("run_dir")
    s.add_argument("--kind", required=True, choices=("transition-density", "surrogate", "posterior"))
    s.add_argument("--phase", choices=("coarse", "refined"), default="refined")
    s.add_argument("--theta", type=float, nargs="+", help="parameter for transition-density (default: refined mean)")
    s.add_argument("--z0", type=float, nargs="+", help="conditioning state (default: median included state)")
    s.add_argument("--grid-size", type=int, default=200)
    s.add_argument("--bins", type=int, default=40)
    s.add_argument("--out", help="CSV path (default: <run_dir>/plot_<kind>[_<phase>].csv)")

    s = sub.add_parser("validate-config", help="parse and validate a config file")
    s.add_argument("config")
    return p


def _output_dir(explicit, label):
    if explicit:
        out = Path(explicit)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        out = root / f"{label}-{datetime.now().strftime('%Y%m%d-%H%M%S-%f')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args):
    cfg = load_config(args.config, seed=args.seed)
    spec = cfg.observations
    if spec.path is not None:
        raise ConfigError(f"{args.config}: [observations] path: simulate needs a generative spec, not a data file")
    model = get_model(cfg.model)
    seed = spec.seed if spec.seed is not None else stage_seeds(cfg.master_seed)["observations"]
    obs, traj = simulate_observations(model, spec, seed)
    out = _output_dir(args.output or cfg.output_dir, f"{cfg.model}-sim-{cfg.master_seed}")
    np.savetxt(out / "trajectory.csv", np.column_stack([traj.times, traj.states]), delimiter=",",
               header="time," + ",".join(f"x{i}" for i in range(model.state_dim)), comments="", fmt="%.17g")
    obs.to_csv(out / "observations.csv")
    print(out)
    return EXIT_OK


def cmd_infer(args):
    if args.benchmark:
        cfg = benchmark_config(args.benchmark)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, master_seed=args.seed)
    else:
        cfg = load_config(args.config, seed=args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        cfg = dataclasses.replace(cfg, threads=args.threads)
    if args.output:
        cfg = dataclasses.replace(cfg, output_dir=args.output)
    report = run_pipeline(cfg)
    s = report.summary
    print(json.dumps({"output_dir": str(report.output_dir), "theta_ml": s["theta_ml"],
                      "coarse_mean": s["coarse"]["mean"], "coarse_variance": s["coarse"]["variance"],
                      "refined_mean": s["refined"]["mean"], "refined_variance": s["refined"]["variance"]},
                     indent=1))
    return EXIT_OK


def _load_run(run_dir):
    run_dir = Path(run_dir)
    try:
        cfg = config_from_dict(json.loads((run_dir / "config.json").read_text()))
        summary = json.loads((run_dir / "summary.json").read_text())
    except FileNotFoundError as exc:
        raise SDEInferError(f"{run_dir} is not a completed run: {exc.filename} missing") from exc
    return run_dir, cfg, summary


def _write_csv(path, header, columns):
    np.savetxt(path, np.column_stack(columns), delimiter=",", header=",".join(header), comments="", fmt="%.17g")
    print(path)


def _transition_density(run_dir, cfg, summary, args):
    model = get_model(cfg.model)
    if model.state_dim != 1:
        raise SDEInferError("transition-density export supports one-dimensional states only")
    obs = ObservationSeries.from_csv(run_dir / "observations.csv")
    theta = np.asarray(args.theta if args.theta else summary["refined"]["mean"], dtype=float)
    seeds = stage_seeds(cfg.master_seed)
    mask = cfg.observations.mask_intervals if cfg.condition_on_mask else None
    ev = LikelihoodEvaluator(model, obs, cfg.iakde, cfg.pairs_M, cfg.inner_dt, seeds["iakde_sim"],
                             pair_policy=cfg.pair_policy, mask_intervals=mask)
    z0 = np.asarray(args.z0 if args.z0 else np.median(ev.z0, axis=0), dtype=float).reshape(1)
    data = ev.simulate(theta)
    kde = IAKDE(data, ev.method)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CDEDataWarning)
        cde = dataclasses.replace(cfg.cde, seed=seeds["refine"]).fit(data)
    window = kde.window(z0)[:, 0]
    lo, hi = np.min(window), np.max(window)
    pad = 0.25 * (hi - lo) + 1e-9
    grid = np.linspace(lo - pad, hi + pad, args.grid_size)
    cols = [grid, np.exp(kde.log_density(z0, grid[:, None])), np.exp(cde.log_density(z0, grid[:, None]))]
    header = ["z1", "iakde", "cde"]
    if cfg.model == "ou":
        mean, var = ou_transition_moments(z0[0], theta[0], ev.gap)
        cols.append(np.exp(-0.5 * (grid - mean) ** 2 / var) / np.sqrt(2 * np.pi * var))
        header.append("analytic")
    return header, cols


def _surrogate(run_dir, cfg, summary, args):
    gp = GPSurrogate.from_json(str(run_dir / f"{args.phase}_surrogate.json"))
    box = cfg.prior.box() if args.phase == "coarse" else np.asarray(summary["refined_region"], dtype=float)
    axes = [np.linspace(lo, hi, args.grid_size) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    mean, var = gp.predict(pts)
    sd = np.sqrt(var)
    header = list(summary["param_names"]) + ["mean", "sd", "lower", "upper"]
    return header, [*pts.T, mean, sd, mean - 2 * sd, mean + 2 * sd]


def _posterior(run_dir, cfg, summary, args):
    chain = PosteriorChain.from_csv(run_dir / f"{args.phase}_chain.csv")
    rows = []
    for j in range(chain.draws.shape[1]):
        dens, edges = np.histogram(chain.draws[:, j], bins=args.bins, density=True)
        rows.append(np.column_stack([np.full(args.bins, j), edges[:-1], edges[1:], dens]))
    table = np.vstack(rows)
    return ["param", "bin_lo", "bin_hi", "density"], list(table.T)


def cmd_plotdata(args):
    run_dir, cfg, summary = _load_run(args.run_dir)
    build = {"transition-density": _transition_density, "surrogate": _surrogate, "posterior": _posterior}
    header, cols = build[args.kind](run_dir, cfg, summary, args)
    suffix = "" if args.kind == "transition-density" else f"_{args.phase}"
    out = Path(args.out) if args.out else run_dir / f"plot_{args.kind.replace('-', '_')}{suffix}.csv"
    _write_csv(out, header, cols)
    return EXIT_OK


def cmd_validate_config(args):
    cfg = load_config(args.config)
    print(f"{args.config}: ok (model={cfg.model}, master_seed={cfg.master_seed}, hash={cfg.config_hash()[:12]})")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "infer": cmd_infer, "plotdata": cmd_plotdata,
            "validate-config": cmd_validate_config}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SDEInferError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
