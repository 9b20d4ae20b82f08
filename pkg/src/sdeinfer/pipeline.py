"""End-to-end two-step inference: global search, coarse posterior, refinement, refined posterior."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .bayesopt import BOConfig, bo_run
from .cde import CDEConfig, CDEDataWarning
from .design import refine_design, refine_surrogate, support_box
from .errors import PipelineError, SDEInferError
from .iakde import IAKDEConfig
from .likelihood import LikelihoodEvaluator, RunLedger
from .mcmc import MCMCConfig, TuningWarning, mh_sample, surrogate_log_target
from .models import Gaussian, ObservationSeries, Prior, Uniform, get_model
from .simulate import SimConfig, extract_observations, simulate_trajectory

__all__ = [
    "ObservationSpec",
    "PipelineConfig",
    "RunReport",
    "benchmark_config",
    "config_from_dict",
    "generate_benchmark_data",
    "simulate_observations",
    "run_pipeline",
    "stage_seeds",
    "OUTPUT_ROOT_ENV",
]

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SDEINFER_OUTPUT_ROOT"
STAGES = ("observations", "global_search", "coarse_mcmc", "design", "refine", "refined_mcmc")


@dataclass(frozen=True)
class ObservationSpec:
    """How to obtain the observation series: simulate it or load a CSV."""

    path: str = None
    truth: tuple = None
    x0: tuple = None
    dt: float = None
    n_steps: int = None
    n_obs: int = None
    stride: int = None
    mask_intervals: tuple = None
    seed: int = None  # None: derived from the master seed


@dataclass(frozen=True)
class PipelineConfig:
    model: str
    prior: Prior
    observations: ObservationSpec
    pairs_M: int = 5000
    inner_dt: float = 0.001
    iakde: IAKDEConfig = IAKDEConfig()
    cde: CDEConfig = CDEConfig()
    bo: BOConfig = BOConfig()
    mcmc: MCMCConfig = MCMCConfig()
    n_refine: int = 5
    design: str = "lhs"
    include_coarse: bool = False
    restrict_to_design_region: bool = True
    pair_policy: str = "start"
    condition_on_mask: bool = False
    master_seed: int = 0
    output_dir: str = None
    threads: int = 1
    benchmark: str = None

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["prior"] = prior_to_dict(self.prior)
        return d

    def config_hash(self):
        d = self.to_dict()
        d.pop("output_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


def prior_to_dict(prior):
    return {
        "factors": [{"kind": type(f).__name__.lower(), **dataclasses.asdict(f)} for f in prior.factors],
        "bounds": [list(b) for b in prior.bounds],
    }


def prior_from_dict(doc):
    kinds = {"uniform": Uniform, "gaussian": Gaussian}
    factors = tuple(kinds[f["kind"]](**{k: v for k, v in f.items() if k != "kind"}) for f in doc["factors"])
    return Prior(factors, tuple(tuple(b) for b in doc["bounds"]))


def config_from_dict(doc):
    """Inverse of :meth:`PipelineConfig.to_dict` (as written to ``config.json``)."""
    doc = dict(doc)

    def tup(v):
        return tuple(tup(x) for x in v) if isinstance(v, list) else v

    stages = {"iakde": IAKDEConfig, "cde": CDEConfig, "bo": BOConfig, "mcmc": MCMCConfig,
              "observations": ObservationSpec}
    kw = {name: cls(**{k: tup(v) for k, v in doc.pop(name).items()}) for name, cls in stages.items()}
    return PipelineConfig(prior=prior_from_dict(doc.pop("prior")), **kw, **doc)


def benchmark_config(name, master_seed=0, **overrides):
    """Built-in configurations for the ``ou`` and ``doublewell`` experiments."""
    if name == "ou":
        cfg = PipelineConfig(
            model="ou",
            prior=Prior((Uniform(0.05, 5.0),)),
            observations=ObservationSpec(truth=(1.0,), x0=(3.0,), dt=0.001, n_steps=10000, n_obs=100,
                                         mask_intervals=((2.0, 3.5),)),
            pairs_M=5000,
            inner_dt=0.001,
            bo=BOConfig(n_initial=5, n_max=5),
            n_refine=5,
            master_seed=master_seed,
            benchmark="ou",
        )
    elif name == "doublewell":
        cfg = PipelineConfig(
            model="doublewell",
            prior=Prior((Uniform(0.0, 8.0), Uniform(-10.0, 0.0))),
            observations=ObservationSpec(truth=(3.0, -6.0), x0=(0.0,), dt=0.01, n_steps=4000, n_obs=400,
                                         mask_intervals=((-1.5, -0.5), (0.5, 1.5))),
            pairs_M=5000,
            inner_dt=0.01,
            bo=BOConfig(n_initial=10, n_max=20),
            n_refine=10,
            master_seed=master_seed,
            benchmark="doublewell",
        )
    else:
        raise ValueError(f"unknown benchmark '{name}'")
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def stage_seeds(master_seed):
    """Deterministic per-stage integer seeds derived from the master seed."""
    children = np.random.SeedSequence(master_seed).spawn(len(STAGES) + 2)
    names = STAGES + ("iakde_sim", "cde_sim")
    return {n: int(c.generate_state(1, dtype=np.uint32)[0]) for n, c in zip(names, children)}


def simulate_observations(model, spec, seed):
    """Simulate a trajectory at ``spec.truth``, subsample it and apply the interval mask."""
    traj = simulate_trajectory(model, spec.truth, spec.x0, 0.0, SimConfig(spec.dt, spec.n_steps, seed))
    obs = extract_observations(traj, n_obs=spec.n_obs, stride=spec.stride)
    if spec.mask_intervals:
        obs = obs.masked_by_intervals(spec.mask_intervals)
    return obs, traj


def generate_benchmark_data(name, seed=0):
    """Observation series of a built-in benchmark, simulated with ``seed``."""
    cfg = benchmark_config(name)
    obs, _ = simulate_observations(get_model(cfg.model), cfg.observations, seed)
    return obs


@dataclass
class RunReport:
    config: PipelineConfig
    observations: ObservationSeries
    bo: object
    coarse_chain: object
    design_points: np.ndarray
    refined_values: np.ndarray
    refined_surrogate: object
    refined_chain: object
    refined_region: np.ndarray
    summary: dict
    output_dir: Path = None

    @property
    def coarse_surrogate(self):
        return self.bo.surrogate

    @property
    def theta_ml(self):
        return self.bo.theta_ml


class _Manifest:
    def __init__(self, out, config):
        self.path = out / "manifest.json"
        self.doc = {"config_hash": config.config_hash(), "stages": {s: False for s in STAGES},
                    "artifacts": {}, "wall_time": {}}

    def done(self, stage, wall, **artifacts):
        self.doc["stages"][stage] = True
        self.doc["wall_time"][stage] = wall
        self.doc["artifacts"].update({k: str(v) for k, v in artifacts.items()})
        self.write()

    def write(self):
        self.path.write_text(json.dumps(self.doc, indent=1))


def _output_dir(config):
    if config.output_dir is not None:
        out = Path(config.output_dir)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        out = root / f"{config.benchmark or config.model}-{config.master_seed}-{stamp}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _validate(config):
    if config.bo.n_max < 1 or config.n_refine < 2:
        raise PipelineError("config", f"insufficient design budget (n_max={config.bo.n_max}, "
                                      f"n_refine={config.n_refine}; need n_max >= 1 and n_refine >= 2)")
    if config.bo.n_initial < 2:
        raise PipelineError("config", "insufficient design budget (n_initial must be >= 2)")
    if config.pair_policy not in ("both", "start"):
        raise PipelineError("config", f"unknown pair policy '{config.pair_policy}'")
    if config.condition_on_mask and config.pair_policy != "both":
        raise PipelineError("config", "condition_on_mask requires pair_policy 'both'")
    if config.design not in ("lhs", "random"):
        raise PipelineError("config", f"unknown design strategy '{config.design}'")


def run_pipeline(config, observations=None):
    """Run the two-step inference and persist every artifact.

    Stages: observations -> Bayesian-optimization global search on IA-KDE
    likelihoods -> MH on the coarse GP mean -> refinement design from the
    coarse draws -> CDE likelihoods at the design points and refined GP ->
    MH on the refined GP mean.  Any failing stage raises
    :class:`PipelineError` naming it; artifacts written so far remain.
    """
    _validate(config)
    model = get_model(config.model)
    if config.prior.dim != model.param_dim:
        raise PipelineError("config", f"prior has {config.prior.dim} factors, model has {model.param_dim} parameters")
    seeds = stage_seeds(config.master_seed)
    out = _output_dir(config)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, default=str))
    manifest = _Manifest(out, config)
    manifest.write()
    ledger = RunLedger(out / "ledger.csv")
    names = model.param_names
    timing = {}

    def stage(name):
        return _Stage(name, timing, manifest)

    with stage("observations") as st:
        if observations is None:
            spec = config.observations
            if spec.path is not None:
                observations = ObservationSeries.from_csv(spec.path)
                if spec.mask_intervals:
                    observations = observations.masked_by_intervals(spec.mask_intervals)
            else:
                data_seed = spec.seed if spec.seed is not None else seeds["observations"]
                observations, traj = simulate_observations(model, spec, data_seed)
                np.savetxt(out / "trajectory.csv", np.column_stack([traj.times, traj.states]), delimiter=",",
                           header="time," + ",".join(f"x{i}" for i in range(model.state_dim)), comments="",
                           fmt="%.17g")
        observations.to_csv(out / "observations.csv")
        st.artifacts = {"observations": out / "observations.csv"}

    mask = config.observations.mask_intervals if config.condition_on_mask else None
    with stage("global_search") as st:
        coarse_eval = LikelihoodEvaluator(model, observations, config.iakde, config.pairs_M, config.inner_dt,
                                          seeds["iakde_sim"], ledger=ledger, stage="global_search",
                                          threads=config.threads, pair_policy=config.pair_policy,
                                          mask_intervals=mask)
        bo_cfg = dataclasses.replace(config.bo, seed=seeds["global_search"])
        bo = bo_run(coarse_eval, bo_cfg, config.prior, checkpoint_path=out / "coarse_surrogate.json")
        bo.surrogate.to_json(out / "coarse_surrogate.json")
        st.artifacts = {"coarse_surrogate": out / "coarse_surrogate.json", "ledger": ledger.path}

    with stage("coarse_mcmc") as st:
        coarse_target = surrogate_log_target(bo.surrogate, config.prior)
        mc = dataclasses.replace(config.mcmc, init=tuple(bo.theta_ml), seed=seeds["coarse_mcmc"],
                                 support_box=tuple(map(tuple, config.prior.box())))
        coarse_chain = _sample(coarse_target, mc)
        coarse_chain.to_csv(out / "coarse_chain.csv", names)
        st.artifacts = {"coarse_chain": out / "coarse_chain.csv"}

    with stage("design") as st:
        points = refine_design(coarse_chain, config.n_refine, config.design, seed=seeds["design"])
        box = support_box(coarse_chain.draws)
        region = np.column_stack([np.minimum(box[:, 0], points.min(axis=0)),
                                  np.maximum(box[:, 1], points.max(axis=0))])
        np.savetxt(out / "design_points.csv", points, delimiter=",", header=",".join(names), comments="",
                   fmt="%.17g")
        st.artifacts = {"design_points": out / "design_points.csv"}

    with stage("refine") as st:
        cde_cfg = dataclasses.replace(config.cde, seed=seeds["refine"])
        fine_eval = LikelihoodEvaluator(model, observations, cde_cfg, config.pairs_M, config.inner_dt,
                                        seeds["cde_sim"], ledger=ledger, stage="refine", threads=config.threads,
                                        pair_policy=config.pair_policy, mask_intervals=mask)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CDEDataWarning)
            refined, values = refine_surrogate(bo.surrogate, points, fine_eval, config.include_coarse,
                                               {"seed": seeds["refine"]})
        refined.to_json(out / "refined_surrogate.json")
        st.artifacts = {"refined_surrogate": out / "refined_surrogate.json"}

    with stage("refined_mcmc") as st:
        restrict = region if config.restrict_to_design_region else None
        fine_target = surrogate_log_target(refined, config.prior, box=restrict)
        ok = np.isfinite(values)
        cand = points[ok]
        start = cand[int(np.argmax(refined.mean(cand)))]
        mc = dataclasses.replace(config.mcmc, init=tuple(start), seed=seeds["refined_mcmc"],
                                 support_box=tuple(map(tuple, region if restrict is not None else config.prior.box())))
        refined_chain = _sample(fine_target, mc)
        refined_chain.to_csv(out / "refined_chain.csv", names)
        st.artifacts = {"refined_chain": out / "refined_chain.csv"}

    summary = {
        "model": config.model,
        "benchmark": config.benchmark,
        "master_seed": config.master_seed,
        "param_names": list(names),
        "n_observations": len(observations),
        "n_transition_terms": int(coarse_eval.n_terms),
        "theta_ml": bo.theta_ml.tolist(),
        "best_coarse_value": bo.best_value,
        "bo_evaluations": len(bo.history),
        "bo_iterations": bo.n_iterations,
        "bo_stopped_early": bo.stopped_early,
        "design_points": points.tolist(),
        "refined_values": [None if not np.isfinite(v) else float(v) for v in values],
        "refined_region": region.tolist(),
        "coarse": coarse_chain.summary(),
        "refined": refined_chain.summary(),
    }
    doc = {**summary, "wall_time": timing}
    (out / "summary.json").write_text(json.dumps(doc, indent=1))
    manifest.doc["artifacts"]["summary"] = str(out / "summary.json")
    manifest.write()
    return RunReport(config, observations, bo, coarse_chain, points, values, refined, refined_chain, region,
                     summary, out)


def _sample(target, mc):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", TuningWarning)
        chain = mh_sample(target, mc)
    for w in caught:
        logger.warning("%s", w.message)
    return chain


class _Stage:
    def __init__(self, name, timing, manifest):
        self.name = name
        self.timing = timing
        self.manifest = manifest
        self.artifacts = {}

    def __enter__(self):
        logger.info("stage %s", self.name)
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        wall = time.perf_counter() - self.t0
        self.timing[self.name] = wall
        if exc_type is None:
            self.manifest.done(self.name, wall, **self.artifacts)
            return False
        if isinstance(exc, PipelineError):
            return False
        if isinstance(exc, (SDEInferError, ValueError, np.linalg.LinAlgError, FloatingPointError)):
            raise PipelineError(self.name, str(exc)) from exc
        return False
