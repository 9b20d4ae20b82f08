"""Global search: expected-improvement Bayesian optimization of a log-likelihood."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import erfcx, ndtr

from .design import latin_hypercube
from .errors import EvaluationError, SDEInferError
from .gp import gp_fit

__all__ = ["BOConfig", "BOResult", "initial_design", "expected_improvement", "log_expected_improvement",
           "ei_from_moments", "bo_run"]

logger = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class BOConfig:
    n_initial: int = 5
    n_max: int = 5
    stop_epsilon: float = 1e-6
    acquisition_restarts: int = 32
    search_box: tuple = None
    seed: int = 0
    initial_design: str = "lhs"
    min_iterations: int = 3
    failure_value: float = -1e6
    gp_restarts: int = 8
    ard: bool = True

    def __post_init__(self):
        if self.n_initial < 1 or self.n_max < 0 or self.acquisition_restarts < 1:
            raise ValueError("n_initial and acquisition_restarts must be positive, n_max nonnegative")
        if not self.stop_epsilon > 0:
            raise ValueError("stop_epsilon must be positive")
        if self.initial_design not in ("lhs", "prior"):
            raise ValueError("initial_design must be 'lhs' or 'prior'")


def _box(config, prior):
    if config.search_box is not None:
        return np.atleast_2d(np.asarray(config.search_box, dtype=float))
    if prior is None:
        raise ValueError("need a search box or a prior")
    return prior.box()


def initial_design(config, prior=None):
    """``config.n_initial`` starting points: LHS over the search box or prior draws."""
    rng = np.random.default_rng([config.seed, 0])
    if config.initial_design == "prior":
        if prior is None:
            raise ValueError("prior draws requested but no prior given")
        return prior.sample(rng, config.n_initial)
    return latin_hypercube(config.n_initial, _box(config, prior), rng)


def _log_h(u):
    """``log(phi(u) + u Phi(u))``, stable for very negative ``u``."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    mid = u > -6.0
    um = u[mid]
    out[mid] = np.log(np.exp(-0.5 * um**2 - _LOG_SQRT_2PI) + um * ndtr(um))
    ul = -u[~mid]
    # phi(u) - |u| Q(|u|) = phi(u) (1 - |u| R(|u|)), R the Mills ratio;
    # past |u| = 20 the bracket cancels, so use its asymptotic series instead
    far = ul >= 20.0
    tail = np.empty_like(ul)
    mills = erfcx(ul[~far] / math.sqrt(2.0)) * math.sqrt(math.pi / 2.0)
    tail[~far] = np.log1p(-ul[~far] * mills)
    v = 1.0 / ul[far] ** 2
    series = 135135.0
    for c in (-10395.0, 945.0, -105.0, 15.0, -3.0):
        series = c + v * series
    tail[far] = np.log(v) + np.log1p(v * series)
    out[~mid] = -0.5 * ul**2 - _LOG_SQRT_2PI + tail
    return out


def ei_from_moments(mu, sigma, best):
    """Maximization-form EI: ``E[max(l - best, 0)]`` for ``l ~ N(mu, sigma^2)``."""
    scalar = np.ndim(mu) == 0 and np.ndim(sigma) == 0
    mu, sigma = np.broadcast_arrays(np.atleast_1d(np.asarray(mu, float)), np.atleast_1d(np.asarray(sigma, float)))
    out = np.maximum(mu - best, 0.0)
    pos = sigma > 0
    out[pos] = sigma[pos] * np.exp(_log_h((mu[pos] - best) / sigma[pos]))
    return float(out[0]) if scalar else out


def log_ei_from_moments(mu, sigma, best):
    mu, sigma = np.broadcast_arrays(np.atleast_1d(np.asarray(mu, float)), np.atleast_1d(np.asarray(sigma, float)))
    with np.errstate(divide="ignore"):
        out = np.log(np.maximum(mu - best, 0.0))
    pos = sigma > 0
    out[pos] = np.log(sigma[pos]) + _log_h((mu[pos] - best) / sigma[pos])
    return out


def expected_improvement(surrogate, theta, best_value):
    """EI of the GP posterior at the rows of ``theta`` over ``best_value``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    mean, var = surrogate.predict(theta)
    out = ei_from_moments(mean, np.sqrt(var), best_value)
    return float(out[0]) if np.ndim(out) and len(out) == 1 else out


def log_expected_improvement(surrogate, theta, best_value):
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    mean, var = surrogate.predict(theta)
    return log_ei_from_moments(mean, np.sqrt(var), best_value)


def maximize_acquisition(surrogate, best_value, box, n_restarts, rng):
    """Multi-start L-BFGS-B on log EI from LHS seeds; ties go to the first seed."""
    seeds = latin_hypercube(n_restarts, box, rng)
    bounds = [tuple(b) for b in box]

    def neg(x):
        v = log_expected_improvement(surrogate, x, best_value)[0]
        return 1e300 if not np.isfinite(v) else -v

    cands, vals = [], []
    for x0 in seeds:
        res = minimize(neg, x0, method="L-BFGS-B", bounds=bounds)
        x = np.clip(res.x, box[:, 0], box[:, 1])
        cands.append(x)
        vals.append(log_expected_improvement(surrogate, x, best_value)[0])
    vals = np.array(vals)
    if not np.any(np.isfinite(vals)):
        return seeds[0], -np.inf
    i = int(np.argmax(np.where(np.isfinite(vals), vals, -np.inf)))
    return cands[i], float(vals[i])


@dataclass
class BOResult:
    surrogate: object
    history: list
    theta_ml: np.ndarray
    best_value: float
    n_iterations: int
    stopped_early: bool = False
    incumbent_trace: list = field(default_factory=list)

    @property
    def X(self):
        return np.array([h["theta"] for h in self.history])

    @property
    def values(self):
        return np.array([h["value"] for h in self.history])


def bo_run(objective, config, prior=None, checkpoint_path=None):
    """Expected-improvement Bayesian optimization of ``objective`` (maximized).

    Each iteration refits the GP on every evaluation so far, maximizes EI over
    the search box and evaluates the maximizer.  Stops once two consecutive
    maximizers are within ``stop_epsilon`` (squared Euclidean distance), but
    never before ``min_iterations`` iterations, or after ``n_max`` iterations.
    Failed evaluations enter the GP at ``failure_value``.
    """
    if config.n_initial < 2:
        raise ValueError("Bayesian optimization needs at least 2 initial points")
    box = _box(config, prior)
    rng = np.random.default_rng([config.seed, 1])
    history = []

    def evaluate(theta, phase, iteration):
        try:
            value, failed = float(objective(theta)), False
        except EvaluationError as exc:
            logger.warning("evaluation failed, using floor %g: %s", config.failure_value, exc)
            value, failed = config.failure_value, True
        history.append({"theta": np.asarray(theta, float).tolist(), "value": value, "failed": failed,
                        "phase": phase, "iteration": iteration})

    def incumbent():
        ok = [h for h in history if not h["failed"]]
        if not ok:
            return None
        best = max(range(len(ok)), key=lambda i: ok[i]["value"])
        return ok[best]

    def fit():
        X = np.array([h["theta"] for h in history])
        y = np.array([h["value"] for h in history])
        return gp_fit(X, y, n_restarts=config.gp_restarts, ard=config.ard, seed=config.seed + len(history))

    for theta in initial_design(config, prior):
        evaluate(theta, "initial", 0)
    trace = []
    if incumbent() is not None:
        trace.append(incumbent()["value"])

    surrogate = None
    previous = None
    stopped = False
    n_iter = 0
    for it in range(1, config.n_max + 1):
        if incumbent() is None:
            break
        surrogate = fit()
        if checkpoint_path is not None:
            surrogate.to_json(checkpoint_path)
        best = incumbent()["value"]
        theta_new, log_ei = maximize_acquisition(surrogate, best, box, config.acquisition_restarts, rng)
        logger.info("BO iteration %d: theta=%s log EI=%.3g", it, theta_new, log_ei)
        evaluate(theta_new, "bo", it)
        n_iter = it
        trace.append(incumbent()["value"] if incumbent() else None)
        if it >= config.min_iterations and previous is not None:
            if float(np.sum((theta_new - previous) ** 2)) <= config.stop_epsilon:
                stopped = True
                break
        previous = theta_new

    inc = incumbent()
    if inc is None:
        raise SDEInferError(f"all {len(history)} Bayesian-optimization evaluations failed")
    surrogate = fit()
    if checkpoint_path is not None:
        surrogate.to_json(checkpoint_path)
    return BOResult(surrogate, history, np.asarray(inc["theta"]), inc["value"], n_iter, stopped, trace)
