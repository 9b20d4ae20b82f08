"""Design points: Latin hypercube sampling and refinement designs from MCMC draws."""

from __future__ import annotations

import logging

import numpy as np
from scipy.stats import qmc

from .errors import EvaluationError, GPFitError
from .gp import gp_fit

__all__ = ["latin_hypercube", "support_box", "refine_design", "refine_surrogate"]

logger = logging.getLogger(__name__)


def latin_hypercube(n, box, rng):
    """``n`` LHS points in ``box`` (rows ``(lo, hi)``): one point per stratum in every dimension."""
    box = np.atleast_2d(np.asarray(box, dtype=float))
    unit = qmc.LatinHypercube(d=box.shape[0], seed=rng).random(n)
    return box[:, 0] + unit * (box[:, 1] - box[:, 0])


def support_box(draws, level=0.9):
    """Per-dimension central interval of the draws (5th/95th percentiles at 90%)."""
    a = 100 * (1 - level) / 2
    return np.percentile(np.atleast_2d(draws), [a, 100 - a], axis=0).T


def refine_design(chain, n_refine, strategy="lhs", seed=0):
    """Choose ``n_refine`` refinement points from a posterior chain.

    ``"lhs"`` spreads a Latin hypercube over the chain's central 90% box;
    ``"random"`` picks distinct chain draws uniformly without replacement.
    """
    draws = np.atleast_2d(chain.draws if hasattr(chain, "draws") else chain)
    if draws.shape[0] == 0:
        raise ValueError("chain is empty")
    if n_refine < 1:
        raise ValueError("n_refine must be positive")
    rng = np.random.default_rng(seed)
    if strategy in ("lhs", "lhs_over_support"):
        return latin_hypercube(n_refine, support_box(draws), rng)
    if strategy in ("random", "random_subsample"):
        unique = np.unique(draws, axis=0)
        if n_refine > unique.shape[0]:
            raise ValueError(f"cannot subsample {n_refine} distinct points from a chain with "
                             f"{unique.shape[0]} distinct draws")
        return unique[np.sort(rng.choice(unique.shape[0], n_refine, replace=False))]
    raise ValueError(f"unknown design strategy '{strategy}'")


def refine_surrogate(coarse, new_points, evaluator, include_coarse=False, gp_options=None):
    """Evaluate ``evaluator`` at ``new_points`` and fit the refined GP.

    Returns ``(surrogate, values)`` where ``values`` holds ``nan`` for failed
    evaluations.  By default only the new points enter the refined GP;
    ``include_coarse=True`` also merges the coarse surrogate's data.
    """
    new_points = np.atleast_2d(np.asarray(new_points, dtype=float))
    if new_points.shape[0] == 0:
        raise ValueError("no refinement points")
    values = np.full(new_points.shape[0], np.nan)
    for i, theta in enumerate(new_points):
        try:
            values[i] = evaluator(theta)
        except EvaluationError as exc:
            logger.warning("refinement evaluation failed: %s", exc)
    ok = np.isfinite(values)
    if ok.sum() < 2:
        raise GPFitError(f"refined surrogate needs at least 2 successful evaluations, got {int(ok.sum())}")
    X, y = new_points[ok], values[ok]
    if include_coarse and coarse is not None:
        X = np.vstack([coarse.X, X])
        y = np.concatenate([coarse.y, y])
    return gp_fit(X, y, **(gp_options or {})), values
