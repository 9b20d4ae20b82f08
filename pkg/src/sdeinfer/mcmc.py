"""Random-walk Metropolis-Hastings on the surrogate posterior."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = ["MCMCConfig", "PosteriorChain", "mh_sample", "surrogate_log_target", "TuningWarning"]

logger = logging.getLogger(__name__)

ACCEPTANCE_RANGE = (0.05, 0.7)


class TuningWarning(UserWarning):
    """Post burn-in acceptance rate outside the healthy range."""


@dataclass(frozen=True)
class MCMCConfig:
    """Random-walk Metropolis settings.

    ``proposal_scales=None`` starts from 0.2 x the standard deviation of a
    uniform distribution on ``support_box`` (or 0.2 per coordinate if no box
    is given).  With ``adapt=True`` the scales are re-estimated twice during
    burn-in (at its midpoint and at its end) from the draws of that stage as
    ``2.38 / sqrt(d)`` x the chain standard deviation, then frozen.
    """

    n_steps: int = 20000
    burn_in: int = 5000
    proposal_scales: tuple = None
    init: tuple = None
    thin: int = 1
    seed: int = 0
    adapt: bool = True
    support_box: tuple = None

    def __post_init__(self):
        if self.n_steps < 1 or self.thin < 1:
            raise ValueError("n_steps and thin must be positive")
        if not 0 <= self.burn_in < self.n_steps:
            raise ValueError("burn_in must lie in [0, n_steps)")
        if self.proposal_scales is not None and np.any(np.asarray(self.proposal_scales) <= 0):
            raise ValueError("proposal scales must be positive")


@dataclass
class PosteriorChain:
    draws: np.ndarray
    log_targets: np.ndarray
    acceptance_rate: float
    n_accepted: int = 0
    n_proposed: int = 0
    proposal_scales: np.ndarray = field(default=None)

    def __len__(self):
        return self.draws.shape[0]

    def mean(self):
        return self.draws.mean(axis=0)

    def variance(self):
        return self.draws.var(axis=0, ddof=1)

    def central_interval(self, level=0.9):
        a = 100 * (1 - level) / 2
        return np.percentile(self.draws, [a, 100 - a], axis=0).T

    def summary(self):
        ci = self.central_interval()
        return {
            "n_draws": len(self),
            "mean": self.mean().tolist(),
            "variance": self.variance().tolist(),
            "p05": ci[:, 0].tolist(),
            "p50": np.median(self.draws, axis=0).tolist(),
            "p95": ci[:, 1].tolist(),
            "acceptance_rate": self.acceptance_rate,
        }

    def to_csv(self, path, names=None):
        d = self.draws.shape[1]
        names = list(names or [f"theta{i}" for i in range(d)])
        data = np.column_stack([np.arange(len(self)), self.draws, self.log_targets])
        np.savetxt(path, data, delimiter=",", header=",".join(["draw", *names, "log_target"]),
                   comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 1:-1], data[:, -1], float("nan"))


def mh_sample(log_target, cfg):
    """Gaussian random-walk Metropolis from ``cfg.init``.

    Burn-in draws are discarded and the remainder thinned.  The acceptance
    rate reported is that of the post burn-in proposals.
    """
    if cfg.init is None:
        raise ValueError("MCMCConfig.init is required")
    x = np.asarray(cfg.init, dtype=float).reshape(-1)
    d = x.size
    lp = float(log_target(x))
    if not np.isfinite(lp):
        raise ValueError(f"log target is not finite at the initial point {x.tolist()}")
    if cfg.proposal_scales is not None:
        scales = np.broadcast_to(np.asarray(cfg.proposal_scales, dtype=float), (d,)).copy()
    elif cfg.support_box is not None:
        box = np.asarray(cfg.support_box, dtype=float).reshape(d, 2)
        scales = 0.2 * (box[:, 1] - box[:, 0]) / math.sqrt(12.0)
    else:
        scales = np.full(d, 0.2)

    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_steps
    draws = np.empty((n, d))
    lps = np.empty(n)
    accepted = np.zeros(n, dtype=bool)
    half = cfg.burn_in // 2
    stage_ends = {half, cfg.burn_in} if cfg.adapt and cfg.burn_in >= 20 else set()
    stage_start = 0
    for i in range(n):
        if i in stage_ends and i - stage_start >= 10:
            sd = draws[stage_start:i].std(axis=0)
            scales = np.where(sd > 0, 2.38 / math.sqrt(d) * sd, 0.5 * scales)
            stage_start = i
        prop = x + scales * rng.standard_normal(d)
        lp_prop = float(log_target(prop))
        if lp_prop > -np.inf and math.log(rng.uniform()) < lp_prop - lp:
            x, lp = prop, lp_prop
            accepted[i] = True
        draws[i] = x
        lps[i] = lp

    keep = slice(cfg.burn_in, n, cfg.thin)
    post = accepted[cfg.burn_in :]
    rate = float(post.mean()) if post.size else float("nan")
    if not ACCEPTANCE_RANGE[0] <= rate <= ACCEPTANCE_RANGE[1]:
        warnings.warn(f"MH acceptance rate {rate:.3f} outside {ACCEPTANCE_RANGE}; consider retuning",
                      TuningWarning, stacklevel=2)
    return PosteriorChain(draws[keep].copy(), lps[keep].copy(), rate, int(post.sum()), int(post.size),
                          scales)


def surrogate_log_target(surrogate, prior, box=None):
    """``theta -> mu_GP(theta) + log p(theta)``; ``-inf`` outside the prior support.

    ``box`` (rows ``(lo, hi)``) optionally restricts the target further, e.g.
    to the region where a refined surrogate has design points.
    """
    box = None if box is None else np.asarray(box, dtype=float)

    def log_target(theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if box is not None and (np.any(theta < box[:, 0]) or np.any(theta > box[:, 1])):
            return -np.inf
        lp = prior.logpdf(theta)
        if lp == -np.inf:
            return -np.inf
        return float(surrogate.mean(theta[None, :])[0]) + lp

    return log_target
