"""Parametric SDE models, parameter priors and observation series.

Models follow ``dx = f(x, t; theta) dt + L(x, t; theta) dbeta`` with Brownian
increments ``dbeta ~ N(0, Q dt)``.  Drift and diffusion callables are
vectorized over leading axes: ``drift`` maps states of shape ``(..., D)`` to
``(..., D)`` and ``diffusion`` maps them to ``(..., D, W)``.
"""

from __future__ import annotations

import importlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError

__all__ = [
    "SDEModel",
    "make_ou_model",
    "make_doublewell_model",
    "get_model",
    "MODEL_REGISTRY",
    "Uniform",
    "Gaussian",
    "Prior",
    "prior_logpdf",
    "ObservationSeries",
    "interval_mask",
    "merge_intervals",
    "gaussian_interval_mass",
    "ou_transition_moments",
    "ou_transition_logpdf",
]


def _as_theta(theta, d):
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != d:
        raise ValueError(f"parameter vector has length {theta.shape[0]}, expected {d}")
    return theta


@dataclass(frozen=True)
class SDEModel:
    """An SDE with drift ``f``, dispersion ``L`` and noise covariance ``Q``."""

    name: str
    state_dim: int
    param_dim: int
    drift: Callable
    diffusion: Callable
    noise_dim: int = 1
    noise_cov: np.ndarray = None
    param_names: tuple = ()

    def __post_init__(self):
        if self.state_dim < 1 or self.param_dim < 1 or self.noise_dim < 1:
            raise ValueError("model dimensions must be positive")
        Q = np.eye(self.noise_dim) if self.noise_cov is None else np.asarray(self.noise_cov, float)
        if Q.shape != (self.noise_dim, self.noise_dim):
            raise ValueError("noise covariance must be W x W")
        if not np.allclose(Q, Q.T):
            raise ValueError("noise covariance must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-12:
            raise ValueError("noise covariance must be positive semidefinite")
        object.__setattr__(self, "noise_cov", Q)
        if not self.param_names:
            names = tuple(f"theta{i + 1}" for i in range(self.param_dim))
            object.__setattr__(self, "param_names", names)

    @property
    def noise_factor(self):
        """Matrix ``C`` with ``C C^T = Q`` (eigen-based so PSD ``Q`` works)."""
        w, V = np.linalg.eigh(self.noise_cov)
        return V * np.sqrt(np.clip(w, 0.0, None))

    def f(self, x, t, theta):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.drift(x, t, _as_theta(theta, self.param_dim)), dtype=float)

    def L(self, x, t, theta):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.diffusion(x, t, _as_theta(theta, self.param_dim)), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + (self.state_dim, self.noise_dim))


def make_ou_model():
    """Ornstein-Uhlenbeck process ``dx = -lambda x dt + dbeta``."""

    def drift(x, t, theta):
        return -theta[0] * x

    def diffusion(x, t, theta):
        return np.ones(x.shape[:-1] + (1, 1))

    return SDEModel("ou", 1, 1, drift, diffusion, param_names=("lambda",))


def make_doublewell_model(power=3):
    """Double-well model ``dx = (t1 x + t2 x^p) dt + sqrt(max(4 - 1.25 x^2, 0)) dbeta``.

    The default ``power=3`` gives wells at ``+-sqrt(-t1/t2)``.  ``power=2``
    is available for completeness but its paths diverge for ``t2 < 0`` as
    soon as the state goes negative.
    """

    def drift(x, t, theta):
        return theta[0] * x + theta[1] * x**power

    def diffusion(x, t, theta):
        return np.sqrt(np.maximum(4.0 - 1.25 * x**2, 0.0))[..., None]

    return SDEModel("doublewell", 1, 2, drift, diffusion, param_names=("theta1", "theta2"))


MODEL_REGISTRY = {"ou": make_ou_model, "doublewell": make_doublewell_model}


def get_model(name):
    """Look up a model by registry name or ``package.module:factory`` plugin path."""
    if name in MODEL_REGISTRY:
        return MODEL_REGISTRY[name]()
    if ":" in name:
        module_name, attr = name.split(":", 1)
        try:
            factory = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot load model plugin '{name}': {exc}") from exc
        model = factory()
        if not isinstance(model, SDEModel):
            raise ConfigError(f"model plugin '{name}' did not return an SDEModel")
        return model
    raise ConfigError(f"unknown model '{name}'; choose from {sorted(MODEL_REGISTRY)} or module:factory")


# --------------------------------------------------------------------------
# priors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"uniform prior needs lo < hi, got ({self.lo}, {self.hi})")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lo) & (x <= self.hi)
        return np.where(inside, -math.log(self.hi - self.lo), -np.inf)

    def sample(self, rng, size):
        return rng.uniform(self.lo, self.hi, size)

    def box(self):
        return self.lo, self.hi


@dataclass(frozen=True)
class Gaussian:
    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError(f"gaussian prior needs sd > 0, got {self.sd}")

    def logpdf(self, x):
        z = (np.asarray(x, dtype=float) - self.mean) / self.sd
        return -0.5 * z**2 - math.log(self.sd) - 0.5 * math.log(2 * math.pi)

    def sample(self, rng, size):
        return rng.normal(self.mean, self.sd, size)

    def box(self):
        return self.mean - 4 * self.sd, self.mean + 4 * self.sd


@dataclass(frozen=True)
class Prior:
    """Independent per-parameter prior with optional hard box constraints.

    ``bounds`` entries are ``(lo, hi)`` with ``None`` meaning unbounded; they
    truncate the factor without renormalizing it.
    """

    factors: tuple
    bounds: tuple = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if self.bounds is None:
            object.__setattr__(self, "bounds", tuple((None, None) for _ in self.factors))
        if len(self.bounds) != len(self.factors):
            raise ValueError("bounds must match the number of prior factors")

    @property
    def dim(self):
        return len(self.factors)

    @classmethod
    def positive(cls, factors):
        return cls(tuple(factors), tuple((0.0, None) for _ in factors))

    def logpdf(self, theta):
        theta = _as_theta(theta, self.dim)
        total = 0.0
        for x, factor, (lo, hi) in zip(theta, self.factors, self.bounds):
            if not np.isfinite(x):
                return -np.inf
            if (lo is not None and x < lo) or (hi is not None and x > hi):
                return -np.inf
            total += float(factor.logpdf(x))
            if total == -np.inf:
                return -np.inf
        return total

    def in_support(self, theta):
        return np.isfinite(self.logpdf(theta))

    def box(self):
        """Finite search box: uniform supports, gaussian +-4 sd, clipped to bounds."""
        out = []
        for factor, (lo, hi) in zip(self.factors, self.bounds):
            a, b = factor.box()
            if lo is not None:
                a = max(a, lo)
            if hi is not None:
                b = min(b, hi)
            out.append((a, b))
        return np.array(out, dtype=float)

    def sample(self, rng, n):
        """Draw ``n`` points from the (truncated) prior by rejection."""
        out = np.empty((0, self.dim))
        while out.shape[0] < n:
            cand = np.column_stack([f.sample(rng, 2 * n) for f in self.factors])
            keep = np.array([self.in_support(c) for c in cand], dtype=bool)
            out = np.vstack([out, cand[keep]])
        return out[:n]


def prior_logpdf(prior, theta):
    return prior.logpdf(theta)


# --------------------------------------------------------------------------
# observations
# --------------------------------------------------------------------------

def interval_mask(states, intervals):
    """Boolean mask of rows whose every coordinate lies in one of ``intervals``.

    ``intervals`` is a sequence of closed ``(lo, hi)`` pairs applied to all
    state dimensions.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    hit = np.zeros(states.shape, dtype=bool)
    for lo, hi in intervals:
        hit |= (states >= lo) & (states <= hi)
    return hit.all(axis=1)


def merge_intervals(intervals):
    """Sorted, disjoint ``(n, 2)`` array covering the union of closed ``intervals``."""
    iv = sorted((float(lo), float(hi)) for lo, hi in intervals)
    out = []
    for lo, hi in iv:
        if hi < lo:
            raise ValueError(f"interval ({lo}, {hi}) has hi < lo")
        if out and lo <= out[-1][1]:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return np.array(out, dtype=float).reshape(-1, 2)


def gaussian_interval_mass(mean, scale, intervals):
    """``P(Y in union of intervals)`` for ``Y ~ N(mean, scale^2)``, elementwise."""
    iv = merge_intervals(intervals)
    mean = np.asarray(mean, dtype=float)[..., None]
    scale = np.asarray(scale, dtype=float)[..., None]
    return np.sum(ndtr((iv[:, 1] - mean) / scale) - ndtr((iv[:, 0] - mean) / scale), axis=-1)


class ObservationSeries:
    """Exact state observations ``x(tau_k)`` with an optional inclusion mask."""

    def __init__(self, times, states, inclusion_mask=None):
        times = np.asarray(times, dtype=float).reshape(-1)
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if states.shape[0] != times.shape[0]:
            raise ValueError("states row count must equal number of times")
        if times.shape[0] > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("observation times must be strictly increasing")
        if inclusion_mask is None:
            inclusion_mask = np.ones(times.shape[0], dtype=bool)
        inclusion_mask = np.asarray(inclusion_mask, dtype=bool).reshape(-1)
        if inclusion_mask.shape != times.shape:
            raise ValueError("inclusion mask must have one entry per observation")
        self.times = times
        self.states = states
        self.inclusion_mask = inclusion_mask

    def __len__(self):
        return self.times.shape[0]

    @property
    def state_dim(self):
        return self.states.shape[1]

    def with_mask(self, mask):
        return ObservationSeries(self.times, self.states, mask)

    def masked_by_intervals(self, intervals):
        return self.with_mask(interval_mask(self.states, intervals))

    def pair_indices(self, policy="both"):
        """Indices ``k`` of the transitions ``k-1 -> k`` that enter the likelihood.

        ``"both"`` keeps a transition when both endpoints are included;
        ``"start"`` keeps it whenever its starting observation is included,
        which conditions on ``x(tau_{k-1})`` only and so avoids selecting on
        the endpoint.
        """
        m = self.inclusion_mask
        if policy == "both":
            return np.flatnonzero(m[1:] & m[:-1]) + 1
        if policy == "start":
            return np.flatnonzero(m[:-1]) + 1
        raise ValueError(f"unknown pair policy '{policy}'")

    def transition_pairs(self, policy="both", gap_tol=1e-9):
        """Return ``(z0, z1, gap)`` for the transitions selected by ``policy``.

        Raises ``ValueError`` if the pairs do not share a common time gap.
        """
        k = self.pair_indices(policy)
        if k.size == 0:
            raise ValueError("no transition between included observations")
        gaps = self.times[k] - self.times[k - 1]
        if np.ptp(gaps) > gap_tol * max(1.0, gaps.max()):
            raise ValueError(
                f"non-uniform observation gaps between included pairs "
                f"(min {gaps.min():.12g}, max {gaps.max():.12g})"
            )
        return self.states[k - 1], self.states[k], float(gaps.mean())

    def included_states(self):
        return self.states[self.inclusion_mask]

    def to_csv(self, path):
        cols = ["time"] + [f"x{i}" for i in range(self.state_dim)] + ["included"]
        data = np.column_stack([self.times, self.states, self.inclusion_mask.astype(int)])
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1:-1], data[:, -1].astype(bool))


def ou_transition_moments(z0, lam, gap):
    """Mean and variance of the OU transition ``x(t + gap) | x(t) = z0``."""
    z0 = np.asarray(z0, dtype=float)
    mean = z0 * np.exp(-lam * gap)
    var = (1.0 - np.exp(-2.0 * lam * gap)) / (2.0 * lam)
    return mean, var


def ou_transition_logpdf(z0, z1, lam, gap):
    """Exact log transition density of ``dx = -lam x dt + dbeta``."""
    mean, var = ou_transition_moments(z0, lam, gap)
    z1 = np.asarray(z1, dtype=float)
    return -0.5 * (z1 - mean) ** 2 / var - 0.5 * np.log(2 * np.pi * var)
