"""Euler-Maruyama integration and transition-pair generation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import SimulationError
from .models import ObservationSeries

__all__ = [
    "SimConfig",
    "Trajectory",
    "TransitionDataset",
    "euler_step",
    "simulate_trajectory",
    "extract_observations",
    "simulate_transition_pairs",
    "row_generator",
]

logger = logging.getLogger(__name__)

MAX_EXCLUDED_FRACTION = 0.05


@dataclass(frozen=True)
class SimConfig:
    dt: float
    n_steps: int
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __len__(self):
        return self.times.shape[0]


def euler_step(model, x, t, theta, dt, noise):
    """One Euler-Maruyama update ``x + f dt + L noise``.

    ``noise`` is the Brownian increment, already distributed as ``N(0, Q dt)``.
    Works on a single state ``(D,)`` or a batch ``(M, D)``.
    """
    x = np.asarray(x, dtype=float)
    noise = np.asarray(noise, dtype=float)
    L = model.L(x, t, theta)
    return x + model.f(x, t, theta) * dt + np.einsum("...dw,...w->...d", L, noise)


def simulate_trajectory(model, theta, x0, t0, cfg):
    """Integrate one path of ``cfg.n_steps`` steps; returns ``n_steps + 1`` states."""
    x = np.asarray(x0, dtype=float).reshape(model.state_dim)
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state must be finite")
    rng = np.random.default_rng(cfg.seed)
    C = model.noise_factor * np.sqrt(cfg.dt)
    increments = rng.standard_normal((cfg.n_steps, model.noise_dim)) @ C.T
    states = np.empty((cfg.n_steps + 1, model.state_dim))
    states[0] = x
    times = t0 + cfg.dt * np.arange(cfg.n_steps + 1)
    for k in range(cfg.n_steps):
        with np.errstate(over="ignore", invalid="ignore"):
            x = euler_step(model, x, times[k], theta, cfg.dt, increments[k])
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at step {k + 1}", state=states[k], step=k + 1)
        states[k + 1] = x
    return Trajectory(times, states)


def extract_observations(trajectory, n_obs=None, stride=None):
    """Evenly strided subsample starting at the first state.

    Give either ``n_obs`` (stride becomes ``len // n_obs``) or ``stride``
    (keeps every ``stride``-th state).
    """
    n = len(trajectory)
    if (n_obs is None) == (stride is None):
        raise ValueError("give exactly one of n_obs or stride")
    if n_obs is not None:
        if n_obs < 1 or n_obs > n:
            raise ValueError(f"cannot take {n_obs} observations from {n} states (stride underflow)")
        stride = n // n_obs
    else:
        if stride < 1:
            raise ValueError("stride must be positive")
        n_obs = (n - 1) // stride + 1
    idx = np.arange(n_obs) * stride
    return ObservationSeries(trajectory.times[idx], trajectory.states[idx])


@dataclass
class TransitionDataset:
    """``M`` simulated pairs ``(z0_i, z1_i)`` separated by ``gap_dt``."""

    theta: np.ndarray
    gap_dt: float
    z0: np.ndarray
    z1: np.ndarray
    n_excluded: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        self.z0 = np.asarray(self.z0, dtype=float)
        self.z1 = np.asarray(self.z1, dtype=float)
        if self.z0.ndim == 1:
            self.z0 = self.z0[:, None]
        if self.z1.ndim == 1:
            self.z1 = self.z1[:, None]
        if self.z0.shape != self.z1.shape or self.z0.shape[0] < 1:
            raise ValueError("z0 and z1 must be nonempty with equal shapes")
        if not self.gap_dt > 0:
            raise ValueError("gap_dt must be positive")

    def __len__(self):
        return self.z0.shape[0]

    @property
    def state_dim(self):
        return self.z0.shape[1]

    def subset(self, idx):
        return TransitionDataset(self.theta, self.gap_dt, self.z0[idx], self.z1[idx])

    def to_csv(self, path):
        d, D = self.theta.size, self.state_dim
        cols = [f"theta{i}" for i in range(d)] + [f"z0_{i}" for i in range(D)] + [f"z1_{i}" for i in range(D)]
        data = np.column_stack([np.tile(self.theta, (len(self), 1)), self.z0, self.z1])
        header = "# gap_dt=%r\n" % self.gap_dt + ",".join(cols)
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            gap = float(fh.readline().split("=", 1)[1])
            cols = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
        d = sum(c.startswith("theta") for c in cols)
        D = (len(cols) - d) // 2
        return cls(data[0, :d], gap, data[:, d : d + D], data[:, d + D :])


def row_generator(seed, row):
    """Independent RNG substream for transition row ``row``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(row,))))


def _n_inner(gap_dt, inner_dt):
    n = int(round(gap_dt / inner_dt))
    if n < 1 or abs(n * inner_dt - gap_dt) > 1e-9 * max(1.0, gap_dt):
        raise ValueError(f"inner_dt={inner_dt} does not divide gap_dt={gap_dt}")
    return n


def _integrate_rows(model, theta, starts, rows, n_inner, inner_dt, seed):
    C = model.noise_factor * np.sqrt(inner_dt)
    W = model.noise_dim
    noise = np.stack([row_generator(seed, int(r)).standard_normal((n_inner, W)) for r in rows])
    noise = noise @ C.T  # (m, n_inner, W)
    x = starts.copy()
    t = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_inner):
            x = euler_step(model, x, t, theta, inner_dt, noise[:, k])
            t += inner_dt
    return x


def simulate_transition_pairs(model, theta, starts, gap_dt, inner_dt, seed, threads=1, chunk=1024):
    """Simulate one Euler-Maruyama endpoint per start row.

    Row ``i`` draws its Brownian increments from its own substream derived
    from ``(seed, i)``, so the result is independent of chunking and thread
    count.  Rows ending non-finite are dropped; more than 5% dropped raises
    :class:`SimulationError`.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    starts = np.asarray(starts, dtype=float)
    if starts.ndim == 1:
        starts = starts[:, None]
    M = starts.shape[0]
    n_inner = _n_inner(gap_dt, inner_dt)
    blocks = [np.arange(a, min(a + chunk, M)) for a in range(0, M, chunk)]

    def work(rows):
        return _integrate_rows(model, theta, starts[rows], rows, n_inner, inner_dt, seed)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    z1 = np.concatenate(parts, axis=0)

    ok = np.all(np.isfinite(z1), axis=1)
    n_bad = int(M - ok.sum())
    if n_bad:
        if n_bad > MAX_EXCLUDED_FRACTION * M:
            bad = np.flatnonzero(~ok)[:5]
            raise SimulationError(
                f"{n_bad} of {M} transition rows blew up at theta={theta.tolist()} "
                f"(first start states: {starts[bad].tolist()})"
            )
        logger.info("excluded %d of %d blown-up transition rows", n_bad, M)
    return TransitionDataset(theta, gap_dt, starts[ok], z1[ok], n_excluded=n_bad)
