"""Simulation-based approximate log-likelihood of an observation series.

One evaluation at ``theta`` simulates a single transition dataset whose
starts cover the observed states, fits the chosen density approximation once
and sums its log-density over every consecutive pair of included
observations.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import replace

import numpy as np

from .cde import CDEConfig
from .errors import EvaluationError, InsufficientWindowSamples, SimulationError, TrainingError
from .iakde import IAKDEConfig
from .simulate import simulate_transition_pairs

__all__ = ["LikelihoodEvaluator", "RunLedger", "log_likelihood", "method_name"]

logger = logging.getLogger(__name__)

WINDOW_FRACTION = 0.05
START_MARGIN = 0.1


def method_name(method):
    if isinstance(method, IAKDEConfig):
        return "iakde"
    if isinstance(method, CDEConfig):
        return "cde"
    return getattr(method, "name", type(method).__name__)


class RunLedger:
    """Append-only CSV audit log of likelihood evaluations."""

    fields = ["stage", "method", "theta", "value", "status", "pairs_M", "seed", "wall_time"]

    def __init__(self, path):
        self.path = os.fspath(path)

    def append(self, stage, method, theta, value, status, pairs_M, seed, wall_time):
        new = not os.path.exists(self.path) or os.path.getsize(self.path) == 0
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(self.fields)
            w.writerow([stage, method, " ".join(repr(float(t)) for t in theta), repr(float(value)),
                        status, pairs_M, seed, f"{wall_time:.6f}"])

    def read(self):
        with open(self.path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            r["theta"] = [float(t) for t in r["theta"].split()]
            r["value"] = float(r["value"])
        return rows


class LikelihoodEvaluator:
    """Callable ``theta -> l~(theta)`` for a model, an observation series and a density method.

    Parameters
    ----------
    method : IAKDEConfig, CDEConfig, or any object with ``fit(dataset)``
        returning an estimator with ``log_density_pairs(z0, z1)``.
    pairs_M : int
        Number of simulated transition pairs per evaluation.
    pair_policy : {"both", "start"}
        Which transitions of the masked series enter the sum; see
        :meth:`ObservationSeries.pair_indices`.
    mask_intervals : sequence of (lo, hi), optional
        When given, each term becomes ``log f(z1 | z0) - log P(x(tau_k) in mask | z0)``,
        the transition density conditioned on the endpoint passing the mask.
        Without it, keeping only pairs whose endpoint is included biases the
        likelihood toward parameters that keep the state inside the mask.
    common_random_numbers : bool
        Reuse the same starts and Brownian increments at every ``theta`` so
        that ``l~`` varies smoothly with ``theta``.  When False the noise
        substream is keyed on ``theta`` as well.
    """

    def __init__(self, model, observations, method, pairs_M=5000, inner_dt=0.001, seed=0,
                 ledger=None, stage="", threads=1, common_random_numbers=True, start_box=None,
                 pair_policy="both", mask_intervals=None):
        if pairs_M < 1:
            raise ValueError("pairs_M must be positive")
        self.model = model
        self.observations = observations
        self.z0, self.z1, self.gap = observations.transition_pairs(pair_policy)
        self.pair_policy = pair_policy
        self.mask_intervals = None if mask_intervals is None else tuple(map(tuple, mask_intervals))
        included = self.z0
        lo, hi = included.min(axis=0), included.max(axis=0)
        width = hi - lo
        if isinstance(method, IAKDEConfig):
            if method.window_epsilon is None:
                eps = WINDOW_FRACTION * np.where(width > 0, width, np.maximum(np.abs(hi), 1.0))
                method = replace(method, window_epsilon=tuple(eps))
            if pairs_M < method.min_window_samples:
                raise ValueError("pairs_M must be at least min_window_samples for IA-KDE")
        if start_box is None:
            pad = START_MARGIN * np.where(width > 0, width, np.maximum(np.abs(hi), 1.0))
            start_box = np.column_stack([lo - pad, hi + pad])
        self.start_box = np.asarray(start_box, dtype=float).reshape(model.state_dim, 2)
        self.method = method
        self.pairs_M = int(pairs_M)
        self.inner_dt = float(inner_dt)
        self.seed = int(seed)
        self.ledger = RunLedger(ledger) if isinstance(ledger, (str, os.PathLike)) else ledger
        self.stage = stage
        self.threads = threads
        self.common_random_numbers = common_random_numbers
        rng = np.random.default_rng([self.seed, 0])
        self.starts = rng.uniform(self.start_box[:, 0], self.start_box[:, 1],
                                  size=(self.pairs_M, model.state_dim))

    @property
    def method_name(self):
        return method_name(self.method)

    @property
    def n_terms(self):
        return self.z0.shape[0]

    def _noise_seed(self, theta):
        if self.common_random_numbers:
            return [self.seed, 1]
        key = np.frombuffer(np.asarray(theta, dtype=np.float64).tobytes(), dtype=np.uint32)
        return [self.seed, 1, *key.tolist()]

    def simulate(self, theta):
        return simulate_transition_pairs(self.model, theta, self.starts, self.gap, self.inner_dt,
                                         self._noise_seed(theta), threads=self.threads)

    def density(self, theta):
        """Fitted transition-density estimator at ``theta``."""
        return self.method.fit(self.simulate(theta))

    def terms(self, theta):
        """Per-pair log transition densities."""
        est = self.density(theta)
        out = np.asarray(est.log_density_pairs(self.z0, self.z1), dtype=float)
        if self.mask_intervals is not None:
            out = out - np.asarray(est.log_mask_mass_pairs(self.z0, self.mask_intervals), dtype=float)
        return out

    def log_likelihood(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        t0 = time.perf_counter()
        try:
            value = float(np.sum(self.terms(theta)))
            if not np.isfinite(value):
                raise ValueError(f"non-finite log-likelihood {value}")
        except (SimulationError, InsufficientWindowSamples, TrainingError, ValueError) as exc:
            self._record(theta, float("nan"), "failed", time.perf_counter() - t0)
            raise EvaluationError(theta, exc) from exc
        self._record(theta, value, "ok", time.perf_counter() - t0)
        return value

    __call__ = log_likelihood

    def _record(self, theta, value, status, wall):
        logger.debug("%s l(%s) = %s [%s, %.3fs]", self.method_name, theta, value, status, wall)
        if self.ledger is not None:
            self.ledger.append(self.stage, self.method_name, theta, value, status, self.pairs_M,
                               self.seed, wall)


def log_likelihood(evaluator, theta):
    return evaluator.log_likelihood(theta)
