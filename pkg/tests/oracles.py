"""Independent reference values used across the test suite.

Everything here is computed from closed forms with scipy.stats, never from
sdeinfer itself, so the package is checked against an outside source.
"""

import math

import numpy as np
from scipy import stats


def ou_moments(z0, lam, gap):
    """Exact OU transition for dx = -lam x dt + dbeta."""
    mean = np.asarray(z0, dtype=float) * math.exp(-lam * gap)
    var = (1.0 - math.exp(-2.0 * lam * gap)) / (2.0 * lam)
    return mean, var


def ou_logpdf(z0, z1, lam, gap):
    mean, var = ou_moments(z0, lam, gap)
    return stats.norm.logpdf(z1, loc=mean, scale=math.sqrt(var))


def ou_exact_series(lam, x0, gap, n, rng):
    """Sample an OU path exactly at ``n`` points spaced by ``gap``."""
    x = np.empty(n)
    x[0] = x0
    _, var = ou_moments(0.0, lam, gap)
    for k in range(1, n):
        x[k] = x[k - 1] * math.exp(-lam * gap) + math.sqrt(var) * rng.standard_normal()
    return x


class AnalyticOU:
    """Test-only density "method" returning the exact OU transition density."""

    name = "analytic"

    def fit(self, dataset):
        return _AnalyticFit(float(dataset.theta[0]), dataset.gap_dt)


class _AnalyticFit:
    def __init__(self, lam, gap):
        self.lam, self.gap = lam, gap

    def log_density_pairs(self, z0, z1):
        return ou_logpdf(np.asarray(z0)[:, 0], np.asarray(z1)[:, 0], self.lam, self.gap)


# Hand-solved 2-point GP: k(a, b) = exp(-(a - b)^2 / 2), X = [0, 1], y = [0, 1], no noise.
# K^-1 y = [-a, 1] / (1 - a^2) with a = exp(-1/2); k* = exp(-1/8) (1, 1) at 0.5.
_A = math.exp(-0.5)
GP2_MEAN_AT_HALF = math.exp(-1 / 8) / (1 + _A)
GP2_VAR_AT_HALF = 1 - 2 * math.exp(-1 / 4) / (1 + _A)


def ei_monte_carlo(mu, sigma, best, n, rng):
    """MC estimate and standard error of E[max(l - best, 0)], l ~ N(mu, sigma^2)."""
    draws = np.maximum(mu + sigma * rng.standard_normal(n) - best, 0.0)
    return draws.mean(), draws.std(ddof=1) / math.sqrt(n)
