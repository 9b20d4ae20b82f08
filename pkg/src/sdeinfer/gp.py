"""Zero-mean Gaussian-process regression with an (ARD) RBF kernel.

Targets are optionally standardized, which amounts to a constant prior mean
equal to the sample mean of the targets.  Posterior moments::

    mu(x*)  = k(x*, X) (K + s2 I)^-1 y
    var(x*) = k(x*, x*) - k(x*, X) (K + s2 I)^-1 k(X, x*)
"""

from __future__ import annotations

import json
import logging
import math

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import GPFitError

__all__ = ["GPSurrogate", "gp_fit", "gp_predict", "rbf_kernel", "deduplicate"]

logger = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
NOISE_FLOOR = 1e-8
DUPLICATE_TOL = 1e-10


def rbf_kernel(A, B, lengthscales, variance):
    A = np.atleast_2d(A) / lengthscales
    B = np.atleast_2d(B) / lengthscales
    sq = np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :] - 2.0 * A @ B.T
    return variance * np.exp(-0.5 * np.maximum(sq, 0.0))


def deduplicate(X, y, tol=DUPLICATE_TOL):
    """Merge inputs closer than ``tol`` (Euclidean), averaging their targets."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    groups = []
    for i in range(X.shape[0]):
        for g in groups:
            if np.linalg.norm(X[g[0]] - X[i]) < tol:
                g.append(i)
                break
        else:
            groups.append([i])
    Xd = np.array([X[g[0]] for g in groups])
    yd = np.array([y[g].mean() for g in groups])
    return Xd, yd


def _cholesky(K):
    n = K.shape[0]
    scale = max(float(np.mean(np.diag(K))), 1e-300)
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(K + jitter * scale * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            continue
    return None, None


def _near_duplicates(X, k=5):
    d = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=2)
    iu = np.triu_indices(X.shape[0], 1)
    order = np.argsort(d[iu])[:k]
    return [(int(iu[0][o]), int(iu[1][o]), float(d[iu][o])) for o in order]


def _standardization(y, normalize_y):
    if not normalize_y:
        return 0.0, 1.0
    sd = float(y.std())
    return float(y.mean()), (sd if sd > 0 else 1.0)


class GPSurrogate:
    """A fitted GP over parameter space.  Immutable after construction."""

    def __init__(self, X, y, lengthscales, kernel_variance, noise_variance, normalize_y=True):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y must have the same number of rows")
        self.X = X
        self.y = y
        self.lengthscales = np.broadcast_to(np.asarray(lengthscales, dtype=float), (X.shape[1],)).copy()
        self.kernel_variance = float(kernel_variance)
        self.noise_variance = float(noise_variance)
        if np.any(self.lengthscales <= 0) or self.kernel_variance <= 0 or self.noise_variance < 0:
            raise ValueError("lengthscales and kernel variance must be positive, noise nonnegative")
        self.normalize_y = normalize_y
        self.y_mean, self.y_scale = _standardization(y, normalize_y)
        self.y_std = (y - self.y_mean) / self.y_scale

        K = rbf_kernel(X, X, self.lengthscales, self.kernel_variance)
        K[np.diag_indices_from(K)] += self.noise_variance
        chol, jitter = _cholesky(K)
        if chol is None:
            raise GPFitError(f"covariance not positive definite after jitter; closest input pairs "
                             f"(i, j, distance): {_near_duplicates(X)}")
        self.jitter = jitter
        self.chol = chol
        self.alpha = cho_solve((chol, True), self.y_std)

    @property
    def dim(self):
        return self.X.shape[1]

    def __len__(self):
        return self.X.shape[0]

    def predict(self, Xs, return_var=True):
        """Posterior mean and variance (original target units) at rows of ``Xs``."""
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        Ks = rbf_kernel(Xs, self.X, self.lengthscales, self.kernel_variance)
        mean = self.y_mean + self.y_scale * (Ks @ self.alpha)
        if not return_var:
            return mean
        v = solve_triangular(self.chol, Ks.T, lower=True)
        var = self.kernel_variance - np.sum(v**2, axis=0)
        var = np.maximum(var, 0.0) * self.y_scale**2
        return mean, var

    def mean(self, Xs):
        return self.predict(Xs, return_var=False)

    def log_marginal_likelihood(self):
        n = len(self)
        return float(-0.5 * self.y_std @ self.alpha - np.sum(np.log(np.diag(self.chol)))
                     - 0.5 * n * math.log(2 * math.pi))

    def to_dict(self):
        return {
            "X": self.X.tolist(),
            "y": self.y.tolist(),
            "lengthscales": self.lengthscales.tolist(),
            "kernel_variance": self.kernel_variance,
            "noise_variance": self.noise_variance,
            "normalize_y": self.normalize_y,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["X"], doc["y"], doc["lengthscales"], doc["kernel_variance"],
                   doc["noise_variance"], doc.get("normalize_y", True))

    @classmethod
    def from_json(cls, text_or_path):
        text = text_or_path
        if not isinstance(text, str) or not text.lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


def _nlml_and_grad(log_params, X, y, ard):
    """Negative log marginal likelihood of standardized targets and its gradient.

    ``log_params = [log l_1..l_m, log s_f^2, log s_n^2]``.
    """
    n, d = X.shape
    m = d if ard else 1
    ls = np.exp(log_params[:m])
    sf2 = math.exp(log_params[m])
    sn2 = math.exp(log_params[m + 1])
    lsv = np.broadcast_to(ls, (d,))
    K0 = rbf_kernel(X, X, lsv, sf2)
    K = K0 + sn2 * np.eye(n)
    try:
        L = np.linalg.cholesky(K + 1e-10 * np.eye(n))
    except np.linalg.LinAlgError:
        return 1e25, np.zeros_like(log_params)
    alpha = cho_solve((L, True), y)
    nll = 0.5 * y @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * n * math.log(2 * math.pi)
    W = cho_solve((L, True), np.eye(n)) - np.outer(alpha, alpha)
    grad = np.empty_like(log_params)
    diff2 = (X[:, None, :] - X[None, :, :]) ** 2
    if ard:
        for j in range(d):
            dK = K0 * diff2[:, :, j] / lsv[j] ** 2
            grad[j] = 0.5 * np.sum(W * dK)
    else:
        dK = K0 * diff2.sum(axis=2) / ls[0] ** 2
        grad[0] = 0.5 * np.sum(W * dK)
    grad[m] = 0.5 * np.sum(W * K0)
    grad[m + 1] = 0.5 * sn2 * np.trace(W)
    return float(nll), grad


def gp_fit(X, y, lengthscales=None, kernel_variance=None, noise_variance=None, optimize=True,
           ard=True, n_restarts=8, normalize_y=True, seed=0, bounds=None):
    """Fit a :class:`GPSurrogate`.

    With ``optimize=True`` the hyperparameters missing from the arguments are
    chosen by maximizing the marginal likelihood (L-BFGS-B in log space, from
    ``n_restarts`` random starts inside the box).  Fixed values passed in are
    held constant.  Near-duplicate inputs are merged first.
    """
    X, y = deduplicate(X, y)
    n, d = X.shape
    if n < 2:
        raise GPFitError("need at least two distinct points to fit a GP")
    if not optimize:
        return GPSurrogate(X, y, 1.0 if lengthscales is None else lengthscales,
                           1.0 if kernel_variance is None else kernel_variance,
                           NOISE_FLOOR if noise_variance is None else noise_variance, normalize_y)

    span = np.ptp(X, axis=0)
    span = np.where(span > 0, span, 1.0)
    m = d if ard else 1
    if bounds is None:
        lo_ls = np.log(0.01 * span) if ard else np.log([0.01 * span.min()])
        hi_ls = np.log(10.0 * span) if ard else np.log([10.0 * span.max()])
        bounds = [*zip(lo_ls, hi_ls), (math.log(1e-2), math.log(1e2)),
                  (math.log(NOISE_FLOOR), math.log(1.0))]
    bounds = [list(b) for b in bounds]
    fixed = {}
    if lengthscales is not None:
        vals = np.log(np.broadcast_to(np.asarray(lengthscales, float), (m,)))
        for j in range(m):
            fixed[j] = vals[j]
    if kernel_variance is not None:
        fixed[m] = math.log(kernel_variance)
    if noise_variance is not None:
        fixed[m + 1] = math.log(max(noise_variance, 1e-300))
    for j, v in fixed.items():
        bounds[j] = [v, v]

    y_mean, y_scale = _standardization(y, normalize_y)
    ys = (y - y_mean) / y_scale
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    starts = [np.clip(np.concatenate([np.log(0.3 * span[:m]) if ard else [math.log(0.3 * span.mean())],
                                      [0.0, math.log(1e-4)]]), lo, hi)]
    starts += [rng.uniform(lo, hi) for _ in range(max(n_restarts - 1, 0))]
    best = None
    for x0 in starts:
        res = minimize(_nlml_and_grad, x0, args=(X, ys, ard), jac=True, method="L-BFGS-B",
                       bounds=bounds)
        if best is None or res.fun < best.fun:
            best = res
    p = best.x
    ls = np.exp(p[:m])
    logger.debug("GP hypers: ls=%s sf2=%.4g sn2=%.4g nlml=%.4g", ls, math.exp(p[m]), math.exp(p[m + 1]),
                 best.fun)
    return GPSurrogate(X, y, np.broadcast_to(ls, (d,)), math.exp(p[m]), math.exp(p[m + 1]), normalize_y)


def gp_predict(surrogate, theta):
    mean, var = surrogate.predict(np.atleast_2d(theta))
    return float(mean[0]), float(var[0])
