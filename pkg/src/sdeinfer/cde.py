"""Conditional density estimation with a mixture density network.

``f(z1 | z0) = sum_j w_j(z0) prod_d N(z1_d; mu_jd(z0), sigma_jd(z0)^2)`` where
the weights, means and log-scales are the outputs of a small tanh network of
``z0``.  Training minimizes the mean negative log-likelihood over the
simulated pairs with minibatch Adam, early-stopped on a validation split.
Gradients are analytic.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import TrainingError
from .models import gaussian_interval_mass

__all__ = ["CDEConfig", "ConditionalDensityModel", "cde_fit", "cde_log_density", "CDEDataWarning"]

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)
_LOGSCALE_CLIP = 10.0


class CDEDataWarning(UserWarning):
    """Training set is small relative to the number of network weights."""


@dataclass(frozen=True)
class CDEConfig:
    n_components: int = 5
    hidden_widths: tuple = (32, 32)
    max_epochs: int = 300
    learning_rate: float = 3e-3
    batch_size: int = 256
    early_stop_patience: int = 25
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(h) for h in self.hidden_widths))
        if self.n_components < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("n_components, max_epochs and batch_size must be positive")
        if any(h < 1 for h in self.hidden_widths):
            raise ValueError("hidden widths must be positive")
        if not self.learning_rate > 0 or self.early_stop_patience < 1:
            raise ValueError("learning_rate and early_stop_patience must be positive")
        if not 0 < self.validation_fraction < 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5)")

    def fit(self, dataset):
        return cde_fit(dataset, self)


def _layer_sizes(D, cfg):
    K = cfg.n_components
    return [D, *cfg.hidden_widths, K + 2 * K * D]


def _init_params(D, cfg, rng):
    sizes = _layer_sizes(D, cfg)
    params = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        W = rng.normal(0.0, (0.1 if last else 1.0) / math.sqrt(a), size=(a, b))
        bias = np.zeros(b)
        if last:
            K = cfg.n_components
            # spread component means over the standardized target range
            bias[K : K + K * D] = np.repeat(np.linspace(-1.0, 1.0, K) if K > 1 else [0.0], D)
        params += [W, bias]
    return params


def _split_head(out, K, D):
    n = out.shape[0]
    logits = out[:, :K]
    mu = out[:, K : K + K * D].reshape(n, K, D)
    s = out[:, K + K * D :].reshape(n, K, D)
    return logits, mu, s


def _forward(params, x, K, D):
    hs = [x]
    h = x
    for W, b in zip(params[0:-2:2], params[1:-2:2]):
        h = np.tanh(h @ W + b)
        hs.append(h)
    out = h @ params[-2] + params[-1]
    return hs, _split_head(out, K, D)


def _row_loglik(head, y):
    logits, mu, s_raw = head
    s = np.clip(s_raw, -_LOGSCALE_CLIP, _LOGSCALE_CLIP)
    lw = logits - logsumexp(logits, axis=1, keepdims=True)
    z = (y[:, None, :] - mu) * np.exp(-s)
    comp = -0.5 * np.sum(z**2, axis=2) - np.sum(s, axis=2) - y.shape[1] * _LOG_SQRT_2PI
    a = lw + comp
    ll = logsumexp(a, axis=1)
    return ll, (lw, z, s, s_raw, a, ll)


def _loss_and_grad(params, x, y, K, D):
    hs, head = _forward(params, x, K, D)
    ll, (lw, z, s, s_raw, a, _) = _row_loglik(head, y)
    n = x.shape[0]
    r = np.exp(a - ll[:, None])
    d_logits = r - np.exp(lw)
    d_mu = r[:, :, None] * z * np.exp(-s)
    d_s = r[:, :, None] * (z**2 - 1.0)
    d_s[np.abs(s_raw) > _LOGSCALE_CLIP] = 0.0
    dout = -np.concatenate([d_logits, d_mu.reshape(n, -1), d_s.reshape(n, -1)], axis=1) / n

    grads = [None] * len(params)
    n_layers = len(params) // 2
    delta = dout
    for layer in range(n_layers - 1, -1, -1):
        h_in = hs[layer]
        grads[2 * layer] = h_in.T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params[2 * layer].T) * (1.0 - h_in**2)
    return -float(ll.mean()), grads


class ConditionalDensityModel:
    """A trained mixture density network with its standardization constants."""

    def __init__(self, params, config, z0_mean, z0_scale, z1_mean, z1_scale, metadata=None):
        self.params = [np.asarray(p, dtype=float) for p in params]
        self.config = config
        self.z0_mean = np.asarray(z0_mean, dtype=float)
        self.z0_scale = np.asarray(z0_scale, dtype=float)
        self.z1_mean = np.asarray(z1_mean, dtype=float)
        self.z1_scale = np.asarray(z1_scale, dtype=float)
        self.metadata = dict(metadata or {})

    @property
    def state_dim(self):
        return self.z0_mean.shape[0]

    @property
    def n_components(self):
        return self.config.n_components

    def _standardized_head(self, z0):
        x = (np.atleast_2d(np.asarray(z0, dtype=float)) - self.z0_mean) / self.z0_scale
        _, head = _forward(self.params, x, self.n_components, self.state_dim)
        return head

    def components(self, z0):
        """Mixture weights ``(n, K)``, means ``(n, K, D)`` and scales ``(n, K, D)``."""
        logits, mu, s = self._standardized_head(z0)
        w = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        means = mu * self.z1_scale + self.z1_mean
        scales = np.exp(np.clip(s, -_LOGSCALE_CLIP, _LOGSCALE_CLIP)) * self.z1_scale
        return w, means, scales

    def log_density_pairs(self, z0, z1):
        """``log f(z1_i | z0_i)`` row by row."""
        z0 = np.atleast_2d(np.asarray(z0, dtype=float))
        z1 = np.atleast_2d(np.asarray(z1, dtype=float))
        head = self._standardized_head(z0)
        y = (z1 - self.z1_mean) / self.z1_scale
        ll, _ = _row_loglik(head, y)
        return ll - np.sum(np.log(self.z1_scale))

    def log_mask_mass_pairs(self, z0, intervals):
        """``log P(every coordinate of z1 in intervals | z0_i)`` under the mixture, row by row."""
        w, means, scales = self.components(np.atleast_2d(np.asarray(z0, dtype=float)))
        per_component = np.prod(gaussian_interval_mass(means, scales, intervals), axis=2)
        return np.log(np.maximum(np.sum(w * per_component, axis=1), 1e-300))

    def log_density(self, z0, z1):
        """``log f(z1 | z0)`` at a single ``z0`` for one or many ``z1``."""
        z1 = np.asarray(z1, dtype=float)
        z1_2d = z1.reshape(-1, self.state_dim)
        z0_rep = np.repeat(np.asarray(z0, dtype=float).reshape(1, -1), z1_2d.shape[0], axis=0)
        out = self.log_density_pairs(z0_rep, z1_2d)
        return float(out[0]) if z1.ndim <= 1 and z1.size == self.state_dim else out

    def mean(self, z0):
        w, m, _ = self.components(z0)
        return np.einsum("nk,nkd->nd", w, m)

    def variance(self, z0):
        w, m, s = self.components(z0)
        mean = np.einsum("nk,nkd->nd", w, m)
        second = np.einsum("nk,nkd->nd", w, s**2 + m**2)
        return second - mean**2

    def to_dict(self):
        return {
            "kind": "mixture_density_network",
            "config": asdict(self.config),
            "layer_sizes": _layer_sizes(self.state_dim, self.config),
            "params": [p.tolist() for p in self.params],
            "standardization": {
                "z0_mean": self.z0_mean.tolist(),
                "z0_scale": self.z0_scale.tolist(),
                "z1_mean": self.z1_mean.tolist(),
                "z1_scale": self.z1_scale.tolist(),
            },
            "metadata": self.metadata,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict())
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, doc):
        cfg = CDEConfig(**{**doc["config"], "hidden_widths": tuple(doc["config"]["hidden_widths"])})
        st = doc["standardization"]
        return cls(doc["params"], cfg, st["z0_mean"], st["z0_scale"], st["z1_mean"], st["z1_scale"],
                   doc.get("metadata"))

    @classmethod
    def from_json(cls, text_or_path):
        text = text_or_path
        if not isinstance(text, str) or not text.lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


def _scale_of(x):
    s = x.std(axis=0)
    return np.where(s > 0, s, 1.0)


def n_free_parameters(D, cfg):
    sizes = _layer_sizes(D, cfg)
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def cde_fit(dataset, cfg):
    """Fit a :class:`ConditionalDensityModel` to ``dataset``.

    The returned parameters are those with the lowest validation NLL seen,
    including the initialization, so the fit never ends worse than it began.
    """
    z0, z1 = dataset.z0, dataset.z1
    n, D = z0.shape
    K = cfg.n_components
    n_par = n_free_parameters(D, cfg)
    if n < 10 * n_par:
        warnings.warn(
            f"{n} training pairs for {n_par} network weights (recommended >= {10 * n_par})",
            CDEDataWarning,
            stacklevel=2,
        )
    rng = np.random.default_rng(cfg.seed)
    m0, s0 = z0.mean(axis=0), _scale_of(z0)
    m1, s1 = z1.mean(axis=0), _scale_of(z1)
    x_all = (z0 - m0) / s0
    y_all = (z1 - m1) / s1

    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.validation_fraction * n)))
    val, train = perm[:n_val], perm[n_val:]
    if train.size == 0:
        raise TrainingError("dataset too small to hold out a validation split")
    x_tr, y_tr, x_va, y_va = x_all[train], y_all[train], x_all[val], y_all[val]

    params = _init_params(D, cfg, rng)

    def val_nll(p):
        _, head = _forward(p, x_va, K, D)
        return -float(_row_loglik(head, y_va)[0].mean())

    init_nll = val_nll(params)
    best_nll, best_params, best_epoch = init_nll, [p.copy() for p in params], 0
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    stale = 0
    epochs_run = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(train.size)
        for start in range(0, train.size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = _loss_and_grad(params, x_tr[idx], y_tr[idx], K, D)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch}, step {step} "
                    f"(loss={loss}, best validation NLL so far {best_nll:.6g})"
                )
            step += 1
            lr_t = cfg.learning_rate * math.sqrt(1 - b2**step) / (1 - b1**step)
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= b1
                mi += (1 - b1) * g
                vi *= b2
                vi += (1 - b2) * g * g
                p -= lr_t * mi / (np.sqrt(vi) + eps)
        epochs_run = epoch
        current = val_nll(params)
        if not np.isfinite(current):
            raise TrainingError(f"non-finite validation NLL at epoch {epoch}")
        if current < best_nll - 1e-6:
            best_nll, best_params, best_epoch = current, [p.copy() for p in params], epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break

    # report NLL in the original (unstandardized) units
    jac = float(np.sum(np.log(s1)))
    meta = {
        "initial_validation_nll": init_nll + jac,
        "validation_nll": best_nll + jac,
        "best_epoch": best_epoch,
        "epochs_run": epochs_run,
        "n_train": int(train.size),
        "n_validation": int(n_val),
    }
    return ConditionalDensityModel(best_params, cfg, m0, s0, m1, s1, meta)


def cde_log_density(model, z0, z1):
    return model.log_density(z0, z1)
