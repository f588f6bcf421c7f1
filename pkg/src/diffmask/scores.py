"""Noise schedules and score providers.

A score model exposes ``score(x, sigma)`` (the gradient of log p_sigma at x)
plus vector products with its Jacobian. Arrays may be real or complex; for
complex arrays the real and imaginary parts are independent coordinates and
gradients are returned as ``d/dRe + 1j * d/dIm``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .tensor import real_dim


@dataclass(frozen=True)
class NoiseSchedule:
    """Decreasing noise levels sigma_{t_N} = sigma_max, ..., sigma_{t_0} = sigma_min.

    Uses the polynomial interpolation of Karras et al. with ``exponent``;
    with sigma_t = t the levels double as time points.
    """

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    steps: int = 100
    exponent: float = 7.0

    def sigmas(self):
        if self.steps < 1:
            raise ValueError("need at least one step")
        if not 0 <= self.sigma_min < self.sigma_max:
            raise ValueError("require 0 <= sigma_min < sigma_max")
        frac = np.arange(self.steps + 1) / self.steps
        lo = self.sigma_min ** (1 / self.exponent)
        hi = self.sigma_max ** (1 / self.exponent)
        out = (hi + frac * (lo - hi)) ** self.exponent
        out[0], out[-1] = self.sigma_max, self.sigma_min
        return out


@dataclass(frozen=True)
class SigmaSampler:
    """Log-normal training noise levels: ln sigma ~ N(p_mean, p_std^2)."""

    p_mean: float = -1.2
    p_std: float = 1.2

    def sample(self, rng, size=None):
        return np.exp(self.p_mean + self.p_std * rng.standard_normal(size))


class ScoreModel:
    """Interface shared by the analytic and learned score providers."""

    def score(self, x, sigma):
        raise NotImplementedError

    def score_vjp(self, x, sigma, v):
        """``J^T v`` where J is the Jacobian of ``score(., sigma)`` at x."""
        raise NotImplementedError

    def score_jvp(self, x, sigma, u):
        """``J u``."""
        raise NotImplementedError

    def score_and_vjp(self, x, sigma):
        """Score at x plus a closure computing VJPs at the same point."""
        return self.score(x, sigma), lambda v: self.score_vjp(x, sigma, v)


def _flat_sq(d):
    return float(np.sum(np.abs(d) ** 2))


@dataclass
class GmmPrior(ScoreModel):
    """Isotropic Gaussian mixture sum_k w_k N(mu_k, s_k^2 I).

    The noisy marginal at level sigma is again a mixture with variances
    s_k^2 + sigma^2, so its score and Hessian are available in closed form.
    """

    weights: np.ndarray
    means: np.ndarray  # (K, *shape)
    variances: np.ndarray  # (K,) per real coordinate

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means)
        self.variances = np.asarray(self.variances, dtype=float)
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.variances.shape != (k,):
            raise ValueError("weights, means and variances disagree on component count")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(self.variances < 0):
            raise ValueError("variances must be non-negative")

    @classmethod
    def from_images(cls, images, variance):
        """Equal-weight mixture centered on each image."""
        means = np.stack([np.asarray(im) for im in images])
        k = means.shape[0]
        return cls(np.full(k, 1.0 / k), means, np.full(k, float(variance)))

    @property
    def shape(self):
        return self.means.shape[1:]

    def _terms(self, x, sigma):
        x = np.asarray(x)
        if x.shape != self.shape:
            raise ValueError(f"x has shape {x.shape}, prior expects {self.shape}")
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        v = self.variances + sigma**2
        if np.any(v <= 0):
            raise ValueError("degenerate covariance: sigma = 0 with a zero-variance component")
        d = real_dim(x)
        diffs = x[None] - self.means
        sq = np.array([_flat_sq(diffs[k]) for k in range(len(v))])
        logits = np.log(self.weights) - 0.5 * sq / v - 0.5 * d * np.log(2 * np.pi * v)
        return diffs, v, logits

    def log_density(self, x, sigma):
        _, _, logits = self._terms(x, sigma)
        return float(logsumexp(logits))

    def responsibilities(self, x, sigma):
        _, _, logits = self._terms(x, sigma)
        return np.exp(logits - logsumexp(logits))

    def score(self, x, sigma):
        diffs, v, logits = self._terms(x, sigma)
        r = np.exp(logits - logsumexp(logits))
        coef = (r / v).reshape((-1,) + (1,) * (diffs.ndim - 1))
        return -(coef * diffs).sum(axis=0)

    def score_vjp(self, x, sigma, v):
        # Hessian of log p: sum_k r_k (g_k g_k^T - I/v_k) - s s^T with g_k = -(x - mu_k)/v_k.
        diffs, var, logits = self._terms(x, sigma)
        r = np.exp(logits - logsumexp(logits))
        v = np.asarray(v)
        g = -diffs / var.reshape((-1,) + (1,) * (diffs.ndim - 1))
        s = np.tensordot(r, g, axes=1)
        gv = np.array([np.real(np.vdot(g[k], v)) for k in range(len(r))])
        out = -np.sum(r / var) * v + np.tensordot(r * gv, g, axes=1) - np.real(np.vdot(s, v)) * s
        return out

    score_jvp = score_vjp  # the Hessian is symmetric

    def posterior_mean(self, x, sigma):
        """E[x_0 | x_t = x] from per-component Gaussian conditioning (no score involved)."""
        diffs, v, logits = self._terms(x, sigma)
        r = np.exp(logits - logsumexp(logits))
        x = np.asarray(x)
        comp = [(self.variances[k] * x + sigma**2 * self.means[k]) / v[k] for k in range(len(r))]
        return np.tensordot(r, np.stack(comp), axes=1)

    def sample(self, rng, n):
        ks = rng.choice(len(self.weights), size=n, p=self.weights)
        out = []
        for k in ks:
            mu = self.means[k]
            if np.iscomplexobj(mu):
                z = rng.standard_normal(mu.shape) + 1j * rng.standard_normal(mu.shape)
            else:
                z = rng.standard_normal(mu.shape)
            out.append(mu + np.sqrt(self.variances[k]) * z)
        return out


def gmm_score(prior, x_t, sigma):
    return prior.score(x_t, sigma)


def gmm_score_vjp(prior, x_t, sigma, v):
    return prior.score_vjp(x_t, sigma, v)
