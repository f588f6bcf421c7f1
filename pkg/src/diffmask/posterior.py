"""Posterior-mean estimates and diffusion posterior sampling.

Conventions: ``x_t = x_0 + sigma * eps`` with unit-variance noise per real
coordinate, the denoised estimate is ``x_hat0 = x_t + sigma^2 * score``, and
``J = I + sigma^2 * d score / d x_t`` is its Jacobian.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .mri import apply_adjoint, apply_forward
from .scores import NoiseSchedule
from .tensor import make_rng, sq_norm, standard_noise_like


class NonFiniteError(FloatingPointError):
    def __init__(self, step, what="iterate"):
        super().__init__(f"non-finite {what} at sampler step {step}")
        self.step = step


def tweedie_denoise(score, x_t, sigma):
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.array(x_t, copy=True)
    return x_t + sigma**2 * score.score(x_t, sigma)


def _denoise_with_vjp(score, x_t, sigma):
    """x_hat0 and a closure for J^T v."""
    s, svjp = score.score_and_vjp(x_t, sigma)
    x_hat = x_t + sigma**2 * s
    return x_hat, lambda v: v + sigma**2 * svjp(v)


def dps_step_gradient(score, x_t, sigma, y, coils):
    """Gradient of ``||A(x_hat0(x_t)) - y||^2`` with respect to x_t."""
    x_hat, jt = _denoise_with_vjp(score, x_t, sigma)
    grid = y.mask.grid
    r = apply_forward(x_hat, coils, grid) - y.data
    return jt(2.0 * apply_adjoint(r, coils, grid))


@dataclass(frozen=True)
class PosteriorMeanConfig:
    gamma: float = 1.0
    jacobian: bool = True  # False treats x_hat0 as constant in the likelihood gradient

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


def posterior_mean(score, x_t, sigma, y, coils, cfg=PosteriorMeanConfig()):
    """One-step estimate of E[x_0 | x_t, y]:

    ``x_t + sigma^2 s(x_t) - gamma * grad_{x_t} ||A(x_hat0) - y||^2``.
    """
    x_hat, jt = _denoise_with_vjp(score, x_t, sigma)
    if cfg.gamma == 0:
        return x_hat
    grid = y.mask.grid
    g = 2.0 * apply_adjoint(apply_forward(x_hat, coils, grid) - y.data, coils, grid)
    if cfg.jacobian:
        g = jt(g)
    return x_hat - cfg.gamma * g


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 100
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    s_churn: float = 0.0
    rho: float = 10.0
    seed: int = 0
    schedule_exponent: float = 7.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one step")
        if self.s_churn < 0 or self.rho < 0:
            raise ValueError("s_churn and rho must be non-negative")

    @property
    def schedule(self):
        return NoiseSchedule(self.sigma_min, self.sigma_max, self.steps, self.schedule_exponent)

    @property
    def alpha(self):
        return min(self.s_churn / self.steps, np.sqrt(2.0) - 1.0)


def sample_posterior(score, y, coils, cfg, shape=None, dtype=complex, x_init=None, trajectory=None):
    """Stochastic Euler sampler with churn and a normalized DPS correction.

    Per step ``i = N..1``: raise the noise level to ``(1 + alpha) sigma_i``
    by adding fresh noise, take the denoised estimate, an Euler step of the
    probability-flow ODE down to ``sigma_{i-1}``, then subtract
    ``rho / ||y - A x_hat0|| * grad ||A x_hat0 - y||^2``. The correction is
    skipped when the residual norm is below 1e-12, or when ``y`` is None.

    ``trajectory``, if given, is a list that receives one
    ``(step, sigma, ||x_hat0||, residual_norm)`` tuple per step.
    """
    sig = cfg.schedule.sigmas()
    rng = make_rng(cfg.seed)
    if x_init is None:
        if shape is None:
            if y is None:
                raise ValueError("need y, shape or x_init")
            shape = y.data.shape[1:]
        x = sig[0] * standard_noise_like(rng, np.zeros(shape, dtype=dtype))
    else:
        x = np.array(x_init, copy=True)
    grid = None if y is None else y.mask.grid
    alpha = cfg.alpha
    N = cfg.steps
    for k in range(N):
        step = N - k
        s_cur, s_next = sig[k], sig[k + 1]
        z = standard_noise_like(rng, x)
        s_hat = s_cur + alpha * s_cur
        if alpha > 0:
            x = x + np.sqrt(s_hat**2 - s_cur**2) * z
        s, svjp = score.score_and_vjp(x, s_hat)
        x_hat0 = x + s_hat**2 * s
        x_next = x + (s_hat - s_next) * s_hat * s
        res_norm = 0.0
        if y is not None and cfg.rho > 0:
            r = apply_forward(x_hat0, coils, grid) - y.data
            res_norm = np.sqrt(sq_norm(r))
            if res_norm >= 1e-12:
                g = 2.0 * apply_adjoint(r, coils, grid)
                g = g + s_hat**2 * svjp(g)
                x_next = x_next - (cfg.rho / res_norm) * g
        if not np.all(np.isfinite(x_next)):
            raise NonFiniteError(step)
        if trajectory is not None:
            trajectory.append((step, float(s_hat), float(np.sqrt(sq_norm(x_hat0))), float(res_norm)))
        x = x_next
    return x


def write_trajectory(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "sigma", "x0_norm", "residual_norm"])
        w.writerows(rows)


@dataclass
class LinearGaussianModel:
    """x_0 ~ N(mean, cov) in R^d, y = H x_0 + N(0, noise_var I), x_t = x_0 + N(0, sigma^2 I).

    Everything is Gaussian, so the conditional score of p_t(x_t | y) and the
    posterior mean E[x_0 | x_t, y] both have closed forms.
    """

    mean: np.ndarray
    cov: np.ndarray
    H: np.ndarray
    noise_var: float

    def posterior_given_y(self, y):
        """Mean and covariance of p(x_0 | y)."""
        S = self.H @ self.cov @ self.H.T + self.noise_var * np.eye(self.H.shape[0])
        K = np.linalg.solve(S, self.H @ self.cov).T
        m = self.mean + K @ (y - self.H @ self.mean)
        C = self.cov - K @ self.H @ self.cov
        return m, 0.5 * (C + C.T)

    def conditional_score(self, x_t, y, sigma):
        """grad_{x_t} log p_t(x_t | y), with p_t(x_t | y) = N(m_y, C_y + sigma^2 I)."""
        m, C = self.posterior_given_y(y)
        return -np.linalg.solve(C + sigma**2 * np.eye(len(m)), x_t - m)

    def prior_score(self, x_t, sigma):
        return -np.linalg.solve(self.cov + sigma**2 * np.eye(len(self.mean)), x_t - self.mean)

    def exact_posterior_mean(self, x_t, y, sigma):
        """E[x_0 | x_t, y] by conditioning on both observations jointly (information form)."""
        d = len(self.mean)
        prec = np.linalg.inv(self.cov) + np.eye(d) / sigma**2 + self.H.T @ self.H / self.noise_var
        rhs = np.linalg.solve(self.cov, self.mean) + x_t / sigma**2 + self.H.T @ y / self.noise_var
        return np.linalg.solve(prec, rhs)
