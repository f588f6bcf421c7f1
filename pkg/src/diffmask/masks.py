"""Learning k-space sampling distributions through one-step posterior means.

Each k-space site (a column for LINE patterns, a pixel for POINT patterns)
has a logit. Sigmoid probabilities are rescaled to mean 1/R, hard masks are
drawn with the Gumbel straight-through estimator, and the logits follow Adam
on the squared error of the measurement-conditioned Tweedie estimate

    x_tilde = x_hat0 - gamma * grad_{x_t} ||P F x_hat0 - P F x_0||^2.

Training uses the coil-free operator P F; validation reconstructs with the
full multi-coil sampler.
"""

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .mri import (
    KINDS,
    LINE,
    BinaryMask,
    CoilSet,
    acs_sites,
    forward,
    grid_to_sites,
    site_shape,
    sites_to_grid,
)
from .optim import Adam
from .posterior import SamplerConfig, sample_posterior
from .scores import SigmaSampler
from .tensor import fft2c, gaussian_complex, ifft2c, make_rng, sq_norm, standard_noise_like

THETA_MAGIC = b"DMTHETA"
THETA_VERSION = 1
VAL_SEED_OFFSET = 7_919


@dataclass
class MaskParams:
    kind: str
    h: int
    w: int
    target_R: float
    acs_width: int = 16
    tau: float = 1.0
    theta: np.ndarray = None
    val_error: float = None  # set on snapshots returned by learn_mask

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        if not self.target_R > 1:
            raise ValueError("target_R must exceed 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        shape = site_shape(self.kind, self.h, self.w)
        if self.theta is None:
            self.theta = np.zeros(shape)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != shape:
            raise ValueError(f"theta has shape {self.theta.shape}, expected {shape}")

    def copy(self):
        return replace(self, theta=self.theta.copy())

    @property
    def acs(self):
        return acs_sites(self.kind, self.h, self.w, self.acs_width)

    def probs(self):
        return renormalize_probs(self)


def _renorm(theta, R):
    """Probabilities with mean 1/R and a closure mapping dL/dp to dL/dtheta."""
    s = expit(theta)
    n = s.size
    pbar = s.mean()
    if pbar >= 1.0 / R:
        p = s / (pbar * R)

        def vjp(a):
            ds = a / (pbar * R) - np.sum(a * s) / (pbar**2 * R * n)
            return ds * s * (1 - s)

    else:
        c = (R - 1) / (R - pbar * R)
        dc = (R - 1) / (R * (1 - pbar) ** 2)
        p = 1 - c * (1 - s)

        def vjp(a):
            ds = c * a - np.sum(a * (1 - s)) * dc / n
            return ds * s * (1 - s)

    return np.clip(p, 0.0, 1.0), vjp


def renormalize_probs(params):
    """Rescale sigmoid(theta) so the mean keep-probability is exactly 1/R."""
    return _renorm(params.theta, params.target_R)[0]


def _gumbel_relax(probs, tau, g1, g2):
    """Relaxed sample y, hard sample z = 1{y >= 0.5}, and dy/dp."""
    probs = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore"):
        lp = np.log(probs)
        lq = np.log1p(-probs)
    logit = (lp + g1 - lq - g2) / tau
    y = expit(logit)
    z = (y >= 0.5).astype(float)
    interior = (probs > 0) & (probs < 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        dy = np.where(interior, y * (1 - y) / tau * (1 / probs + 1 / (1 - probs)), 0.0)
    y = np.where(probs >= 1, 1.0, np.where(probs <= 0, 0.0, y))
    z = np.where(probs >= 1, 1.0, np.where(probs <= 0, 0.0, z))
    return z, y, dy


def gumbel_st_sample(probs, tau, rng):
    """Hard Bernoulli(p) draws via the Gumbel-max rule and the straight-through factor dy/dp."""
    probs = np.asarray(probs, dtype=float)
    g1 = rng.gumbel(size=probs.shape)
    g2 = rng.gumbel(size=probs.shape)
    z, _, dy = _gumbel_relax(probs, tau, g1, g2)
    return z, dy


def apply_acs(z, acs_width, kind):
    """Force the calibration sites to 1. Forced sites carry no gradient."""
    z = np.array(z, dtype=float, copy=True)
    h, w = (1, z.shape[0]) if kind == LINE else z.shape
    z[acs_sites(kind, h, w, acs_width)] = 1.0
    return z


def sample_mask(params, rng):
    """Hard mask drawn from the learned distribution, calibration region forced."""
    z, _ = gumbel_st_sample(params.probs(), params.tau, rng)
    return BinaryMask(params.kind, params.h, params.w, z > 0.5, params.acs_width)


def top_mask(params, n_keep):
    """Deterministic mask keeping the ``n_keep`` most probable sites (calibration counted)."""
    acs = params.acs
    p = np.where(acs, np.inf, params.probs()).ravel()
    if not acs.sum() <= n_keep <= p.size:
        raise ValueError("n_keep must cover the calibration region and fit the grid")
    order = np.argsort(-p, kind="stable")
    keep = np.zeros(p.size, dtype=bool)
    keep[order[:n_keep]] = True
    return BinaryMask(params.kind, params.h, params.w, keep.reshape(acs.shape), params.acs_width)


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-2
    gamma: float = 1.0
    tau: float = 1.0
    p_mean: float = -1.2
    p_std: float = 1.2
    fixed_sigma: float = None
    noise_std: float = 0.0
    seed: int = 0
    jacobian: bool = True
    val_every: int = 1
    val_steps: int = 100
    val_rho: float = 10.0
    val_s_churn: float = 0.0

    @property
    def sigma_sampler(self):
        return SigmaSampler(self.p_mean, self.p_std)


@dataclass
class StepDraws:
    """All randomness of one training step, so it can be frozen for gradient checks."""

    sigma: float
    noise: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    kspace_noise: np.ndarray = None


def draw_step(params, shape, cfg, rng):
    sigma = cfg.fixed_sigma if cfg.fixed_sigma is not None else float(cfg.sigma_sampler.sample(rng))
    noise = standard_noise_like(rng, np.zeros(shape, dtype=complex))
    sites = params.theta.shape
    g1 = rng.gumbel(size=sites)
    g2 = rng.gumbel(size=sites)
    kn = gaussian_complex(rng, *shape, cfg.noise_std) if cfg.noise_std > 0 else None
    return StepDraws(float(sigma), noise, g1, g2, kn)


@dataclass
class StepResult:
    loss: float
    grad: np.ndarray
    mask: np.ndarray  # sites actually used in the forward pass (calibration forced)
    x_tilde: np.ndarray = field(repr=False, default=None)


def mask_loss_and_grad(params, score, x0, draws, cfg, relaxed=False):
    """Loss ``||x_0 - x_tilde||^2`` and its gradient with respect to theta.

    With ``relaxed=False`` the forward pass uses the hard mask and the
    gradient is the straight-through surrogate; with ``relaxed=True`` the
    soft Gumbel sample replaces the hard one and the gradient is exact.
    """
    probs, p_vjp = _renorm(params.theta, params.target_R)
    z, y, dy = _gumbel_relax(probs, params.tau, draws.g1, draws.g2)
    acs = params.acs
    m = np.where(acs, 1.0, y if relaxed else z)
    grid = np.array(sites_to_grid(params.kind, params.h, m))

    sigma = draws.sigma
    x_t = x0 + sigma * draws.noise
    s, svjp = score.score_and_vjp(x_t, sigma)
    x_hat = x_t + sigma**2 * s
    e = fft2c(x_hat - x0)
    if draws.kspace_noise is not None:
        e = e - draws.kspace_noise
    b = 2.0 * ifft2c(grid * e)
    g = b + sigma**2 * svjp(b) if cfg.jacobian else b
    x_tilde = x_hat - cfg.gamma * g
    diff = x_tilde - x0
    loss = sq_norm(diff)

    # g = J^T b(m) with b linear in m, so dL/db = J dL/dg.
    u = -2.0 * cfg.gamma * diff
    if cfg.jacobian and cfg.gamma != 0:
        u = u + sigma**2 * score.score_jvp(x_t, sigma, u)
    dgrid = 2.0 * np.real(np.conj(fft2c(u)) * e)
    dm = np.where(acs, 0.0, grid_to_sites(params.kind, dgrid))
    grad = p_vjp(dm * dy)
    return StepResult(loss, grad, m, x_tilde)


def training_step(params, score, x0, cfg, opt, rng):
    """One Adam step on theta at batch size 1; returns the loss."""
    draws = draw_step(params, x0.shape, cfg, rng)
    res = mask_loss_and_grad(params, score, x0, draws, cfg)
    if not np.isfinite(res.loss) or not np.all(np.isfinite(res.grad)):
        raise FloatingPointError(
            f"non-finite training loss (sigma={draws.sigma:.4g}, mask density={res.mask.mean():.3f})"
        )
    opt.step([res.grad])
    return res.loss


def validate(params, val_set, score, cfg, coils=None):
    """Mean squared reconstruction error over ``val_set`` with fixed validation seeds."""
    rng = make_rng(cfg.seed + VAL_SEED_OFFSET)
    errs = []
    for i, x in enumerate(val_set):
        c = coils if coils is not None else CoilSet.single(*x.shape)
        mask = sample_mask(params, rng)
        y = forward(x, c, mask)
        scfg = SamplerConfig(
            steps=cfg.val_steps,
            rho=cfg.val_rho,
            s_churn=cfg.val_s_churn,
            seed=cfg.seed + VAL_SEED_OFFSET + i,
        )
        rec = sample_posterior(score, y, c, scfg)
        errs.append(sq_norm(rec - x) / x.size)
    return float(np.mean(errs))


def learn_mask(train_set, val_set, score, params, cfg, coils=None, log=None):
    """Train the sampling distribution and return the best-validation snapshot.

    Runs ``cfg.epochs`` shuffled passes over ``train_set`` at batch size 1.
    Every ``cfg.val_every`` epochs (and after the last) the current
    distribution is validated; the logits with the lowest validation error
    are returned. Without validation images the final logits are returned.
    ``log`` (a list) receives ``(iteration, loss, epoch, val_error)`` rows,
    with ``val_error`` None on iterations that were not validated.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    params = replace(params.copy(), tau=cfg.tau)
    if cfg.epochs == 0:
        return params
    rng = make_rng(cfg.seed)
    opt = Adam([params.theta], lr=cfg.lr)
    best, best_err = params.copy(), np.inf
    it = 0
    for epoch in range(cfg.epochs):
        for j in rng.permutation(len(train_set)):
            loss = training_step(params, score, train_set[j], cfg, opt, rng)
            it += 1
            if log is not None:
                log.append((it, loss, epoch, None))
        last = epoch == cfg.epochs - 1
        if val_set and ((epoch + 1) % cfg.val_every == 0 or last):
            err = validate(params, val_set, score, cfg, coils)
            if log is not None:
                log[-1] = (it, log[-1][1], epoch, err)
            if err < best_err:
                best, best_err = params.copy(), err
    if not val_set:
        return params
    return replace(best, val_error=best_err)


def write_train_log(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss", "epoch", "val_error"])
        for it, loss, epoch, err in rows:
            w.writerow([it, repr(float(loss)), epoch, "" if err is None else repr(float(err))])


def theta_to_bytes(params):
    kind = KINDS.index(params.kind)
    head = THETA_MAGIC + struct.pack(
        "<IBIIdId", THETA_VERSION, kind, params.h, params.w, params.target_R, params.acs_width, params.tau
    )
    return head + np.ascontiguousarray(params.theta, dtype="<f8").tobytes()


def theta_from_bytes(data):
    if data[: len(THETA_MAGIC)] != THETA_MAGIC:
        raise ValueError("not a theta checkpoint")
    fmt = "<IBIIdId"
    off = len(THETA_MAGIC)
    version, kind, h, w, R, acs, tau = struct.unpack_from(fmt, data, off)
    if version != THETA_VERSION:
        raise ValueError(f"unsupported theta version {version}")
    off += struct.calcsize(fmt)
    kind = KINDS[kind]
    shape = site_shape(kind, h, w)
    theta = np.frombuffer(data, "<f8", int(np.prod(shape)), off).reshape(shape).copy()
    if off + theta.nbytes != len(data):
        raise ValueError("trailing bytes in theta checkpoint")
    return MaskParams(kind, h, w, R, acs, tau, theta)


def save_theta(params, path):
    Path(path).write_bytes(theta_to_bytes(params))


def load_theta(path):
    return theta_from_bytes(Path(path).read_bytes())
