"""Small denoisers trained by denoising score matching.

The network predicts the clean signal, ``D(x_t, sigma) ~ E[x_0 | x_t]``, and
the score follows as ``(D - x_t) / sigma^2``. Two layouts share one code
path: a fully-connected SiLU net on flattened pixels, and a dilated 3x3
conv net on (real, imag) channels with the log noise level and pixel
coordinates as extra input maps. Forward, weight-gradient, VJP and JVP
passes are written out by hand.
"""

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .optim import Adam
from .scores import ScoreModel

MAGIC = b"DMNET"
VERSION = 1


def _sigmoid(h):
    return 0.5 * (1.0 + np.tanh(0.5 * h))


def _silu(h):
    return h * _sigmoid(h)


def _dsilu(h):
    s = _sigmoid(h)
    return s * (1.0 + h * (1.0 - s))


@dataclass
class DenoiserConfig:
    shape: tuple
    is_complex: bool = True
    hidden: tuple = (64, 64)
    sigma_data: float = 0.5
    precond: str = "edm"  # "edm" skip/output scaling, or "identity": D = x + F(x)
    arch: str = "mlp"  # "mlp" on flattened pixels, or "conv" on 2-D images
    dilations: tuple = ()  # conv only, one per layer (hidden + output); empty means all 1
    weighting: str = "edm"  # training loss weight: "edm" (sigma^2 + sd^2) / (sigma sd)^2, or "inv_sigma2"

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.hidden = tuple(int(s) for s in self.hidden)
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.precond not in ("edm", "identity"):
            raise ValueError(f"unknown preconditioning {self.precond!r}")
        if self.arch not in ("mlp", "conv"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.weighting not in ("edm", "inv_sigma2"):
            raise ValueError(f"unknown loss weighting {self.weighting!r}")
        if self.arch == "conv":
            if len(self.shape) != 2:
                raise ValueError("conv denoiser needs 2-D images")
            if not self.dilations:
                self.dilations = (1,) * (len(self.hidden) + 1)
            if len(self.dilations) != len(self.hidden) + 1:
                raise ValueError("need one dilation per conv layer")

    @property
    def channels(self):
        return 2 if self.is_complex else 1

    @property
    def n_features(self):
        n = int(np.prod(self.shape, dtype=int))
        return self.channels * n

    @classmethod
    def for_data(cls, example, **kw):
        example = np.asarray(example)
        return cls(example.shape, bool(np.iscomplexobj(example)), **kw)


def conv_image_preset(shape):
    """Dilated 3x3 conv net with a 17-pixel receptive field, 32 channels wide."""
    return DenoiserConfig(shape, True, hidden=(32, 32, 32), arch="conv", dilations=(1, 2, 4, 1))


KERNEL = 3
EXTRA_CONV_INPUTS = 3  # log-sigma map and two coordinate maps


def _taps(a, d):
    """Shifted views of the zero-padded input, one per 3x3 tap, flattened to (B*H*W, C)."""
    B, H, W, C = a.shape
    ap = np.pad(a, ((0, 0), (d, d), (d, d), (0, 0)))
    for i in range(KERNEL):
        for j in range(KERNEL):
            yield i, j, ap[:, i * d : i * d + H, j * d : j * d + W, :].reshape(-1, C)


def _conv(a, Wt, d):
    """Dilated 3x3 'same' convolution; ``Wt`` has shape (9, C_in, C_out)."""
    B, H, W, _ = a.shape
    out = np.zeros((B * H * W, Wt.shape[2]))
    for i, j, t in _taps(a, d):
        out += t @ Wt[i * KERNEL + j]
    return out.reshape(B, H, W, -1)


def _conv_T(g, Wt, d):
    """Adjoint of ``_conv`` with respect to its input."""
    B, H, W, _ = g.shape
    C = Wt.shape[1]
    out = np.zeros((B, H + 2 * d, W + 2 * d, C))
    g2 = g.reshape(-1, g.shape[-1])
    for i in range(KERNEL):
        for j in range(KERNEL):
            out[:, i * d : i * d + H, j * d : j * d + W, :] += (g2 @ Wt[i * KERNEL + j].T).reshape(B, H, W, C)
    return out[:, d : d + H, d : d + W, :]


def _conv_wgrad(a, g, d):
    g2 = g.reshape(-1, g.shape[-1])
    return np.stack([t.T @ g2 for _, _, t in _taps(a, d)])


@dataclass
class DenoiserNet(ScoreModel):
    config: DenoiserConfig
    weights: list = field(default_factory=list)  # [(W, b), ...] with h = z @ W + b

    @classmethod
    def init(cls, config, rng, zero_output=False):
        if config.arch == "conv":
            chans = [config.channels + EXTRA_CONV_INPUTS, *config.hidden, config.channels]
            # conv weights are stored tap-major as (9 * C_in, C_out)
            sizes = [(a * KERNEL * KERNEL, b) for a, b in zip(chans[:-1], chans[1:])]
        else:
            dims = [config.n_features + 1, *config.hidden, config.n_features]
            sizes = list(zip(dims[:-1], dims[1:]))
        weights = []
        for i, (a, b) in enumerate(sizes):
            if i == len(sizes) - 1 and zero_output:
                W = np.zeros((a, b))
            else:
                W = rng.standard_normal((a, b)) / np.sqrt(a)
            weights.append((W, np.zeros(b)))
        return cls(config, weights)

    @property
    def params(self):
        return [p for wb in self.weights for p in wb]

    # preconditioning --------------------------------------------------------
    def coeffs(self, sigma):
        """(c_skip, c_out, c_in) with D = c_skip x + c_out F(c_in x, log sigma)."""
        if self.config.precond == "identity":
            return 1.0, 1.0, 1.0
        sd = self.config.sigma_data
        denom = sigma**2 + sd**2
        return sd**2 / denom, sigma * sd / np.sqrt(denom), 1.0 / np.sqrt(denom)

    # real feature views -----------------------------------------------------
    # Features carry one flattened batch axis: (B, n) for the MLP and
    # (B, H, W, channels) for the conv net.
    def _to_feat(self, x):
        x = np.asarray(x)
        nd = len(self.config.shape)
        x = x.reshape((-1,) + x.shape[x.ndim - nd :])
        if self.config.arch == "conv":
            parts = [x.real, x.imag] if self.config.is_complex else [np.real(x)]
            return np.stack(parts, axis=-1)
        flat = x.reshape(x.shape[0], -1)
        if self.config.is_complex:
            return np.concatenate([flat.real, flat.imag], axis=-1)
        return np.real(flat)

    def _from_feat(self, f, lead=()):
        if self.config.arch == "conv":
            z = f[..., 0] + 1j * f[..., 1] if self.config.is_complex else f[..., 0]
        elif self.config.is_complex:
            half = f.shape[-1] // 2
            z = f[..., :half] + 1j * f[..., half:]
        else:
            z = f
        return z.reshape(tuple(lead) + self.config.shape)

    def _check(self, x, sigma):
        if sigma <= 0:
            raise ValueError("denoiser score needs sigma > 0")
        x = np.asarray(x)
        nd = len(self.config.shape)
        if x.shape[x.ndim - nd :] != self.config.shape:
            raise ValueError(f"x has shape {x.shape}, network expects {self.config.shape}")
        return x, x.shape[: x.ndim - nd]

    def _net_input(self, feat, log_sigma):
        """Append the noise-level embedding (and coordinates for the conv net)."""
        B = feat.shape[0]
        ls = np.broadcast_to(np.asarray(log_sigma, dtype=float), (B,)) / 4.0
        if self.config.arch == "mlp":
            return np.concatenate([feat, ls[:, None]], axis=-1)
        H, W = self.config.shape
        yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
        extra = np.empty((B, H, W, EXTRA_CONV_INPUTS))
        extra[..., 0] = ls[:, None, None]
        extra[..., 1] = yy
        extra[..., 2] = xx
        return np.concatenate([feat, extra], axis=-1)

    # layers -----------------------------------------------------------------
    def _layer(self, a, i, bias=True):
        """Affine map of layer ``i``; returns the output and what its adjoint needs."""
        W, b = self.weights[i]
        if self.config.arch == "mlp":
            h = a @ W
            ctx = a
        else:
            h = _conv(a, self._taps_view(W), self.config.dilations[i])
            ctx = a
        return (h + b if bias else h), ctx

    def _layer_T(self, g, i, in_shape):
        W, _ = self.weights[i]
        if self.config.arch == "mlp":
            return g @ W.T
        return _conv_T(g, self._taps_view(W), self.config.dilations[i])

    def _layer_grads(self, ctx, g, i):
        W, _ = self.weights[i]
        g2 = g.reshape(-1, W.shape[1])
        if self.config.arch == "mlp":
            return ctx.T @ g2, g2.sum(axis=0)
        dW = _conv_wgrad(ctx, g, self.config.dilations[i])
        return dW.reshape(W.shape), g2.sum(axis=0)

    @staticmethod
    def _taps_view(W):
        return W.reshape(KERNEL * KERNEL, -1, W.shape[1])

    # passes ---------------------------------------------------------------
    def _forward(self, z):
        """Network output for input ``z`` and the cache used by the other passes."""
        shapes, ctxs, pre = [], [], []
        a = z
        n = len(self.weights)
        for i in range(n):
            shapes.append(a.shape)
            h, ctx = self._layer(a, i)
            ctxs.append(ctx)
            if i < n - 1:
                pre.append(h)
                a = _silu(h)
            else:
                a = h
        return a, (shapes, ctxs, pre)

    def _backward_input(self, g, cache):
        """Gradient of <g, F> with respect to the network input z."""
        shapes, _, pre = cache
        for i in range(len(self.weights) - 1, -1, -1):
            g = self._layer_T(g, i, shapes[i])
            if i > 0:
                g = g * _dsilu(pre[i - 1])
        return g

    def _tangent(self, dz, cache):
        _, _, pre = cache
        d = dz
        for i in range(len(self.weights)):
            d, _ = self._layer(d, i, bias=False)
            if i < len(self.weights) - 1:
                d = d * _dsilu(pre[i])
        return d

    def _run(self, x, sigma):
        x, lead = self._check(x, sigma)
        c_skip, c_out, c_in = self.coeffs(sigma)
        feat = self._to_feat(x)
        out, cache = self._forward(self._net_input(c_in * feat, np.log(sigma)))
        D = c_skip * x + c_out * self._from_feat(out, lead)
        return x, lead, D, cache, (c_skip, c_out, c_in)

    def _image_part(self, g):
        c = self.config
        return g[..., : c.channels] if c.arch == "conv" else g[..., : c.n_features]

    def denoise(self, x, sigma):
        return self._run(x, sigma)[2]

    def score(self, x, sigma):
        x, _, D, _, _ = self._run(x, sigma)
        return (D - x) / sigma**2

    def score_and_vjp(self, x, sigma):
        x, lead, D, cache, (c_skip, c_out, c_in) = self._run(x, sigma)
        s = (D - x) / sigma**2

        def vjp(v):
            v = np.asarray(v)
            gz = self._image_part(self._backward_input(self._to_feat(v), cache))
            dD = c_skip * v + c_out * c_in * self._from_feat(gz, lead)
            return (dD - v) / sigma**2

        return s, vjp

    def score_vjp(self, x, sigma, v):
        return self.score_and_vjp(x, sigma)[1](v)

    def score_jvp(self, x, sigma, u):
        x, lead, _, cache, (c_skip, c_out, c_in) = self._run(x, sigma)
        u = np.asarray(u)
        du = self._to_feat(u)
        dz = np.concatenate([c_in * du, np.zeros(du.shape[:-1] + (self._extra_inputs,))], axis=-1)
        dD = c_skip * u + c_out * self._from_feat(self._tangent(dz, cache), lead)
        return (dD - u) / sigma**2

    @property
    def _extra_inputs(self):
        return EXTRA_CONV_INPUTS if self.config.arch == "conv" else 1

    def loss_weight(self, sigmas, weighting=None):
        weighting = weighting or self.config.weighting
        if weighting == "inv_sigma2":
            return 1.0 / sigmas**2
        sd = self.config.sigma_data
        return (sigmas**2 + sd**2) / (sigmas * sd) ** 2

    def loss_and_grads(self, x0, xt, sigmas, weighting=None):
        """Batch mean of weighted ||D(x_t, sigma) - x_0||^2 and its weight gradients.

        ``x0``/``xt`` are real feature arrays with a leading batch axis of
        size B; ``sigmas`` has shape (B,). ``weighting`` overrides the
        configured per-sample weight.
        """
        B = x0.shape[0]
        c_skip, c_out, c_in = (np.broadcast_to(np.asarray(c, dtype=float), (B,)) for c in self.coeffs(sigmas))
        ex = (slice(None),) + (None,) * (x0.ndim - 1)
        out, (_, ctxs, pre) = self._forward(self._net_input(xt * c_in[ex], np.log(sigmas)))
        err = c_skip[ex] * xt + c_out[ex] * out - x0
        w = self.loss_weight(sigmas, weighting)
        loss = float(np.mean(w * np.sum(err.reshape(B, -1) ** 2, axis=1)))
        g = (2.0 / B) * (w * c_out)[ex] * err
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i], grads[2 * i + 1] = self._layer_grads(ctxs[i], g, i)
            if i > 0:
                in_shape = pre[i - 1].shape
                g = self._layer_T(g, i, in_shape) * _dsilu(pre[i - 1])
        return loss, grads

    # checkpoint -----------------------------------------------------------
    def to_bytes(self):
        spec = asdict(self.config)
        spec["layers"] = [list(W.shape) for W, _ in self.weights]
        blob = json.dumps(spec, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)
        for p in self.params:
            buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        if data[: len(MAGIC)] != MAGIC:
            raise ValueError("not a denoiser checkpoint")
        off = len(MAGIC)
        version, n = struct.unpack_from("<II", data, off)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off += 8
        spec = json.loads(data[off : off + n])
        off += n
        layers = spec.pop("layers")
        config = DenoiserConfig(**spec)
        weights = []
        for a, b in layers:
            W = np.frombuffer(data, "<f8", a * b, off).reshape(a, b).copy()
            off += 8 * a * b
            bias = np.frombuffer(data, "<f8", b, off).copy()
            off += 8 * b
            weights.append((W, bias))
        if off != len(data):
            raise ValueError("trailing bytes in checkpoint")
        return cls(config, weights)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def denoiser_score(net, x_t, sigma):
    return net.score(x_t, sigma)


def denoiser_score_vjp(net, x_t, sigma, v):
    return net.score_vjp(x_t, sigma, v)


def train_denoiser(
    dataset,
    sampler,
    epochs,
    lr,
    rng,
    config=None,
    batch_size=16,
    probe_size=64,
    net=None,
    log=None,
):
    """Fit a denoiser on ``dataset`` with noise levels drawn from ``sampler``.

    Each epoch visits every example once in shuffled batches; every example in
    a batch gets a fresh sigma and noise draw. ``net.history`` records the
    mean of ||D - x_0||^2 / sigma^2 on a fixed probe batch after
    initialization and after each epoch, whatever the training weighting.
    Raises FloatingPointError naming the step if the loss stops being finite.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if lr <= 0:
        raise ValueError("lr must be positive")
    data = np.stack([np.asarray(x) for x in dataset])
    if net is None:
        net = DenoiserNet.init(config or DenoiserConfig.for_data(data[0]), rng)
    feats = net._to_feat(data)
    n = feats.shape[0]
    ex = (slice(None),) + (None,) * (feats.ndim - 1)

    idx = rng.integers(n, size=probe_size)
    p_sig = sampler.sample(rng, probe_size)
    p_x0 = feats[idx]
    p_xt = p_x0 + p_sig[ex] * rng.standard_normal(p_x0.shape)

    def probe():
        return net.loss_and_grads(p_x0, p_xt, p_sig, "inv_sigma2")[0]

    history = [probe()]
    opt = Adam(net.params, lr=lr)
    bs = min(batch_size, n)
    step = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            batch = perm[start : start + bs]
            sig = sampler.sample(rng, len(batch))
            x0 = feats[batch]
            xt = x0 + sig[ex] * rng.standard_normal(x0.shape)
            loss, grads = net.loss_and_grads(x0, xt, sig)
            if not np.isfinite(loss):
                raise FloatingPointError(f"denoiser training diverged at step {step} (epoch {epoch})")
            opt.step(grads)
            step += 1
        history.append(probe())
        if log is not None:
            log(epoch, history[-1])
    net.history = history
    return net
