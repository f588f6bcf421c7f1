"""Complex image helpers: centered orthonormal FFTs, inner products and seeded noise.

Images are complex128 arrays of shape ``(H, W)``. k-space grids share the
shape and are DC-centered: the zero frequency sits at ``(H // 2, W // 2)``.
"""

import numpy as np


def make_rng(seed):
    """PCG64 generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def _check_shape(a):
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-1] == 0 or a.shape[-2] == 0:
        raise ValueError(f"expected a non-empty (..., H, W) array, got shape {a.shape}")
    return a


def fft2c(img):
    """Unitary 2-D DFT over the last two axes, zero frequency moved to the center."""
    img = _check_shape(img)
    shifted = np.fft.ifftshift(img, axes=(-2, -1))
    return np.fft.fftshift(np.fft.fft2(shifted, norm="ortho"), axes=(-2, -1))


def ifft2c(grid):
    """Inverse of :func:`fft2c`."""
    grid = _check_shape(grid)
    shifted = np.fft.ifftshift(grid, axes=(-2, -1))
    return np.fft.fftshift(np.fft.ifft2(shifted, norm="ortho"), axes=(-2, -1))


def inner(a, b):
    """Real inner product Re <a, b> treating complex entries as two real channels."""
    return float(np.real(np.vdot(a, b)))


def sq_norm(a):
    return float(np.real(np.vdot(a, a)))


def gaussian_complex(rng, h, w, std):
    """Circular complex Gaussian image with per-entry variance ``std**2``.

    Real and imaginary parts are independent N(0, std**2 / 2).
    """
    if std < 0:
        raise ValueError("std must be non-negative")
    scale = std / np.sqrt(2.0)
    re = rng.standard_normal((h, w))
    im = rng.standard_normal((h, w))
    return scale * (re + 1j * im)


def standard_noise_like(rng, x):
    """Unit-variance Gaussian noise per real channel, matching ``x``'s shape and kind.

    This is the diffusion noise: ``x_t = x_0 + sigma * standard_noise_like(...)``
    perturbs every real coordinate with variance ``sigma**2``.
    """
    x = np.asarray(x)
    if np.iscomplexobj(x):
        return rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
    return rng.standard_normal(x.shape)


def real_dim(x):
    """Number of real coordinates in ``x``."""
    x = np.asarray(x)
    return 2 * x.size if np.iscomplexobj(x) else x.size
