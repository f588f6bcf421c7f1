"""Multi-coil Cartesian MRI measurement operator.

``y_i = mask * F(S_i x) + mask * noise`` with F the centered unitary FFT.
Unsampled k-space entries are stored as exact zeros, so ``A^H A`` is a
diagonal masking in k-space.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import fft2c, gaussian_complex, ifft2c, sq_norm

LINE = "LINE"
POINT = "POINT"
KINDS = (LINE, POINT)


def acs_range(n, acs_width):
    """Half-open index range of the centered calibration band along an axis of length n."""
    if acs_width <= 0:
        return 0, 0
    acs_width = min(acs_width, n)
    start = n // 2 - acs_width // 2
    return start, start + acs_width


def site_shape(kind, h, w):
    if kind == LINE:
        return (w,)
    if kind == POINT:
        return (h, w)
    raise ValueError(f"unknown pattern kind {kind!r}")


def acs_sites(kind, h, w, acs_width):
    """Boolean site array, True inside the always-sampled calibration region."""
    out = np.zeros(site_shape(kind, h, w), dtype=bool)
    c0, c1 = acs_range(w, acs_width)
    if kind == LINE:
        out[c0:c1] = True
    else:
        r0, r1 = acs_range(h, acs_width)
        out[r0:r1, c0:c1] = True
    return out


def sites_to_grid(kind, h, sites):
    """Broadcast per-site values to an (H, W) k-space weighting."""
    sites = np.asarray(sites)
    if kind == LINE:
        return np.broadcast_to(sites[None, :], (h, sites.shape[0]))
    return sites


def grid_to_sites(kind, grid):
    """Adjoint of :func:`sites_to_grid` (sums over readout rows for LINE)."""
    if kind == LINE:
        return grid.sum(axis=0)
    return grid


@dataclass(frozen=True)
class BinaryMask:
    """Hard sampling pattern over LINE (per column) or POINT (per pixel) sites."""

    kind: str
    h: int
    w: int
    keep: np.ndarray
    acs_width: int = 0

    def __post_init__(self):
        keep = np.asarray(self.keep, dtype=bool)
        if keep.shape != site_shape(self.kind, self.h, self.w):
            raise ValueError(f"keep has shape {keep.shape}, expected {site_shape(self.kind, self.h, self.w)}")
        keep = keep | acs_sites(self.kind, self.h, self.w, self.acs_width)
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)

    @classmethod
    def full(cls, kind, h, w, acs_width=0):
        return cls(kind, h, w, np.ones(site_shape(kind, h, w), dtype=bool), acs_width)

    @property
    def grid(self):
        """Boolean (H, W) k-space mask."""
        return np.array(sites_to_grid(self.kind, self.h, self.keep))

    @property
    def n_sites(self):
        return self.keep.size

    @property
    def n_kept(self):
        return int(self.keep.sum())

    @property
    def fraction(self):
        return self.n_kept / self.n_sites

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return (self.kind, self.h, self.w, self.acs_width) == (other.kind, other.h, other.w, other.acs_width) and bool(
            np.array_equal(self.keep, other.keep)
        )

    __hash__ = None


def acceleration(mask):
    """Total sites divided by kept sites (R = 4 means a quarter is sampled)."""
    if mask.n_kept == 0:
        raise ValueError("mask keeps no sites")
    return mask.n_sites / mask.n_kept


def save_mask(mask, path):
    """Text format: ``MASK <kind> <h> <w> <acs_width>`` then H rows of 0/1 characters."""
    rows = ["".join("1" if v else "0" for v in row) for row in mask.grid]
    text = f"MASK {mask.kind} {mask.h} {mask.w} {mask.acs_width}\n" + "\n".join(rows) + "\n"
    Path(path).write_text(text)


def load_mask(path):
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty mask file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "MASK" or head[1] not in KINDS:
        raise ValueError(f"{path}: bad mask header {lines[0]!r}")
    kind, h, w, acs = head[1], int(head[2]), int(head[3]), int(head[4])
    body = lines[1 : 1 + h]
    if len(body) != h or any(len(r) != w or set(r) - {"0", "1"} for r in body):
        raise ValueError(f"{path}: expected {h} rows of {w} 0/1 characters")
    grid = np.array([[c == "1" for c in r] for r in body], dtype=bool)
    if kind == LINE:
        if not (grid == grid[:1]).all():
            raise ValueError(f"{path}: LINE mask rows differ")
        keep = grid[0]
    else:
        keep = grid
    mask = BinaryMask(kind, h, w, keep, acs)
    if not np.array_equal(mask.grid, grid):
        raise ValueError(f"{path}: calibration region not fully sampled")
    return mask


@dataclass
class CoilSet:
    """Sensitivity maps of shape (c, H, W), normalized so sum_i |S_i|^2 = 1."""

    maps: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def c(self):
        return self.maps.shape[0]

    @property
    def shape(self):
        return self.maps.shape[1:]

    @classmethod
    def single(cls, h, w):
        return cls(np.ones((1, h, w), dtype=complex))


def coil_profiles(yy, xx, centers, width, phases):
    """Unnormalized complex Gaussian bumps evaluated at (possibly fractional) pixel coordinates."""
    yy = np.asarray(yy, dtype=float)
    xx = np.asarray(xx, dtype=float)
    out = []
    for (cy, cx), ph in zip(centers, phases):
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        out.append(np.exp(-r2 / (2.0 * width**2)) * np.exp(1j * ph))
    return np.stack(out)


def normalize_profiles(raw):
    return raw / np.sqrt((np.abs(raw) ** 2).sum(axis=0))


def make_coils(h, w, c, rng, width_factor=0.6):
    """Synthetic smooth coil maps: Gaussian bumps centered on the image border.

    Coil k sits at angle ``2 pi k / c`` on the ellipse through the border
    midpoints; each coil gets a random constant phase (coil 0 has zero phase).
    """
    if c < 1:
        raise ValueError("need at least one coil")
    if c == 1:
        return CoilSet(np.ones((1, h, w), dtype=complex), {"centers": [], "width": 0.0, "phases": []})
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    angles = 2 * np.pi * np.arange(c) / c
    centers = [(cy + (h / 2.0) * np.sin(a), cx + (w / 2.0) * np.cos(a)) for a in angles]
    phases = np.concatenate([[0.0], rng.uniform(-np.pi, np.pi, c - 1)])
    width = width_factor * max(h, w)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    maps = normalize_profiles(coil_profiles(yy, xx, centers, width, phases))
    params = {"centers": [tuple(map(float, p)) for p in centers], "width": float(width), "phases": phases.tolist()}
    return CoilSet(maps, params)


@dataclass
class Measurements:
    """Per-coil k-space data of shape (c, H, W); zero off the mask."""

    data: np.ndarray
    mask: BinaryMask
    noise_std: float = 0.0


def _check(x, coils, mask=None):
    x = np.asarray(x)
    if x.shape != tuple(coils.shape):
        raise ValueError(f"image shape {x.shape} does not match coil maps {coils.shape}")
    if mask is not None and (mask.h, mask.w) != x.shape:
        raise ValueError(f"mask shape {(mask.h, mask.w)} does not match image {x.shape}")
    return x


def apply_forward(x, coils, grid):
    """Noise-free ``A x`` for an arbitrary real k-space weighting ``grid``."""
    return grid * fft2c(coils.maps * x[None])


def apply_adjoint(data, coils, grid):
    return (np.conj(coils.maps) * ifft2c(grid * data)).sum(axis=0)


def forward(x, coils, mask, noise_std=0.0, rng=None):
    x = _check(x, coils, mask)
    grid = mask.grid
    data = apply_forward(x, coils, grid)
    if noise_std > 0:
        if rng is None:
            raise ValueError("noise_std > 0 requires an rng")
        h, w = x.shape
        noise = np.stack([gaussian_complex(rng, h, w, noise_std) for _ in range(coils.c)])
        data = data + grid * noise
    return Measurements(data, mask, noise_std)


def adjoint(y, coils):
    if y.data.shape[1:] != tuple(coils.shape) or y.data.shape[0] != coils.c:
        raise ValueError(f"measurement shape {y.data.shape} does not match coils ({coils.c}, {coils.shape})")
    return apply_adjoint(y.data, coils, y.mask.grid)


def residual(x, y, coils):
    """``A x - y`` as a (c, H, W) array."""
    x = _check(x, coils, y.mask)
    return apply_forward(x, coils, y.mask.grid) - y.data


def data_fidelity(x, y, coils):
    return sq_norm(residual(x, y, coils))


def data_fidelity_grad(x, y, coils):
    """Gradient of ``||A x - y||^2`` with respect to the real and imaginary parts of x."""
    return 2.0 * apply_adjoint(residual(x, y, coils), coils, y.mask.grid)
