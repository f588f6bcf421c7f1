"""Synthetic complex phantoms, [-1, 1] scaling and the CIMG1 image file format."""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIMG_MAGIC = b"CIMG1"


@dataclass(frozen=True)
class PhantomSpec:
    h: int = 32
    w: int = 32
    n_ellipses: tuple = (3, 6)
    intensity: tuple = (0.2, 1.0)
    phase_amplitude: float = 0.5
    supersample: int = 4


def _coverage(yy, xx, cy, cx, ay, ax, angle):
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0).astype(float)


def gen_phantom(spec, rng):
    """Sum of anti-aliased ellipses with complex intensities times a smooth phase.

    The first ellipse is a large centered outline; the rest are smaller
    inclusions. Coverage is averaged over ``supersample**2`` subpixels.
    """
    h, w, ss = spec.h, spec.w, spec.supersample
    lo, hi = spec.n_ellipses
    n = int(rng.integers(lo, hi + 1))
    # subpixel centers in normalized coordinates [-1, 1]
    sy = (np.arange(h * ss) + 0.5) / (h * ss) * 2 - 1
    sx = (np.arange(w * ss) + 0.5) / (w * ss) * 2 - 1
    yy, xx = np.meshgrid(sy, sx, indexing="ij")
    acc = np.zeros((h * ss, w * ss), dtype=complex)
    for i in range(n):
        if i == 0:
            cy, cx = rng.uniform(-0.05, 0.05, 2)
            ay, ax = rng.uniform(0.6, 0.85, 2)
            mag = rng.uniform(*spec.intensity) * 0.5
        else:
            cy, cx = rng.uniform(-0.45, 0.45, 2)
            ay, ax = rng.uniform(0.08, 0.35, 2)
            mag = rng.uniform(*spec.intensity)
        angle = rng.uniform(0, np.pi)
        amp = mag * np.exp(1j * rng.uniform(-0.3, 0.3))
        acc += amp * _coverage(yy, xx, cy, cx, ay, ax, angle)
    img = acc.reshape(h, ss, w, ss).mean(axis=(1, 3))
    py = (np.arange(h) + 0.5) / h * 2 - 1
    px = (np.arange(w) + 0.5) / w * 2 - 1
    Y, X = np.meshgrid(py, px, indexing="ij")
    coef = rng.uniform(-1, 1, 6)
    poly = coef[0] + coef[1] * X + coef[2] * Y + coef[3] * X * X + coef[4] * X * Y + coef[5] * Y * Y
    return img * np.exp(1j * spec.phase_amplitude * poly)


@dataclass(frozen=True)
class ScaleRecord:
    lo: float
    hi: float


def scale_to_range(img):
    """Map both real channels jointly so their min goes to -1 and max to +1."""
    img = np.asarray(img)
    chans = np.stack([img.real, img.imag])
    lo, hi = float(chans.min()), float(chans.max())
    if hi == lo or np.all(img == img.flat[0]):
        raise ValueError("cannot scale a constant image")
    rec = ScaleRecord(lo, hi)
    if lo == -1.0 and hi == 1.0:
        return img.astype(complex), rec
    f = lambda c: 2.0 * (c - lo) / (hi - lo) - 1.0  # noqa: E731
    return f(img.real) + 1j * f(img.imag), rec


def unscale(img, rec):
    f = lambda c: (c + 1.0) * (rec.hi - rec.lo) / 2.0 + rec.lo  # noqa: E731
    img = np.asarray(img)
    if rec.lo == -1.0 and rec.hi == 1.0:
        return img.astype(complex)
    return f(img.real) + 1j * f(img.imag)


@dataclass
class Dataset:
    train: list = field(default_factory=list)  # [(id, image)]
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    scaling: dict = field(default_factory=dict)  # id -> ScaleRecord

    def images(self, split):
        return [im for _, im in getattr(self, split)]


def make_dataset(spec=PhantomSpec(), n_train=20, n_val=5, n_test=20, seed=0):
    """Scaled phantom splits; every image has its own spawned seed."""
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n_train + n_val + n_test)
    ds = Dataset()
    k = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        for i in range(n):
            rng = np.random.Generator(np.random.PCG64(children[k]))
            k += 1
            raw = gen_phantom(spec, rng)
            img, rec = scale_to_range(raw)
            iid = f"{split}-{i:03d}"
            getattr(ds, split).append((iid, img))
            ds.scaling[iid] = rec
    return ds


def image_to_bytes(img):
    img = np.asarray(img, dtype=complex)
    if img.ndim != 2:
        raise ValueError("CIMG1 stores 2-D images")
    h, w = img.shape
    pairs = np.stack([img.real, img.imag], axis=-1).astype("<f8")
    return CIMG_MAGIC + struct.pack("<II", h, w) + pairs.tobytes()


def image_from_bytes(data):
    if data[:5] != CIMG_MAGIC:
        raise ValueError("not a CIMG1 file")
    h, w = struct.unpack_from("<II", data, 5)
    if len(data) != 13 + 16 * h * w:
        raise ValueError("CIMG1 payload size mismatch")
    pairs = np.frombuffer(data, "<f8", 2 * h * w, 13).reshape(h, w, 2)
    return pairs[..., 0] + 1j * pairs[..., 1]


def save_image(img, path):
    Path(path).write_bytes(image_to_bytes(img))


def load_image(path):
    return image_from_bytes(Path(path).read_bytes())


def random_phantoms(n, spec=PhantomSpec(), seed=0):
    """``n`` scaled phantoms (convenience for score-model training sets)."""
    ds = make_dataset(spec, n, 0, 0, seed)
    return ds.images("train")
