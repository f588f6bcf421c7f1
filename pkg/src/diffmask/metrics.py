"""Image-quality metrics on magnitude images normalized by the reference peak."""

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 200.0


def _magnitudes(ref, rec):
    a = np.abs(np.asarray(ref))
    b = np.abs(np.asarray(rec))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    peak = a.max()
    if peak == 0:
        raise ValueError("reference image is identically zero")
    return a / peak, b / peak


def structural_similarity(a, b, win=7, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over all valid ``win x win`` uniform windows of two real images."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if min(a.shape) < win:
        raise ValueError(f"images smaller than the {win}x{win} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def wmean(z):
        return sliding_window_view(z, (win, win)).mean(axis=(-2, -1))

    mu_a, mu_b = wmean(a), wmean(b)
    var_a = wmean(a * a) - mu_a * mu_a
    var_b = wmean(b * b) - mu_b * mu_b
    cov = wmean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(ref, rec):
    return structural_similarity(*_magnitudes(ref, rec))


def psnr(ref, rec):
    """PSNR in dB with peak max|ref|; +inf for identical magnitudes."""
    a, b = _magnitudes(ref, rec)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return np.inf
    return float(10 * np.log10(1.0 / mse))


@dataclass
class MetricReport:
    ssim: list = field(default_factory=list)
    psnr: list = field(default_factory=list)

    def add(self, ref, rec):
        self.ssim.append(ssim(ref, rec))
        self.psnr.append(psnr(ref, rec))

    @staticmethod
    def _stats(v):
        v = np.minimum(np.asarray(v, dtype=float), PSNR_CAP)
        sd = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
        return float(np.mean(v)), sd

    @property
    def ssim_stats(self):
        return self._stats(self.ssim)

    @property
    def psnr_stats(self):
        return self._stats(self.psnr)


def write_metrics(rows, path):
    """Rows of (image_id, mask_id, R, ssim, psnr); PSNR capped for the file."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "mask_id", "R", "ssim", "psnr"])
        for image_id, mask_id, R, s, p in rows:
            w.writerow([image_id, mask_id, f"{R:.6g}", f"{s:.8f}", f"{min(p, PSNR_CAP):.6f}"])
