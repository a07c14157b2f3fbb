"""Image-quality metrics and the ellipsoid-volume histogram."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .autograd import ssim_with_grad
from .gaussians import ellipsoid_volume

PSNR_SENTINEL = 99.0


def psnr(a, b) -> float:
    """10 log10(1 / MSE) over all channels; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def psnr_for_report(value: float) -> float:
    return PSNR_SENTINEL if math.isinf(value) else value


def ssim(a, b, window_size=11, sigma=1.5) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    value, _ = ssim_with_grad(a, b, window_size, sigma, want_grad=False)
    return float(value)


@dataclass
class VolumeHistogram:
    edges: np.ndarray
    counts: np.ndarray
    total: int
    threshold: float
    fraction_below: float  # volumes at or below the threshold
    iteration: int | None = None


def volume_histogram(cloud, bins=64, lo=1e-12, hi=1e2, threshold=0.03, iteration=None):
    """Histogram of ellipsoid volumes on log-spaced bins.

    Out-of-range volumes are counted in the first or last bin so the counts
    always sum to the population size.
    """
    volumes = ellipsoid_volume(cloud.log_scales) if len(cloud) else np.zeros(0)
    edges = np.logspace(np.log10(lo), np.log10(hi), bins + 1)
    idx = np.clip(np.searchsorted(edges, volumes, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    n = len(volumes)
    below = float(np.count_nonzero(volumes <= threshold)) / n if n else 0.0
    return VolumeHistogram(edges, counts, n, threshold, below, iteration)


def write_histogram_csv(path, hist: VolumeHistogram):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            w.writerow([f"{lo:.6e}", f"{hi:.6e}", int(c)])


def write_view_metrics_csv(path, rows):
    """``rows`` are ``(name, psnr, ssim)``; a final ``mean`` row is appended."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "psnr", "ssim"])
        for name, p, s in rows:
            w.writerow([name, f"{psnr_for_report(p):.4f}", f"{s:.6f}"])
        if rows:
            mean_p = float(np.mean([psnr_for_report(p) for _, p, _ in rows]))
            mean_s = float(np.mean([s for _, _, s in rows]))
            w.writerow(["mean", f"{mean_p:.4f}", f"{mean_s:.6f}"])
