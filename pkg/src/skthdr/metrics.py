"""PSNR in the linear and mu-law domains, and windowed SSIM."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.ndimage import correlate1d

from .domain import TonemapParams, mu_law
from .errors import ShapeMismatch

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class MetricsRecord:
    sample_id: str
    psnr_l: float
    psnr_mu: float
    ssim: float


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _pair(a, b):
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse))


def psnr_mu(a, b, p: Optional[TonemapParams] = None) -> float:
    a, b = _pair(a, b)
    return psnr(mu_law(a, p).data, mu_law(b, p).data)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter over the last two axes, valid windows only."""
    r = len(g) // 2
    y = correlate1d(correlate1d(x, g, axis=-1, mode="constant"), g, axis=-2, mode="constant")
    return y[..., r:y.shape[-2] - r, r:y.shape[-1] - r]


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid windows and channels; inputs [..., H, W] in [0,1]."""
    a, b = _pair(a, b)
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ShapeMismatch(f"SSIM needs at least {window}x{window} pixels, got {a.shape[-2:]}")
    g = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def evaluate_pair(sample_id, pred, gt, p: Optional[TonemapParams] = None) -> MetricsRecord:
    pred, gt = _pair(pred, gt)
    return MetricsRecord(str(sample_id), psnr(pred, gt), psnr_mu(pred, gt, p), ssim(pred, gt))


def mean_record(records: Iterable[MetricsRecord], sample_id: str = "mean") -> MetricsRecord:
    records = list(records)
    return MetricsRecord(sample_id, *(float(np.mean([getattr(r, k) for r in records]))
                                      for k in ("psnr_l", "psnr_mu", "ssim")))


def write_csv(path, records: Iterable[MetricsRecord]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["sample_id", "psnr_l", "psnr_mu", "ssim"])
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
