"""Fusion quality metrics: PSNR, SSIM, SAM and ERGAS.

All functions take (bands, height, width) arrays.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .diffmath import ARCCOS_CLAMP

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class MetricError(ValueError):
    pass


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim != 3:
        raise MetricError(f"expected (bands, height, width) cubes, got {pred.ndim}-D")
    return pred, gt


def psnr_per_band(pred, gt, peak: float = 1.0) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    mse = np.mean((pred - gt) ** 2, axis=(1, 2))
    out = np.full(mse.shape, PSNR_CAP)
    ok = mse >= peak * peak * 1e-10
    out[ok] = 10.0 * np.log10(peak * peak / mse[ok])
    return out


def psnr(pred, gt, peak: float = 1.0) -> float:
    """Band-averaged PSNR in dB, each band capped at 100 dB."""
    return float(np.mean(psnr_per_band(pred, gt, peak)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    d = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(d**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_band(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Single-band SSIM averaged over all valid 11x11 Gaussian windows."""
    win = gaussian_window()
    k = win.shape[0]
    if a.shape[0] < k or a.shape[1] < k:
        raise MetricError(f"image {a.shape} smaller than the {k}x{k} SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(x):
        return np.tensordot(sliding_window_view(x, (k, k)), win, axes=([2, 3], [0, 1]))

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_per_band(pred, gt) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    return np.array([ssim_band(p, g) for p, g in zip(pred, gt)])


def ssim(pred, gt) -> float:
    return float(np.mean(ssim_per_band(pred, gt)))


def sam(pred, gt, eps: float = 1e-9) -> float:
    """Mean spectral angle in degrees."""
    pred, gt = _pair(pred, gt)
    if pred.shape[0] < 2:
        raise MetricError("SAM needs at least two bands")
    dot = np.sum(pred * gt, axis=0)
    norms = np.linalg.norm(pred, axis=0) * np.linalg.norm(gt, axis=0)
    cos = np.clip(dot / (norms + eps), -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)
    return float(np.degrees(np.mean(np.arccos(cos))))


def ergas(pred, gt, scale: int) -> float:
    """(100 / scale) * sqrt(mean_b MSE_b / mean_b(gt)^2)."""
    pred, gt = _pair(pred, gt)
    mu = gt.mean(axis=(1, 2))
    zero = np.flatnonzero(mu == 0)
    if zero.size:
        raise MetricError(f"ERGAS undefined: band {int(zero[0])} of ground truth has zero mean")
    mse = np.mean((pred - gt) ** 2, axis=(1, 2))
    return float(100.0 / scale * np.sqrt(np.mean(mse / mu**2)))


def _fmt(v) -> str:
    return "nan" if v is None else f"{v:.6g}"


@dataclass
class MetricsReport:
    psnr: float
    ssim: Optional[float]
    sam: float
    ergas: float
    per_band_psnr: List[float] = field(default_factory=list)
    per_band_ssim: List[float] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"{k}={_fmt(getattr(self, k))}" for k in ("psnr", "ssim", "sam", "ergas")]
        lines += [f"psnr_band{i}={v:.6g}" for i, v in enumerate(self.per_band_psnr)]
        lines += [f"ssim_band{i}={v:.6g}" for i, v in enumerate(self.per_band_ssim)]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def evaluate(pred, gt, scale: int, peak: float = 1.0) -> MetricsReport:
    pred, gt = _pair(pred, gt)
    pb_psnr = psnr_per_band(pred, gt, peak)
    if min(pred.shape[1:]) >= SSIM_WINDOW:
        pb_ssim = ssim_per_band(pred, gt)
        ssim_value = float(np.mean(pb_ssim))
    else:
        # too small for an 11x11 window
        pb_ssim = np.array([])
        ssim_value = None
    return MetricsReport(
        psnr=float(np.mean(pb_psnr)),
        ssim=ssim_value,
        sam=sam(pred, gt),
        ergas=ergas(pred, gt, scale),
        per_band_psnr=[float(v) for v in pb_psnr],
        per_band_ssim=[float(v) for v in pb_ssim],
    )
