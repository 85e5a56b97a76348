"""Reconstruction quality metrics and their report container.

Conventions are fixed once here so every caller agrees: peak signal ratio
uses peak 1.0 by default and reports an exact match as infinite; the spectral
angle is the mean over pixels in degrees, skipping pixels where either
spectrum has zero norm; the relative dimensionless global error uses the
reference band means and the decimation factor of the task; the structural
similarity is computed per band with an 11x11 Gaussian window (sigma 1.5,
stabilizers K1=0.01 and K2=0.03 at dynamic range 1.0) and averaged.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "psnr",
    "rmse",
    "sam",
    "ergas",
    "ssim",
    "MetricReport",
    "compute_report",
    "METRIC_NAMES",
]

METRIC_NAMES = ("psnr", "sam", "rmse", "ergas", "ssim")


def _paired(ref: np.ndarray, est: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch: reference {ref.shape} vs estimate {est.shape}")
    return ref, est


def psnr(ref: np.ndarray, est: np.ndarray, peak: float = 1.0) -> float:
    ref, est = _paired(ref, est)
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def rmse(ref: np.ndarray, est: np.ndarray) -> float:
    ref, est = _paired(ref, est)
    return float(np.sqrt(np.mean((ref - est) ** 2)))


def sam(ref: np.ndarray, est: np.ndarray) -> float:
    """Mean per-pixel spectral angle in degrees over (H, W, bands) cubes."""
    ref, est = _paired(ref, est)
    if ref.ndim != 3:
        raise ValueError(f"spectral angle needs (H, W, bands) cubes, got {ref.shape}")
    a = ref.reshape(-1, ref.shape[2])
    b = est.reshape(-1, est.shape[2])
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    valid = (na > 0) & (nb > 0)
    if not np.any(valid):
        raise ValueError("no pixel has nonzero norm in both cubes")
    cos = np.clip((a[valid] * b[valid]).sum(axis=1) / (na[valid] * nb[valid]), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def ergas(ref: np.ndarray, est: np.ndarray, scale_ratio: int = 1) -> float:
    """100/scale_ratio times the RMS of per-band RMSE over reference mean."""
    ref, est = _paired(ref, est)
    if ref.ndim != 3:
        raise ValueError(f"this metric needs (H, W, bands) cubes, got {ref.shape}")
    if scale_ratio < 1:
        raise ValueError(f"scale ratio must be >= 1, got {scale_ratio}")
    means = ref.mean(axis=(0, 1))
    band_rmse = np.sqrt(np.mean((ref - est) ** 2, axis=(0, 1)))
    keep = means != 0.0
    skipped = int((~keep).sum())
    if skipped:
        warnings.warn(f"skipped {skipped} zero-mean reference band(s)", RuntimeWarning)
    if not np.any(keep):
        raise ValueError("every reference band has zero mean")
    return float(100.0 / scale_ratio * np.sqrt(np.mean((band_rmse[keep] / means[keep]) ** 2)))


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _gauss_window() -> np.ndarray:
    off = np.arange(_SSIM_WINDOW, dtype=np.float64) - (_SSIM_WINDOW - 1) / 2.0
    prof = np.exp(-(off**2) / (2.0 * _SSIM_SIGMA**2))
    win = np.outer(prof, prof)
    return win / win.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    k = window.shape[0]
    views = sliding_window_view(img, (k, k))
    return np.tensordot(views, window, axes=([2, 3], [0, 1]))


def ssim(ref: np.ndarray, est: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity over bands, interior (valid) windows only."""
    ref, est = _paired(ref, est)
    if ref.ndim == 2:
        ref, est = ref[:, :, None], est[:, :, None]
    if ref.ndim != 3:
        raise ValueError(f"expected 2-D planes or 3-D cubes, got shape {ref.shape}")
    h, w, bands = ref.shape
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise ValueError(f"plane {h}x{w} is smaller than the {_SSIM_WINDOW} window")
    win = _gauss_window()
    c1 = (_SSIM_K1 * peak) ** 2
    c2 = (_SSIM_K2 * peak) ** 2
    scores = np.empty(bands)
    for b in range(bands):
        x, y = ref[:, :, b], est[:, :, b]
        mu_x = _filter_valid(x, win)
        mu_y = _filter_valid(y, win)
        var_x = _filter_valid(x * x, win) - mu_x * mu_x
        var_y = _filter_valid(y * y, win) - mu_y * mu_y
        cov = _filter_valid(x * y, win) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores[b] = float(np.mean(num / den))
    return float(scores.mean())


def _fmt(value: float) -> str:
    return "infinite" if math.isinf(value) else repr(float(value))


@dataclass
class MetricReport:
    psnr: float
    sam: float
    rmse: float
    ergas: float
    ssim: float

    def to_text(self) -> str:
        return "".join(f"{name}={_fmt(getattr(self, name))}\n" for name in METRIC_NAMES)

    def to_csv_row(self) -> list[str]:
        return [_fmt(getattr(self, name)) for name in METRIC_NAMES]


def compute_report(ref: np.ndarray, est: np.ndarray, scale_ratio: int = 1) -> MetricReport:
    return MetricReport(
        psnr=psnr(ref, est),
        sam=sam(ref, est),
        rmse=rmse(ref, est),
        ergas=ergas(ref, est, scale_ratio),
        ssim=ssim(ref, est),
    )
