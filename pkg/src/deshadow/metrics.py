"""Region-wise evaluation protocol: RMSE (shadow-removal convention: mean
absolute LAB error), PSNR and SSIM over shadow (S), non-shadow (NS) and
whole-image (ALL) regions.

Inputs are (H, W, 3) float arrays in [0, 1]; PSNR and SSIM are computed on
the 0-255 scale, RMSE in CIE LAB. Soft masks are thresholded at 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

# sRGB (D65) -> XYZ
_RGB2XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE_D65 = np.array([0.9504559, 1.0, 1.0890578])


@dataclass
class MetricReport:
    """One row of the evaluation table; None marks an empty region."""
    rmse_s: float | None
    rmse_ns: float | None
    rmse_all: float
    psnr_s: float | None
    psnr_ns: float | None
    psnr_all: float
    ssim_s: float | None
    ssim_ns: float | None
    ssim_all: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def rgb_to_lab(img01: np.ndarray) -> np.ndarray:
    """CIE LAB (D65 white) from sRGB values in [0, 1]."""
    rgb = np.asarray(img01, dtype=np.float64)
    linear = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4,
                      rgb / 12.92)
    xyz = linear @ _RGB2XYZ.T
    ratio = xyz / _WHITE_D65
    delta = 6.0 / 29.0
    f = np.where(ratio > delta ** 3, np.cbrt(ratio),
                 ratio / (3 * delta ** 2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> np.ndarray:
    """Per-pixel SSIM over the valid (un-padded) window region.

    Gaussian 11x11 window, standard constants; multichannel inputs are
    averaged over channels. Output shape is (H - 10, W - 10).
    """
    if a.shape != b.shape:
        raise ValueError("ssim inputs must share a shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    half = SSIM_WINDOW // 2
    maps = []
    for ch in range(a.shape[2]):
        x = np.asarray(a[..., ch], dtype=np.float64)
        y = np.asarray(b[..., ch], dtype=np.float64)
        mu_x = convolve(x, win, mode="constant")[half:-half, half:-half]
        mu_y = convolve(y, win, mode="constant")[half:-half, half:-half]
        mu_xx = convolve(x * x, win, mode="constant")[half:-half, half:-half]
        mu_yy = convolve(y * y, win, mode="constant")[half:-half, half:-half]
        mu_xy = convolve(x * y, win, mode="constant")[half:-half, half:-half]
        var_x = mu_xx - mu_x ** 2
        var_y = mu_yy - mu_y ** 2
        cov = mu_xy - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        maps.append(num / den)
    return np.mean(maps, axis=0)


def _psnr_from_mse(mse: float, peak: float = 255.0) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(peak ** 2 / mse), PSNR_CAP)


def region_metrics(pred: np.ndarray, truth: np.ndarray,
                   mask: np.ndarray | None = None) -> MetricReport:
    """Evaluate one prediction against ground truth over S / NS / ALL.

    Without a mask only the ALL entries are populated. Empty regions yield
    None for their entries.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise ValueError("pred/truth must be matching (H, W, 3) arrays")

    lab_err = np.abs(rgb_to_lab(pred) - rgb_to_lab(truth)).sum(axis=2)
    sq_err = (((pred - truth) * 255.0) ** 2).mean(axis=2)
    smap = ssim_map(pred * 255.0, truth * 255.0)
    half = SSIM_WINDOW // 2

    def rmse_of(sel):
        return float(lab_err[sel].mean()) if sel.any() else None

    def psnr_of(sel):
        return _psnr_from_mse(float(sq_err[sel].mean())) if sel.any() else None

    def ssim_of(sel):
        inner = sel[half:-half, half:-half]
        return float(smap[inner].mean()) if inner.any() else None

    everywhere = np.ones(pred.shape[:2], dtype=bool)
    report = MetricReport(
        rmse_s=None, rmse_ns=None, rmse_all=rmse_of(everywhere),
        psnr_s=None, psnr_ns=None, psnr_all=psnr_of(everywhere),
        ssim_s=None, ssim_ns=None, ssim_all=ssim_of(everywhere),
    )
    if mask is not None:
        if mask.shape != pred.shape[:2]:
            raise ValueError("mask shape must match the image grid")
        in_shadow = np.asarray(mask, dtype=np.float64) >= 0.5
        report.rmse_s = rmse_of(in_shadow)
        report.rmse_ns = rmse_of(~in_shadow)
        report.psnr_s = psnr_of(in_shadow)
        report.psnr_ns = psnr_of(~in_shadow)
        report.ssim_s = ssim_of(in_shadow)
        report.ssim_ns = ssim_of(~in_shadow)
    return report


def aggregate_reports(reports: list[MetricReport]) -> dict[str, float | None]:
    """Mean of each metric over the rows where it is present."""
    keys = MetricReport.__dataclass_fields__.keys()
    out = {}
    for key in keys:
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out
