"""Image-quality and flow metrics: SSIM, MS-SSIM, masked variants, end-point error."""
from __future__ import annotations

from typing import Callable, Protocol

import numpy as np
from scipy import ndimage as ndi

from .types import Image

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
LUMA = np.array([0.299, 0.587, 0.114])


class MetricError(ValueError):
    pass


def _raster(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Image) else x, dtype=np.float64)


def to_luma(x) -> np.ndarray:
    """[-1, 1] RGB (or single-channel) raster -> [0, 1] luma plane."""
    a = _raster(x)
    if a.ndim == 3:
        a = a @ LUMA if a.shape[2] == 3 else a[..., 0]
    return (a + 1.0) / 2.0


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    y = ndi.correlate1d(ndi.correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return y[r:-r, r:-r]


def _ssim_cs(x: np.ndarray, y: np.ndarray, data_range: float = 1.0):
    """Per-window SSIM and contrast-structure maps over valid windows."""
    if min(x.shape) < WINDOW:
        raise MetricError(f"image {x.shape} smaller than the {WINDOW}x{WINDOW} window")
    g = gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return lum * cs, cs


def _check_pair(a, b):
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows of the [0,1] luma."""
    x, y = to_luma(a), to_luma(b)
    _check_pair(x, y)
    return float(_ssim_cs(x, y)[0].mean())


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_min_size(scales: int = len(MS_WEIGHTS)) -> int:
    return WINDOW * 2 ** (scales - 1)


def ms_ssim(a, b, weights=MS_WEIGHTS) -> float:
    """Product-form MS-SSIM with 2x2 average-pool downsampling between scales.

    Negative contrast-structure terms are clamped at 0 before exponentiation.
    """
    x, y = to_luma(a), to_luma(b)
    _check_pair(x, y)
    need = ms_ssim_min_size(len(weights))
    if min(x.shape) < need:
        raise MetricError(f"MS-SSIM with {len(weights)} scales needs images of at least {need}x{need}, got {x.shape}")
    out = 1.0
    for j, w in enumerate(weights):
        s, cs = _ssim_cs(x, y)
        v = s.mean() if j == len(weights) - 1 else cs.mean()
        out *= max(v, 0.0) ** w
        x, y = _downsample(x), _downsample(y)
    return float(out)


def composite(x, mask, fill: float = 0.0) -> np.ndarray:
    """Keep pixels where ``mask`` is set, mid-gray (0 in [-1, 1]) elsewhere."""
    a = _raster(x)
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape[:2]:
        raise MetricError(f"mask {m.shape} does not match image {a.shape[:2]}")
    return np.where(m[..., None] if a.ndim == 3 else m, a, fill)


def masked_metric(metric: Callable, a, b, mask) -> float:
    if not np.any(mask):
        raise MetricError("empty mask")
    return metric(composite(a, mask), composite(b, mask))


def epe(flow_pred, flow_gt, mask=None) -> float:
    """Mean Euclidean end-point error over h x w x 2 flows, optionally restricted to ``mask``."""
    p, g = np.asarray(flow_pred, np.float64), np.asarray(flow_gt, np.float64)
    if p.shape != g.shape:
        raise MetricError(f"flow shape mismatch {p.shape} vs {g.shape}")
    err = np.sqrt(((p - g) ** 2).sum(-1))
    if mask is not None:
        m = np.asarray(mask, bool)
        if not m.any():
            raise MetricError("empty mask")
        return float(err[m].mean())
    return float(err.mean())


class BatchScore(Protocol):
    """Adapter for pretrained-network scores (IS, LPIPS): (N, H, W, 3) batches in [-1, 1] -> scalar."""

    def __call__(self, images: np.ndarray, reference: np.ndarray = None) -> float: ...
