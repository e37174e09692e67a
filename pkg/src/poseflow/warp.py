"""Differentiable inverse bilinear warping and flow resizing.

Layout is (N, C, H, W) for rasters and (N, 2, H, W) for flows, with flow
channel 0 the horizontal and channel 1 the vertical displacement, both in
pixels of the field's own grid. Pixel (y, x) samples the continuous point
(x, y); no normalized grid coordinates are involved.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

PADDING_MODES = ("border", "zeros")


@dataclass(frozen=True)
class WarpConfig:
    padding: str = "border"
    align_convention: str = "pixel-center"

    def __post_init__(self):
        if self.padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}, got {self.padding!r}")


def _check(src: torch.Tensor, flow: torch.Tensor):
    if src.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError(f"expected src (N,C,H,W) and flow (N,2,H,W), got {tuple(src.shape)} and {tuple(flow.shape)}")
    if src.shape[0] != flow.shape[0] or src.shape[2:] != flow.shape[2:]:
        raise ValueError(f"shape mismatch: src {tuple(src.shape)} vs flow {tuple(flow.shape)}")


def inverse_warp(src: torch.Tensor, flow: torch.Tensor, padding: str = "border") -> torch.Tensor:
    """out[n, c, y, x] = bilinear sample of src[n, c] at (x + flow_x, y + flow_y).

    ``border`` clamps sample positions to the image (so displacements pushing
    outside carry no gradient); ``zeros`` treats out-of-range corners as 0.
    With zero flow the output equals ``src`` bit for bit.
    """
    _check(src, flow)
    if padding not in PADDING_MODES:
        raise ValueError(f"unknown padding {padding!r}")
    n, c, h, w = src.shape
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    px = xs + flow[:, 0]
    py = ys + flow[:, 1]
    if padding == "border":
        px = px.clamp(0, w - 1)
        py = py.clamp(0, h - 1)

    x0f = torch.floor(px)
    y0f = torch.floor(py)
    wx = px - x0f
    wy = py - y0f
    x0 = x0f.long()
    y0 = y0f.long()

    flat = src.reshape(n, c, h * w)

    def corner(yi, xi, weight):
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).view(n, 1, h * w).expand(n, c, h * w)
        vals = torch.gather(flat, 2, idx).view(n, c, h, w)
        if padding == "zeros":
            weight = weight * valid.to(weight.dtype)
        return vals * weight.unsqueeze(1)

    out = (
        corner(y0, x0, (1 - wx) * (1 - wy))
        + corner(y0, x0 + 1, wx * (1 - wy))
        + corner(y0 + 1, x0, (1 - wx) * wy)
        + corner(y0 + 1, x0 + 1, wx * wy)
    )
    return out


def resize_flow(flow: torch.Tensor, size) -> torch.Tensor:
    """Bilinearly resize a flow field and rescale displacements to the new grid."""
    h, w = flow.shape[-2:]
    th, tw = int(size[0]), int(size[1])
    if th <= 0 or tw <= 0:
        raise ValueError(f"target size must be positive, got {size}")
    if (th, tw) == (h, w):
        return flow
    out = F.interpolate(flow, size=(th, tw), mode="bilinear", align_corners=False)
    scale = torch.tensor([tw / w, th / h], dtype=flow.dtype, device=flow.device).view(1, 2, 1, 1)
    return out * scale


def resize_image(img: torch.Tensor, size) -> torch.Tensor:
    if tuple(img.shape[-2:]) == tuple(size):
        return img
    return F.interpolate(img, size=tuple(size), mode="bilinear", align_corners=False, antialias=True)


def grad_check_warp(src, flow, eps: float = 1e-3, padding: str = "border") -> float:
    """Max of |analytic - fd| / (|analytic| + 1e-8) over all elements of src and flow.

    The scalar checked is ``sum(inverse_warp(src, flow) * probe)`` with a fixed
    random probe; inputs are (N, C, H, W) arrays or tensors, evaluated in
    float64. Flow fractional parts should stay >= 0.1 away from integers.
    """
    from .gradcheck import elementwise_check

    src = torch.as_tensor(np.asarray(src), dtype=torch.float64)
    flow = torch.as_tensor(np.asarray(flow), dtype=torch.float64)
    _check(src, flow)
    probe = torch.randn(src.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    return elementwise_check(lambda s, f: inverse_warp(s, f, padding), [src, flow], eps=eps, probe=probe, plain=True)
