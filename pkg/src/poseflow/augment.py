"""Crop / affine / flip augmentation and the augmentation-based self-supervision rule."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.ndimage as ndi

from .types import GarmentParsing, Image, PoseMap, SamplePair, make_residues


@dataclass(frozen=True)
class AugParams:
    rotation_deg: float = 0.0
    scale: float = 1.0
    translate: tuple = (0.0, 0.0)  # (dx, dy) pixels
    flip: bool = False
    crop: Optional[tuple] = None  # (x0, y0, w, h); None = full frame

    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.scale == 1 and tuple(self.translate) == (0, 0) and not self.flip and self.crop is None


@dataclass
class AugConfig:
    rotation_deg: float = 15.0
    scale: tuple = (0.8, 1.2)
    translate_frac: float = 0.1
    flip_p: float = 0.5
    crop_frac: tuple = (0.9, 1.0)

    @classmethod
    def identity(cls) -> "AugConfig":
        return cls(rotation_deg=0.0, scale=(1.0, 1.0), translate_frac=0.0, flip_p=0.0, crop_frac=(1.0, 1.0))

    def __post_init__(self):
        self.scale = tuple(float(x) for x in self.scale)
        self.crop_frac = tuple(float(x) for x in self.crop_frac)


@dataclass
class SelfSupConfig:
    ratio: float = 0.25
    direction: str = "target"  # "target": target <- Aug(source); "source": source <- Aug(target)

    def __post_init__(self):
        if self.direction not in ("target", "source"):
            raise ValueError(f"selfsup.direction must be 'target' or 'source', got {self.direction!r}")
        if not 0 <= self.ratio <= 1:
            raise ValueError("selfsup.ratio must be in [0, 1]")


def sample_aug_params(rng, cfg: AugConfig, shape) -> AugParams:
    h, w = shape
    rot = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)) if cfg.rotation_deg else 0.0
    lo, hi = cfg.scale
    scale = float(rng.uniform(lo, hi)) if hi > lo else lo
    t = cfg.translate_frac
    translate = (float(rng.uniform(-t, t) * w), float(rng.uniform(-t, t) * h)) if t else (0.0, 0.0)
    flip = bool(rng.random() < cfg.flip_p) if cfg.flip_p else False
    clo, chi = cfg.crop_frac
    crop = None
    if clo < 1 or chi < 1:
        f = float(rng.uniform(clo, chi)) if chi > clo else clo
        cw, ch = w * f, h * f
        crop = (float(rng.uniform(0, w - cw)), float(rng.uniform(0, h - ch)), cw, ch)
    return AugParams(rot, scale, translate, flip, crop)


def source_coords(theta: AugParams, shape) -> tuple:
    """For every output pixel, the (x, y) position sampled in the input raster."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if theta.flip:
        xs = (w - 1) - xs
    cx, cy = (w - 1) / 2, (h - 1) / 2
    dx = xs - cx - theta.translate[0]
    dy = ys - cy - theta.translate[1]
    if theta.rotation_deg != 0 or theta.scale != 1:
        t = np.deg2rad(theta.rotation_deg)
        c, s = np.cos(t) / theta.scale, np.sin(t) / theta.scale
        dx, dy = c * dx + s * dy, -s * dx + c * dy
    xs, ys = dx + cx, dy + cy
    if theta.crop is not None:
        x0, y0, cw, ch = theta.crop
        xs = x0 + (xs + 0.5) * (cw / w) - 0.5
        ys = y0 + (ys + 0.5) * (ch / h) - 0.5
    return xs, ys


def apply_aug(raster: np.ndarray, theta: AugParams, nearest: bool = False) -> np.ndarray:
    """Resample an H x W x C raster; ``nearest`` keeps one-hot rasters one-hot."""
    raster = np.asarray(raster)
    if theta.is_identity():
        return np.array(raster, copy=True)
    h, w = raster.shape[:2]
    xs, ys = source_coords(theta, (h, w))
    coords = np.stack([ys, xs])
    order = 0 if nearest else 1
    out = np.stack(
        [ndi.map_coordinates(raster[..., c].astype(np.float64), coords, order=order, mode="nearest") for c in range(raster.shape[2])],
        axis=-1,
    )
    return out.astype(raster.dtype)


def aug_pose(p: PoseMap, theta: AugParams) -> PoseMap:
    return PoseMap(apply_aug(p.parts, theta, nearest=True), np.clip(apply_aug(p.uv, theta), 0, 1))


def aug_garment(g: GarmentParsing, theta: AugParams) -> GarmentParsing:
    return GarmentParsing(apply_aug(g.classes, theta, nearest=True))


def aug_image(img: Image, theta: AugParams) -> Image:
    return Image(np.clip(apply_aug(img.data, theta), -1, 1))


def maybe_substitute(
    sample: SamplePair,
    rng,
    ratio: float = 0.25,
    direction: str = "target",
    aug_cfg: AugConfig = None,
    theta: AugParams = None,
    residue_fill: str = "diffusion",
):
    """With probability ``ratio`` replace one side of the pair by an augmented copy of the other.

    Returns ``(pair, substituted)``. ``direction='target'`` is the flow-stage
    rule (target <- Aug(source), residues re-derived); ``'source'`` is the
    synthesis-stage rule (source <- Aug(target)). ``theta`` overrides sampling.
    """
    eps = rng.random()
    if not eps < ratio:
        return sample, False
    aug_cfg = aug_cfg or AugConfig()
    if theta is None:
        theta = sample_aug_params(rng, aug_cfg, sample.source_image.shape)
    if direction == "target":
        img = aug_image(sample.source_image, theta)
        garment = aug_garment(sample.source_garment, theta)
        return replace(
            sample,
            target_image=img,
            target_pose=aug_pose(sample.source_pose, theta),
            target_garment=garment,
            target_residues=make_residues(img, garment, fill=residue_fill),
        ), True
    if direction == "source":
        return replace(
            sample,
            source_image=aug_image(sample.target_image, theta),
            source_pose=aug_pose(sample.target_pose, theta),
            source_garment=aug_garment(sample.target_garment, theta),
        ), True
    raise ValueError(f"unknown direction {direction!r}")
