"""Domain types: images, pose maps, garment parsings, residues, flow pyramids.

All rasters are stored as float32 numpy arrays in H x W x C layout and are
made read-only on construction. Construction checks value invariants only;
the divisible-by-64 size rule is checked by :func:`validate_pair` and at the
network entry points, so small rasters remain usable in unit-level code.
Network code converts them to (N, C, H, W) torch tensors via
:func:`to_tensor`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import torch

NUM_LEVELS = 6
SIZE_MULTIPLE = 2 ** NUM_LEVELS

# default channel counts
NUM_PARTS = 25
NUM_GARMENTS = 8

# toy garment classes
BACKGROUND, FACE, HAIR, UPPER, LOWER, DRESS, ARMS, LEGS = range(8)
GARMENT_NAMES = ("background", "face", "hair", "upper", "lower", "dress", "arms", "legs")
IDENTITY_CLASSES = frozenset({BACKGROUND, FACE, HAIR})


class ValidationError(ValueError):
    pass


def _frozen(a, dtype=np.float32) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _check_hw(h: int, w: int, name: str):
    if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
        raise ValidationError(f"{name}: H={h}, W={w} must be divisible by {SIZE_MULTIPLE}")


def _onehot_violation(a: np.ndarray, allow_empty: bool = False, tol: float = 1e-6) -> Optional[str]:
    if not np.all(np.isfinite(a)):
        return "non-finite values"
    if np.any((a != 0) & (a != 1)):
        return "entries not in {0, 1}"
    s = a.sum(axis=-1)
    bad = np.abs(s - 1) > tol
    if allow_empty:
        bad &= np.abs(s) > tol
    if np.any(bad):
        y, x = np.argwhere(bad)[0]
        return f"channel sum {s[y, x]:g} at pixel ({y}, {x})"
    return None


@dataclass(frozen=True, eq=False)
class Image:
    data: np.ndarray  # H x W x 3 in [-1, 1]

    def __post_init__(self):
        d = _frozen(self.data)
        if d.ndim != 3 or d.shape[2] != 3:
            raise ValidationError(f"Image: expected H x W x 3, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValidationError("Image: non-finite values")
        if d.min(initial=0) < -1 or d.max(initial=0) > 1:
            raise ValidationError("Image: values outside [-1, 1]")
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape[:2]


@dataclass(frozen=True, eq=False)
class PoseMap:
    """One-hot body-part parsing plus a 2-channel surface coordinate map."""

    parts: np.ndarray  # H x W x Np, one-hot
    uv: np.ndarray  # H x W x 2 in [0, 1]

    def __post_init__(self):
        parts, uv = _frozen(self.parts), _frozen(self.uv)
        if parts.ndim != 3 or uv.ndim != 3 or uv.shape[2] != 2:
            raise ValidationError(f"PoseMap: bad shapes {parts.shape}, {uv.shape}")
        if parts.shape[:2] != uv.shape[:2]:
            raise ValidationError("PoseMap: parts and uv differ in H, W")
        msg = _onehot_violation(parts)
        if msg:
            raise ValidationError(f"PoseMap.parts not one-hot: {msg}")
        if not np.all(np.isfinite(uv)) or uv.min(initial=0) < 0 or uv.max(initial=0) > 1:
            raise ValidationError("PoseMap.uv outside [0, 1]")
        object.__setattr__(self, "parts", parts)
        object.__setattr__(self, "uv", uv)

    @property
    def shape(self):
        return self.parts.shape[:2]

    @property
    def num_parts(self) -> int:
        return self.parts.shape[2]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.parts, self.uv], axis=-1)

    @classmethod
    def from_indices(cls, index: np.ndarray, uv: np.ndarray, num_parts: int = NUM_PARTS) -> "PoseMap":
        return cls(onehot(index, num_parts), uv)


@dataclass(frozen=True, eq=False)
class GarmentParsing:
    classes: np.ndarray  # H x W x Ng, one-hot

    def __post_init__(self):
        c = _frozen(self.classes)
        if c.ndim != 3:
            raise ValidationError(f"GarmentParsing: expected H x W x Ng, got {c.shape}")
        msg = _onehot_violation(c)
        if msg:
            raise ValidationError(f"GarmentParsing not one-hot: {msg}")
        object.__setattr__(self, "classes", c)

    @property
    def shape(self):
        return self.classes.shape[:2]

    @property
    def num_classes(self) -> int:
        return self.classes.shape[2]

    def indices(self) -> np.ndarray:
        return self.classes.argmax(axis=-1)

    @classmethod
    def from_indices(cls, index: np.ndarray, num_classes: int = NUM_GARMENTS) -> "GarmentParsing":
        return cls(onehot(index, num_classes))


@dataclass(frozen=True, eq=False)
class Residues:
    image_residue: Image
    garment_residue: np.ndarray  # H x W x Ng, per-pixel sums in {0, 1}

    def __post_init__(self):
        g = _frozen(self.garment_residue)
        msg = _onehot_violation(g, allow_empty=True)
        if msg:
            raise ValidationError(f"garment residue: {msg}")
        if g.shape[:2] != self.image_residue.shape:
            raise ValidationError("Residues: image and garment residue differ in H, W")
        object.__setattr__(self, "garment_residue", g)


@dataclass(frozen=True, eq=False)
class FlowPyramid:
    """Six flow fields, level l at H/2^l x W/2^l, in pixels of that level."""

    levels: tuple

    def __post_init__(self):
        levels = tuple(_frozen(l) for l in self.levels)
        if len(levels) != NUM_LEVELS:
            raise ValidationError(f"FlowPyramid: expected {NUM_LEVELS} levels, got {len(levels)}")
        for i, lv in enumerate(levels):
            if lv.ndim != 3 or lv.shape[2] != 2:
                raise ValidationError(f"FlowPyramid level {i}: expected h x w x 2, got {lv.shape}")
            if not np.all(np.isfinite(lv)):
                raise ValidationError(f"FlowPyramid level {i}: non-finite values")
            if i and (lv.shape[0] * 2 != levels[i - 1].shape[0] or lv.shape[1] * 2 != levels[i - 1].shape[1]):
                raise ValidationError(f"FlowPyramid level {i}: dims {lv.shape[:2]} are not half of level {i - 1}")
        object.__setattr__(self, "levels", levels)

    def __getitem__(self, i) -> np.ndarray:
        return self.levels[i]

    @classmethod
    def from_tensors(cls, flows, index: int = 0) -> "FlowPyramid":
        """Build from a list of (N, 2, h, w) tensors, taking batch element ``index``."""
        return cls(tuple(f[index].detach().permute(1, 2, 0).cpu().numpy() for f in flows))

    def to_tensors(self, device=None, dtype=torch.float32) -> list:
        return [to_tensor(l, device, dtype) for l in self.levels]


@dataclass(frozen=True, eq=False)
class SamplePair:
    source_image: Image
    source_pose: PoseMap
    source_garment: GarmentParsing
    target_image: Image
    target_pose: PoseMap
    target_garment: GarmentParsing
    target_residues: Residues


# ----------------------------------------------------------------------------
# helpers


def unchecked(cls, **fields):
    """Build a domain object without running its invariant checks (for loaders and tests)."""
    obj = object.__new__(cls)
    for k, v in fields.items():
        object.__setattr__(obj, k, v)
    return obj


def check_size(h: int, w: int, name: str = "raster"):
    _check_hw(h, w, name)


def onehot(index: np.ndarray, n: int) -> np.ndarray:
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ValidationError(f"class index out of range [0, {n})")
    return np.eye(n, dtype=np.float32)[index]


def to_tensor(raster: np.ndarray, device=None, dtype=torch.float32) -> torch.Tensor:
    """H x W x C array -> (1, C, H, W) tensor."""
    return torch.tensor(np.asarray(raster), dtype=dtype, device=device).permute(2, 0, 1).unsqueeze(0).contiguous()


def to_raster(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) or (C, H, W) tensor -> H x W x C float32 array."""
    if t.dim() == 4:
        t = t[0]
    return t.detach().permute(1, 2, 0).cpu().numpy().astype(np.float32)


def make_garment_residue(g: GarmentParsing, excluded_classes: Iterable[int] = IDENTITY_CLASSES) -> np.ndarray:
    excluded = sorted(set(int(c) for c in excluded_classes))
    n = g.classes.shape[2]
    if any(c < 0 or c >= n for c in excluded):
        raise ValidationError(f"excluded class ids {excluded} outside [0, {n})")
    out = np.array(g.classes, copy=True)
    out[..., excluded] = 0
    out.setflags(write=False)
    return out


def _diffusion_fill(channel_stack: np.ndarray, removed: np.ndarray) -> np.ndarray:
    """Harmonic fill: every removed pixel equals the mean of its in-bounds 4-neighbours.

    Solved directly as the fixed point of the neighbour-averaging iteration.
    Removed components touching no kept pixel take the kept-region mean
    (0 when nothing is kept).
    """
    h, w, c = channel_stack.shape
    out = np.array(channel_stack, dtype=np.float64, copy=True)
    kept = ~removed
    fallback = out[kept].mean(axis=0) if kept.any() else np.zeros(c)

    labels, n_comp = ndi.label(removed)
    touches = ndi.binary_dilation(kept, structure=ndi.generate_binary_structure(2, 1)) & removed
    anchored = np.zeros(n_comp + 1, dtype=bool)
    anchored[np.unique(labels[touches])] = True
    anchored[0] = False
    orphan = removed & ~anchored[labels]
    out[orphan] = fallback
    solve_mask = removed & anchored[labels]

    ys, xs = np.nonzero(solve_mask)
    if ys.size == 0:
        return out
    idx = -np.ones((h, w), dtype=np.int64)
    idx[ys, xs] = np.arange(ys.size)
    rows, cols, vals = [], [], []
    rhs = np.zeros((ys.size, c))
    deg = np.zeros(ys.size)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = ys + dy, xs + dx
        inb = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        deg += inb
        k = np.nonzero(inb)[0]
        nyk, nxk = ny[k], nx[k]
        unknown = idx[nyk, nxk]
        is_unknown = unknown >= 0
        rows.append(k[is_unknown])
        cols.append(unknown[is_unknown])
        vals.append(-np.ones(is_unknown.sum()))
        known = k[~is_unknown]
        rhs[known] += out[nyk[~is_unknown], nxk[~is_unknown]]
    a = sp.csr_matrix(
        (np.concatenate(vals + [deg]), (np.concatenate(rows + [np.arange(ys.size)]), np.concatenate(cols + [np.arange(ys.size)]))),
        shape=(ys.size, ys.size),
    )
    sol = spla.spsolve(a.tocsc(), rhs)
    out[ys, xs] = sol.reshape(ys.size, c)
    return out


def make_image_residue(img: Image, g: GarmentParsing, keep_classes: Iterable[int] = IDENTITY_CLASSES, fill: str = "diffusion") -> Image:
    keep = sorted(set(int(c) for c in keep_classes))
    labels = g.indices()
    kept = np.isin(labels, keep)
    data = np.array(img.data, dtype=np.float64, copy=True)
    removed = ~kept
    if not removed.any():
        return img
    if fill == "mean":
        data[removed] = data[kept].mean(axis=0) if kept.any() else 0.0
    elif fill == "diffusion":
        data = _diffusion_fill(data, removed)
    else:
        raise ValueError(f"unknown fill strategy {fill!r}")
    return Image(np.clip(data, -1, 1))


def make_residues(img: Image, g: GarmentParsing, identity_classes=IDENTITY_CLASSES, fill: str = "diffusion") -> Residues:
    return Residues(make_image_residue(img, g, identity_classes, fill), make_garment_residue(g, identity_classes))


def validate_pair(p: SamplePair) -> Optional[str]:
    """Return a description of the first violated invariant, or None if the pair is consistent."""
    checks = [
        ("source_pose.parts", p.source_pose.parts, False),
        ("target_pose.parts", p.target_pose.parts, False),
        ("source_garment", p.source_garment.classes, False),
        ("target_garment", p.target_garment.classes, False),
        ("target_residues.garment_residue", p.target_residues.garment_residue, True),
    ]
    for name, arr, allow_empty in checks:
        msg = _onehot_violation(arr, allow_empty=allow_empty)
        if msg:
            return f"one-hot violation in {name}: {msg}"
    for name, arr in (("source_pose.uv", p.source_pose.uv), ("target_pose.uv", p.target_pose.uv)):
        if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
            return f"range violation in {name}: values outside [0, 1]"
    for name, img in (("source_image", p.source_image), ("target_image", p.target_image), ("image_residue", p.target_residues.image_residue)):
        d = img.data
        if not np.all(np.isfinite(d)) or d.min() < -1 or d.max() > 1:
            return f"range violation in {name}: values outside [-1, 1]"
    ref = p.source_image.shape
    rasters = {
        "source_pose": p.source_pose.shape,
        "source_garment": p.source_garment.shape,
        "target_image": p.target_image.shape,
        "target_pose": p.target_pose.shape,
        "target_garment": p.target_garment.shape,
        "image_residue": p.target_residues.image_residue.shape,
        "garment_residue": p.target_residues.garment_residue.shape[:2],
    }
    for name, shape in rasters.items():
        if tuple(shape) != tuple(ref):
            return f"dimension violation: {name} is {tuple(shape)}, source_image is {tuple(ref)}"
    if ref[0] % SIZE_MULTIPLE or ref[1] % SIZE_MULTIPLE:
        return f"dimension violation: H, W = {tuple(ref)} not divisible by {SIZE_MULTIPLE}"
    if p.source_pose.num_parts != p.target_pose.num_parts:
        return "dimension violation: source and target pose channel counts differ"
    if p.source_garment.num_classes != p.target_garment.num_classes:
        return "dimension violation: source and target garment channel counts differ"
    return None
