"""Procedural articulated-figure pairs with exact ground-truth flow.

A figure is a set of oriented textured rectangles (head, torso, pelvis,
upper/lower arms, thighs, shins). Each part carries its own pattern, defined
in part-local coordinates, so source and target renders are both exact and
the target-to-source flow is known in closed form: a target pixel inside part
k maps back through the target placement of k and forward through its source
placement. Parts never overlap in the source layout, so every target figure
pixel has a visible source correspondence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .types import (
    ARMS, BACKGROUND, DRESS, FACE, HAIR, LEGS, LOWER, NUM_GARMENTS, NUM_PARTS, UPPER,
    FlowPyramid, GarmentParsing, Image, PoseMap, SamplePair, check_size, make_residues, to_tensor,
)
from .warp import resize_flow

# name, part id, centre (x, y), half extents (a, b), angle (deg); 64 x 64 reference layout
PARTS = (
    ("head", 1, (32.0, 9.0), (5.0, 5.0), 0.0),
    ("torso", 2, (32.0, 23.0), (7.0, 7.0), 0.0),
    ("pelvis", 3, (32.0, 34.5), (7.0, 2.5), 0.0),
    ("l_upper_arm", 4, (20.5, 22.0), (2.5, 6.0), 8.0),
    ("l_forearm", 5, (18.5, 35.0), (2.5, 5.0), 4.0),
    ("r_upper_arm", 6, (43.5, 22.0), (2.5, 6.0), -8.0),
    ("r_forearm", 7, (45.5, 35.0), (2.5, 5.0), -4.0),
    ("l_thigh", 8, (28.0, 44.0), (3.0, 5.0), 0.0),
    ("l_shin", 9, (28.0, 55.5), (2.5, 4.5), 0.0),
    ("r_thigh", 10, (36.0, 44.0), (3.0, 5.0), 0.0),
    ("r_shin", 11, (36.0, 55.5), (2.5, 4.5), 0.0),
)
PART_NAMES = tuple(p[0] for p in PARTS)
# later parts are drawn on top
DRAW_ORDER = ("pelvis", "l_thigh", "r_thigh", "l_shin", "r_shin", "torso", "l_upper_arm", "r_upper_arm", "l_forearm", "r_forearm", "head")


@dataclass
class PartMotion:
    rotation_deg: float = 0.0
    shift: tuple = (0.0, 0.0)


@dataclass
class Deformation:
    """Per-part rigid motion about each part centre, plus a global shift (pixels at the 64 px reference)."""

    global_shift: tuple = (0.0, 0.0)
    parts: dict = field(default_factory=dict)

    @classmethod
    def identity(cls) -> "Deformation":
        return cls()

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Deformation":
        return cls(global_shift=(dx, dy))

    def motion(self, name: str) -> PartMotion:
        return self.parts.get(name, PartMotion())


@dataclass
class ToySample:
    pair: SamplePair
    flow: FlowPyramid
    source_mask: np.ndarray  # H x W bool, figure pixels
    target_mask: np.ndarray
    valid_mask: np.ndarray  # target figure pixels whose bilinear source footprint lies inside the same part
    deformation: Deformation


def _rot(deg):
    t = np.deg2rad(deg)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


class _Placement:
    """Affine map from part-local coordinates to image coordinates."""

    def __init__(self, centre, angle_deg, scale):
        self.centre = np.asarray(centre, dtype=np.float64) * scale
        self.rot = _rot(angle_deg)

    def to_local(self, xs, ys):
        d = np.stack([xs - self.centre[0], ys - self.centre[1]], -1)
        loc = d @ self.rot  # rot^T applied to row vectors
        return loc[..., 0], loc[..., 1]

    def to_image(self, lx, ly):
        loc = np.stack([lx, ly], -1)
        p = loc @ self.rot.T + self.centre
        return p[..., 0], p[..., 1]


def _part_texture(rng: np.random.Generator):
    """Random smooth pattern: base colour plus two oriented gratings (periods 9..16 px at 64 px)."""
    base = rng.uniform(-0.5, 0.5, 3)
    gratings = []
    for _ in range(2):
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(9.0, 16.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.15, 0.3, 3) * rng.choice([-1, 1], 3)
        gratings.append((np.cos(theta), np.sin(theta), 2 * np.pi / period, phase, amp))
    return base, gratings


def _eval_texture(tex, lx, ly, scale):
    base, gratings = tex
    out = np.broadcast_to(base, lx.shape + (3,)).copy()
    for cx, cy, k, phase, amp in gratings:
        out += np.sin(k * (cx * lx + cy * ly) / scale + phase)[..., None] * amp
    return out


def _outfit(rng):
    return {
        "dress": rng.random() < 0.25,
        "long_sleeves": rng.random() < 0.5,
        "long_pants": rng.random() < 0.5,
    }


def _garment_label(name, v, outfit):
    if name == "head":
        return np.where(v < 0.35, HAIR, FACE)
    if name in ("torso", "pelvis") and outfit["dress"]:
        return np.full(v.shape, DRESS)
    if name == "torso":
        return np.full(v.shape, UPPER)
    if name == "pelvis":
        return np.full(v.shape, LOWER)
    if name.endswith("upper_arm"):
        return np.full(v.shape, UPPER if outfit["long_sleeves"] or outfit["dress"] else ARMS)
    if name.endswith("forearm"):
        return np.full(v.shape, UPPER if outfit["long_sleeves"] else ARMS)
    if name.endswith("thigh"):
        return np.full(v.shape, DRESS if outfit["dress"] else LOWER)
    return np.full(v.shape, LOWER if outfit["long_pants"] and not outfit["dress"] else LEGS)


def _face_texture(rng):
    skin = np.array([0.6, 0.25, 0.05]) + rng.uniform(-0.1, 0.1, 3)
    hair = np.array([-0.6, -0.7, -0.75]) + rng.uniform(-0.1, 0.1, 3)
    return skin, hair


def random_deformation(rng: np.random.Generator, max_displacement: float = 8.0) -> Deformation:
    """Sample a small per-part deformation whose largest displacement is <= max_displacement (64 px units)."""
    g = rng.uniform(-3, 3, 2)
    parts = {}
    for name in PART_NAMES:
        rot = rng.uniform(-12, 12) if name != "head" else rng.uniform(-5, 5)
        parts[name] = PartMotion(rot, tuple(rng.uniform(-2.5, 2.5, 2)))
    d = Deformation(tuple(g), parts)
    peak = max_part_displacement(d)
    if peak > max_displacement:
        f = max_displacement / peak
        d = Deformation(tuple(g * f), {k: PartMotion(m.rotation_deg * f, tuple(np.asarray(m.shift) * f)) for k, m in parts.items()})
    return d


def max_part_displacement(d: Deformation) -> float:
    """Largest corner displacement over all parts, at the 64 px reference scale."""
    peak = 0.0
    for name, _, centre, (a, b), angle in PARTS:
        src = _Placement(centre, angle, 1.0)
        m = d.motion(name)
        corners_l = np.array([[-a, -b], [a, -b], [a, b], [-a, b]])
        sx, sy = src.to_image(corners_l[:, 0], corners_l[:, 1])
        tgt = _target_placement(centre, angle, m, d.global_shift, 1.0)
        tx, ty = tgt.to_image(corners_l[:, 0], corners_l[:, 1])
        peak = max(peak, float(np.hypot(tx - sx, ty - sy).max()))
    return peak


def _target_placement(centre, angle, motion: PartMotion, global_shift, scale):
    c = np.asarray(centre) + np.asarray(motion.shift) + np.asarray(global_shift)
    return _Placement(c, angle + motion.rotation_deg, scale)


def _render(placements, textures, skin_hair, outfit, size, scale, background):
    h = w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = background.copy()
    part_idx = np.zeros((h, w), dtype=np.int64)
    garment = np.full((h, w), BACKGROUND, dtype=np.int64)
    uv = np.zeros((h, w, 2))
    which = np.full((h, w), -1, dtype=np.int64)
    local = np.zeros((h, w, 2))
    lookup = {p[0]: (i, p) for i, p in enumerate(PARTS)}
    for name in DRAW_ORDER:
        i, (_, pid, _, (a, b), _) = lookup[name]
        a_s, b_s = a * scale, b * scale
        lx, ly = placements[name].to_local(xs, ys)
        inside = (np.abs(lx) <= a_s) & (np.abs(ly) <= b_s)
        u = (lx / a_s + 1) / 2
        v = (ly / b_s + 1) / 2
        labels = _garment_label(name, v, outfit)
        if name == "head":
            skin, hair = skin_hair
            tex = np.where((labels == HAIR)[..., None], hair, skin)
            tex = tex + 0.15 * np.sin(2 * np.pi * (lx + 0.5 * ly) / (6.0 * scale))[..., None]
        else:
            tex = _eval_texture(textures[name], lx, ly, scale)
        img[inside] = tex[inside]
        part_idx[inside] = pid
        garment[inside] = labels[inside]
        uv[inside] = np.stack([u, v], -1)[inside]
        which[inside] = i
        local[inside] = np.stack([lx, ly], -1)[inside]
    return np.clip(img, -1, 1), part_idx, garment, np.clip(uv, 0, 1), which, local


def _background(rng, size):
    ys, xs = np.mgrid[0:size, 0:size] / size
    c0 = rng.uniform(-0.2, 0.3, 3)
    gx, gy = rng.uniform(-0.3, 0.3, (2, 3))
    return np.clip(c0 + xs[..., None] * gx + ys[..., None] * gy, -1, 1)


def generate_toy_sample(
    seed: int,
    size: int = 64,
    deformation: Optional[Deformation] = None,
    num_parts: int = NUM_PARTS,
    num_garments: int = NUM_GARMENTS,
    max_displacement: float = 8.0,
    residue_fill: str = "diffusion",
) -> ToySample:
    check_size(size, size, "toy sample")
    rng = np.random.default_rng(int(seed))
    scale = size / 64.0
    textures = {name: _part_texture(rng) for name in PART_NAMES}
    skin_hair = _face_texture(rng)
    outfit = _outfit(rng)
    background = _background(rng, size)
    if deformation is None:
        deformation = random_deformation(rng, max_displacement)

    src_pl = {name: _Placement(c, ang, scale) for name, _, c, _, ang in PARTS}
    tgt_pl = {
        name: _target_placement(c, ang, deformation.motion(name), deformation.global_shift, scale)
        for name, _, c, _, ang in PARTS
    }
    s_img, s_parts, s_garm, s_uv, _, _ = _render(src_pl, textures, skin_hair, outfit, size, scale, background)
    t_img, t_parts, t_garm, t_uv, t_which, t_local = _render(tgt_pl, textures, skin_hair, outfit, size, scale, background)

    # exact target-to-source flow; background is static
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    flow = np.zeros((size, size, 2))
    valid = np.zeros((size, size), dtype=bool)
    for i, (name, _, _, (a, b), _) in enumerate(PARTS):
        m = t_which == i
        if not m.any():
            continue
        sx, sy = src_pl[name].to_image(t_local[m, 0], t_local[m, 1])
        flow[m, 0] = sx - xs[m]
        flow[m, 1] = sy - ys[m]
        # all four bilinear taps must land on this part in the source render
        ok = np.ones(sx.shape, dtype=bool)
        for ox in (0, 1):
            for oy in (0, 1):
                qx = np.clip(np.floor(sx).astype(int) + ox, 0, size - 1)
                qy = np.clip(np.floor(sy).astype(int) + oy, 0, size - 1)
                ok &= s_parts[qy, qx] == PARTS[i][1]
        valid[m] = ok

    flow_t = to_tensor(flow.astype(np.float32))
    levels = [flow_t]
    for l in range(1, 6):
        levels.append(resize_flow(flow_t, (size >> l, size >> l)))
    pyramid = FlowPyramid(tuple(f[0].permute(1, 2, 0).numpy() for f in levels))

    s_garment = GarmentParsing.from_indices(s_garm, num_garments)
    t_garment = GarmentParsing.from_indices(t_garm, num_garments)
    t_image = Image(t_img)
    pair = SamplePair(
        source_image=Image(s_img),
        source_pose=PoseMap.from_indices(s_parts, s_uv, num_parts),
        source_garment=s_garment,
        target_image=t_image,
        target_pose=PoseMap.from_indices(t_parts, t_uv, num_parts),
        target_garment=t_garment,
        target_residues=make_residues(t_image, t_garment, fill=residue_fill),
    )
    return ToySample(pair, pyramid, s_parts > 0, t_parts > 0, valid, deformation)


def toy_dataset(n: int, seed: int = 0, size: int = 64, **kw) -> list:
    return [generate_toy_sample(seed * 100003 + i, size, **kw) for i in range(n)]
