"""Differentiable objectives for both stages.

Every raster term is mean-reduced so magnitudes do not depend on resolution.
Images are (N, 3, H, W) in [-1, 1]; flows are (N, 2, H, W) in pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import NUM_LEVELS
from .warp import inverse_warp, resize_image


@dataclass
class CharbonnierParams:
    eps: float = 1e-3
    alpha: float = 0.45

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("Charbonnier eps must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("Charbonnier alpha must be in (0, 1]")


@dataclass
class StageOneWeights:
    s: tuple = (1.0, 1.0, 0.5, 0.25, 0.125, 0.0)
    beta: tuple = (0.002, 0.002, 0.002, 0.002, 0.0, 0.0)
    gamma: tuple = (0.1, 0.1, 0.1, 0.1, 0.0, 0.0)

    def __post_init__(self):
        for name in ("s", "beta", "gamma"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != NUM_LEVELS:
                raise ValueError(f"{name} must have {NUM_LEVELS} entries, got {len(v)}")
            if any(x < 0 for x in v):
                raise ValueError(f"{name} entries must be >= 0")
            setattr(self, name, v)
        if self.beta[-1] != 0:
            raise ValueError("beta_5 has no feature tap and must be 0")


# ----------------------------------------------------------------------------
# feature extractor

VGG_TAPS = {"relu1_2": 3, "relu2_2": 8, "relu3_2": 13, "relu4_2": 20, "relu4_3": 22}


class FeatureExtractor(nn.Module):
    """Frozen feature stack with five tap points L0..L4.

    ``random`` is a seeded stride-2 conv/ReLU stack (widths 16/32/64/64/64) that
    runs offline; ``vgg16`` uses torchvision's ImageNet VGG16 when its weights
    are available locally, tapping relu1_2, relu2_2, relu3_2, relu4_2, relu4_3.
    """

    def __init__(self, backend: str = "random", seed: int = 0, widths=(16, 32, 64, 64, 64)):
        super().__init__()
        self.backend = backend
        if backend == "random":
            gen = torch.Generator().manual_seed(int(seed))
            stages, cin = [], 3
            for cout in widths:
                conv = nn.Conv2d(cin, cout, 3, 2, 1)
                with torch.no_grad():
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (cin * 9)) ** 0.5)
                    conv.bias.copy_(torch.randn(cout, generator=gen) * 0.01)
                stages.append(nn.Sequential(conv, nn.ReLU()))
                cin = cout
            self.stages = nn.ModuleList(stages)
        elif backend == "vgg16":
            import torchvision

            try:
                vgg = torchvision.models.vgg16(weights="IMAGENET1K_V1").features[: VGG_TAPS["relu4_3"] + 1]
            except Exception as e:  # weights missing offline
                raise RuntimeError("pretrained VGG16 weights unavailable; use backend='random'") from e
            cuts = list(VGG_TAPS.values())
            self.stages = nn.ModuleList(vgg[a + 1 if i else 0 : b + 1] for i, (a, b) in enumerate(zip([0] + cuts[:-1], cuts)))
            self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        else:
            raise ValueError(f"unknown feature backend {backend!r}")
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list:
        if self.backend == "vgg16":
            x = ((x + 1) / 2 - self.mean) / self.std
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


# ----------------------------------------------------------------------------
# terms


def charbonnier(x: torch.Tensor, cp: CharbonnierParams = CharbonnierParams()) -> torch.Tensor:
    return (x * x + cp.eps ** 2) ** cp.alpha


def photometric_loss(i_t: torch.Tensor, warped_src: torch.Tensor, cp: CharbonnierParams = CharbonnierParams()) -> torch.Tensor:
    if i_t.shape != warped_src.shape:
        raise ValueError(f"shape mismatch {tuple(i_t.shape)} vs {tuple(warped_src.shape)}")
    return charbonnier(i_t - warped_src, cp).mean()


def tv_loss(flow: torch.Tensor) -> torch.Tensor:
    """Forward-difference total variation: per-pixel sum over channels, mean over positions."""
    terms = []
    if flow.shape[-1] > 1:
        terms.append((flow[..., :, 1:] - flow[..., :, :-1]).abs().sum(1).mean())
    if flow.shape[-2] > 1:
        terms.append((flow[..., 1:, :] - flow[..., :-1, :]).abs().sum(1).mean())
    return sum(terms) if terms else flow.sum() * 0


def gram(features: torch.Tensor) -> torch.Tensor:
    """(N, C, H, W) -> (N, C, C), normalized by H*W."""
    n, c, h, w = features.shape
    f = features.reshape(n, c, h * w)
    return f @ f.transpose(1, 2) / (h * w)


def texture_loss(i_t: torch.Tensor, warped_src: torch.Tensor, fx: FeatureExtractor) -> list:
    """Per-tap mean absolute Gram-matrix difference."""
    fa, fb = fx(i_t), fx(warped_src)
    return [(gram(a) - gram(b)).abs().mean() for a, b in zip(fa, fb)]


def vgg_feature_loss(a: torch.Tensor, b: torch.Tensor, fx: FeatureExtractor, tap: int = 3) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    return (fx(a)[tap] - fx(b)[tap]).abs().mean()


def lsgan_losses(d_real: torch.Tensor, d_fake: torch.Tensor):
    disc = ((d_real - 1) ** 2).mean() + (d_fake ** 2).mean()
    gen = ((d_fake - 1) ** 2).mean()
    return disc, gen


def garment_cross_entropy(probs: torch.Tensor, target: torch.Tensor, floor: float = 1e-12) -> torch.Tensor:
    """Mean over pixels of -sum_n G_t log G_hat."""
    return -(target * torch.log(probs.clamp_min(floor))).sum(1).mean()


@dataclass
class StageOneTerms:
    total: torch.Tensor
    terms: dict = field(default_factory=dict)  # (term, level) -> tensor

    def as_rows(self, step: int) -> list:
        rows = [(step, name, level, v.item()) for (name, level), v in self.terms.items()]
        rows.append((step, "total", "", self.total.item()))
        return rows


def stage1_loss(
    i_s: torch.Tensor,
    i_t: torch.Tensor,
    flows,
    weights: StageOneWeights = None,
    cp: CharbonnierParams = None,
    fx: FeatureExtractor = None,
    padding: str = "border",
) -> StageOneTerms:
    """Multi-scale photometric + texture + TV objective.

    Texture is evaluated once per feature tap on the level-0 warp and weighted
    by beta_l for tap l; beta_5 has no tap and must be zero.
    """
    weights = weights or StageOneWeights()
    cp = cp or CharbonnierParams()
    if len(flows) != NUM_LEVELS:
        raise ValueError(f"expected {NUM_LEVELS} flow levels, got {len(flows)}")
    if weights.beta[-1] != 0:
        raise ValueError("beta_5 has no feature tap and must be 0")
    terms = {}
    total = i_s.new_zeros(())

    need_texture = any(s * b > 0 for s, b in zip(weights.s, weights.beta))
    tex = None
    if need_texture:
        if fx is None:
            raise ValueError("texture weights set but no feature extractor given")
        tex = texture_loss(i_t, inverse_warp(i_s, flows[0], padding), fx)

    for l, flow in enumerate(flows):
        s, b, g = weights.s[l], weights.beta[l], weights.gamma[l]
        if s == 0:
            continue
        size = flow.shape[-2:]
        src_l, tgt_l = resize_image(i_s, size), resize_image(i_t, size)
        lp = photometric_loss(tgt_l, inverse_warp(src_l, flow, padding), cp)
        terms[("photometric", l)] = lp
        level_total = lp
        if b > 0:
            terms[("texture", l)] = tex[l]
            level_total = level_total + b * tex[l]
        if g > 0:
            lt = tv_loss(flow)
            terms[("tv", l)] = lt
            level_total = level_total + g * lt
        total = total + s * level_total
    return StageOneTerms(total, terms)
