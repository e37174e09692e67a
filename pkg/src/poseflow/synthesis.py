"""Shared encoder / gated-attention / decoder network used as GarmentNet and SynthesisNet.

The source stream is encoded by six stride-2 convs followed by residual
blocks at the coarsest level, the target stream by six stride-2 convs.
Source features at every encoder level are inverse-warped with the matching
flow level, filtered by a per-pixel gate computed from a learned bilinear
similarity with the target features, and fused coarse-to-fine by a U-Net
decoder. Two 3x3 heads give foreground content and a blending mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import NUM_GARMENTS, NUM_LEVELS, NUM_PARTS, SIZE_MULTIPLE, ValidationError
from .warp import inverse_warp, resize_flow

GARMENT = "garment"
SYNTHESIS = "synthesis"


@dataclass
class SynthConfig:
    kind: str = SYNTHESIS
    num_parts: int = NUM_PARTS
    num_garments: int = NUM_GARMENTS
    width: int = 64
    max_mult: int = 4
    num_res_blocks: int = 7
    norm: str = "instance"  # or "none"
    leaky_slope: float = 0.2
    attention: bool = True  # False: plain concatenation of warped features
    use_flow: bool = True  # False: no feature alignment
    padding: str = "border"

    def __post_init__(self):
        if self.kind not in (GARMENT, SYNTHESIS):
            raise ValueError(f"kind must be {GARMENT!r} or {SYNTHESIS!r}")
        if self.norm not in ("instance", "none"):
            raise ValueError(f"norm must be 'instance' or 'none', got {self.norm!r}")

    @property
    def pose_channels(self) -> int:
        return self.num_parts + 2

    @property
    def source_channels(self) -> int:
        lead = self.num_garments if self.kind == GARMENT else 3
        return lead + self.pose_channels

    @property
    def target_channels(self) -> int:
        return self.pose_channels if self.kind == GARMENT else self.num_garments + self.pose_channels

    @property
    def out_channels(self) -> int:
        return self.num_garments if self.kind == GARMENT else 3

    def level_width(self, l: int) -> int:
        return self.width * min(2 ** l, self.max_mult)


@dataclass
class SynthOutput:
    out: torch.Tensor  # blended, before softmax / tanh
    fg: torch.Tensor
    mask: torch.Tensor
    result: torch.Tensor  # softmax(out) for GarmentNet, tanh(out) for SynthesisNet
    attention_gates: list = field(default_factory=list)


class _Norm(nn.Module):
    """Instance norm that passes through maps too small for meaningful statistics."""

    min_area = 16

    def __init__(self, channels: int, kind: str):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=True) if kind == "instance" else None

    def forward(self, x):
        if self.norm is None or x.shape[-1] * x.shape[-2] < self.min_area:
            return x
        return self.norm(x)


class _Down(nn.Module):
    def __init__(self, cin, cout, cfg):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, 2, 1)
        self.norm = _Norm(cout, cfg.norm)
        self.act = nn.LeakyReLU(cfg.leaky_slope)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class _Up(nn.Module):
    def __init__(self, cin, cout, cfg):
        super().__init__()
        self.conv = nn.ConvTranspose2d(cin, cout, 4, 2, 1)
        self.norm = _Norm(cout, cfg.norm)
        self.act = nn.LeakyReLU(cfg.leaky_slope)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResBlock(nn.Module):
    def __init__(self, c, cfg):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, 1, 1)
        self.norm1 = _Norm(c, cfg.norm)
        self.conv2 = nn.Conv2d(c, c, 3, 1, 1)
        self.norm2 = _Norm(c, cfg.norm)
        self.act = nn.LeakyReLU(cfg.leaky_slope)

    def forward(self, x):
        y = self.act(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(y))


class Encoder(nn.Module):
    def __init__(self, cin, cfg: SynthConfig, res_blocks: int = 0):
        super().__init__()
        widths = [cfg.level_width(l) for l in range(NUM_LEVELS)]
        self.downs = nn.ModuleList(_Down(a, b, cfg) for a, b in zip([cin] + widths[:-1], widths))
        self.res = nn.Sequential(*[ResBlock(widths[-1], cfg) for _ in range(res_blocks)])

    def forward(self, x) -> list:
        feats = []
        for down in self.downs:
            x = down(x)
            feats.append(x)
        feats[-1] = self.res(feats[-1])
        return feats


def gated_attention(f_warp: torch.Tensor, f_t: torch.Tensor, W):
    """Filter warped source features by sigmoid(f_warp^T W f_t), one gate per pixel.

    ``W`` is a 1x1 conv module or a (C_t, C_s) matrix. Returns ``(filtered, gate)``
    with gate shaped (N, 1, H, W).
    """
    if f_warp.shape[0] != f_t.shape[0] or f_warp.shape[2:] != f_t.shape[2:]:
        raise ValueError(f"spatial shape mismatch {tuple(f_warp.shape)} vs {tuple(f_t.shape)}")
    if isinstance(W, nn.Module):
        proj = W(f_warp)
    else:
        if W.shape != (f_t.shape[1], f_warp.shape[1]):
            raise ValueError(f"W must be ({f_t.shape[1]}, {f_warp.shape[1]}), got {tuple(W.shape)}")
        proj = torch.einsum("ts,nshw->nthw", W, f_warp)
    if proj.shape[1] != f_t.shape[1]:
        raise ValueError("channel mismatch between projected source and target features")
    # clamp so the gate stays strictly inside (0, 1) at working precision
    limit = -math.log(torch.finfo(f_warp.dtype).eps)
    gate = torch.sigmoid((proj * f_t).sum(1, keepdim=True).clamp(-limit, limit))
    return f_warp * gate, gate


class SynthNet(nn.Module):
    def __init__(self, cfg: SynthConfig = None):
        super().__init__()
        cfg = cfg or SynthConfig()
        self.cfg = cfg
        widths = [cfg.level_width(l) for l in range(NUM_LEVELS)]
        self.enc_s = Encoder(cfg.source_channels, cfg, cfg.num_res_blocks)
        self.enc_t = Encoder(cfg.target_channels, cfg)
        self.attn = nn.ModuleList(nn.Conv2d(c, c, 1, bias=False) for c in widths)
        ups, prev = [], 0
        for l in range(NUM_LEVELS - 1, -1, -1):
            cout = widths[l - 1] if l > 0 else cfg.width
            ups.append(_Up(prev + 2 * widths[l], cout, cfg))
            prev = cout
        self.ups = nn.ModuleList(ups)
        self.fg_head = nn.Conv2d(cfg.width, cfg.out_channels, 3, 1, 1)
        self.mask_head = nn.Conv2d(cfg.width, 1, 3, 1, 1)

    # pieces ------------------------------------------------------------------

    def _check(self, x, channels, name):
        if x.dim() != 4 or x.shape[1] != channels:
            raise ValidationError(f"{name}: expected {channels} channels, got {tuple(x.shape)}")
        h, w = x.shape[2:]
        if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
            raise ValidationError(f"{name}: H, W = ({h}, {w}) must be divisible by {SIZE_MULTIPLE}")

    def encode_source(self, in_s):
        self._check(in_s, self.cfg.source_channels, "source input")
        return self.enc_s(in_s)

    def encode_target(self, in_t):
        self._check(in_t, self.cfg.target_channels, "target input")
        return self.enc_t(in_t)

    def align(self, f_s: list, flows) -> list:
        """Warp encoder level l with flow level min(l+1, 5), resized to the feature grid."""
        if not self.cfg.use_flow:
            return list(f_s)
        out = []
        for l, f in enumerate(f_s):
            flow = resize_flow(flows[min(l + 1, NUM_LEVELS - 1)], f.shape[2:])
            out.append(inverse_warp(f, flow, self.cfg.padding))
        return out

    def filter(self, f_warp: list, f_t: list):
        if not self.cfg.attention:
            return list(f_warp), []
        filtered, gates = [], []
        for l, (a, b) in enumerate(zip(f_warp, f_t)):
            f, g = gated_attention(a, b, self.attn[l])
            filtered.append(f)
            gates.append(g)
        return filtered, gates

    def decode(self, filtered: list, f_t: list) -> torch.Tensor:
        x = None
        for j, up in enumerate(self.ups):
            l = NUM_LEVELS - 1 - j
            parts = [filtered[l], f_t[l]] if x is None else [x, filtered[l], f_t[l]]
            x = up(torch.cat(parts, 1))
        return x

    def heads_and_blend(self, f_dec, residue, mask_override=None) -> SynthOutput:
        if residue.shape[2:] != f_dec.shape[2:] or residue.shape[1] != self.cfg.out_channels:
            raise ValidationError(f"residue shape {tuple(residue.shape)} does not match output")
        fg = self.fg_head(f_dec)
        mask = torch.sigmoid(self.mask_head(f_dec)) if mask_override is None else mask_override
        out = mask * fg + (1 - mask) * residue
        result = torch.softmax(out, 1) if self.cfg.kind == GARMENT else torch.tanh(out)
        return SynthOutput(out, fg, mask, result)

    # full pass ---------------------------------------------------------------

    def forward(self, in_s, in_t, flows, residue, mask_override=None) -> SynthOutput:
        f_s = self.encode_source(in_s)
        f_t = self.encode_target(in_t)
        filtered, gates = self.filter(self.align(f_s, flows), f_t)
        o = self.heads_and_blend(self.decode(filtered, f_t), residue, mask_override)
        o.attention_gates = gates
        return o


def init_synth_params(seed: int, cfg: SynthConfig = None) -> SynthNet:
    torch.manual_seed(int(seed))
    net = SynthNet(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = m.weight[0].numel() if isinstance(m, nn.Conv2d) else m.weight.shape[0] * m.weight[0, 0].numel() // 4
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (1.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()
        for a in net.attn:
            a.weight.mul_(0.1)
    return net


def garmentnet_forward(params: SynthNet, G_s, P_s, P_t, flows, G_r, mask_override=None) -> SynthOutput:
    """Predict the target garment parsing; ``result`` is a per-pixel distribution over classes."""
    if params.cfg.kind != GARMENT:
        raise ValidationError("garmentnet_forward needs a GarmentNet configuration")
    return params(torch.cat([G_s, P_s], 1), P_t, flows, G_r, mask_override)


def synthesisnet_forward(params: SynthNet, I_s, P_s, G_hat, P_t, flows, I_r, mask_override=None) -> SynthOutput:
    """Synthesize the target image; ``result`` lies in [-1, 1]."""
    if params.cfg.kind != SYNTHESIS:
        raise ValidationError("synthesisnet_forward needs a SynthesisNet configuration")
    return params(torch.cat([I_s, P_s], 1), torch.cat([G_hat, P_t], 1), flows, I_r, mask_override)
