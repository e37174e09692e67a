"""Pose-conditioned flow estimator (FlowNetS layout at reduced width).

The network reads ``[I_s; P_s; P_t]`` stacked channel-wise and predicts a
six-level pyramid of target-to-source flows. Coarse levels come from the
FlowNetS refinement decoder; the two finest levels come from two x2 U-Net
upsampling modules in place of FlowNetS's final x4 bilinear upsampling.
Each level predicts a residual on top of the upsampled coarser flow.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .types import NUM_LEVELS, NUM_PARTS, SIZE_MULTIPLE, ValidationError
from .warp import resize_flow


@dataclass
class FlowNetConfig:
    num_parts: int = NUM_PARTS
    width: int = 64
    leaky_slope: float = 0.1

    @property
    def pose_channels(self) -> int:
        return self.num_parts + 2

    @property
    def in_channels(self) -> int:
        return 3 + 2 * self.pose_channels


def _conv(cin, cout, k, stride, slope):
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride, (k - 1) // 2), nn.LeakyReLU(slope))


def _deconv(cin, cout, slope):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.LeakyReLU(slope))


class FlowNet(nn.Module):
    def __init__(self, cfg: FlowNetConfig = None):
        super().__init__()
        cfg = cfg or FlowNetConfig()
        self.cfg = cfg
        c, s = cfg.width, cfg.leaky_slope
        self.conv1 = _conv(cfg.in_channels, c, 7, 2, s)
        self.conv2 = _conv(c, c, 5, 2, s)
        self.conv3 = nn.Sequential(_conv(c, c, 5, 2, s), _conv(c, c, 3, 1, s))
        self.conv4 = nn.Sequential(_conv(c, c, 3, 2, s), _conv(c, c, 3, 1, s))
        self.conv5 = nn.Sequential(_conv(c, c, 3, 2, s), _conv(c, c, 3, 1, s))
        self.conv6 = nn.Sequential(_conv(c, c, 3, 2, s), _conv(c, c, 3, 1, s))

        # decoder, indexed by the pyramid level each stage produces
        self.deconv5 = _deconv(c, c, s)
        self.deconv4 = _deconv(2 * c, c, s)
        self.deconv3 = _deconv(2 * c + 2, c, s)
        self.deconv2 = _deconv(2 * c + 2, c, s)
        self.deconv1 = _deconv(2 * c + 2, c, s)  # U-Net x2 module
        self.deconv0 = _deconv(2 * c + 2, c, s)  # U-Net x2 module
        head_in = [c + cfg.in_channels + 2] + [2 * c + 2] * 4 + [2 * c]
        self.heads = nn.ModuleList(nn.Conv2d(head_in[l], 2, 3, 1, 1) for l in range(NUM_LEVELS))

    def forward(self, source: torch.Tensor, target_pose: torch.Tensor) -> list:
        """``source`` is [I_s; P_s] (N, 3+Np+2, H, W); returns flows for levels 0..5."""
        cfg = self.cfg
        if source.shape[1] != 3 + cfg.pose_channels or target_pose.shape[1] != cfg.pose_channels:
            raise ValidationError(
                f"flow net expects {3 + cfg.pose_channels} source and {cfg.pose_channels} target channels, "
                f"got {source.shape[1]} and {target_pose.shape[1]}"
            )
        if source.shape[2:] != target_pose.shape[2:] or source.shape[0] != target_pose.shape[0]:
            raise ValidationError("source and target pose rasters differ in shape")
        h, w = source.shape[2:]
        if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
            raise ValidationError(f"H, W = ({h}, {w}) must be divisible by {SIZE_MULTIPLE}")

        x = torch.cat([source, target_pose], 1)
        c1 = self.conv1(x)
        c2 = self.conv2(c1)
        c3 = self.conv3(c2)
        c4 = self.conv4(c3)
        c5 = self.conv5(c4)
        c6 = self.conv6(c5)

        flows = [None] * NUM_LEVELS
        feat = torch.cat([c5, self.deconv5(c6)], 1)
        flows[5] = self.heads[5](feat)
        skips = {4: c4, 3: c3, 2: c2, 1: c1, 0: x}
        deconvs = {4: self.deconv4, 3: self.deconv3, 2: self.deconv2, 1: self.deconv1, 0: self.deconv0}
        for level in range(4, -1, -1):
            up = deconvs[level](feat)
            prev = resize_flow(flows[level + 1], up.shape[2:])
            feat = torch.cat([skips[level], up, prev], 1)
            flows[level] = prev + self.heads[level](feat)
        return flows


def init_flow_params(seed: int, cfg: FlowNetConfig = None) -> FlowNet:
    """Fan-in scaled init for convs, zero flow heads (initial flow is exactly 0)."""
    gen = torch.Generator().manual_seed(int(seed))
    net = FlowNet(cfg)
    slope = net.cfg.leaky_slope
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = m.weight[0].numel() if isinstance(m, nn.Conv2d) else m.weight.shape[0] * m.weight[0, 0].numel() // 4
                std = (2.0 / (1 + slope ** 2) / fan_in) ** 0.5
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                m.bias.zero_()
        for head in net.heads:
            head.weight.zero_()
            head.bias.zero_()
    return net


def flow_forward(params: FlowNet, source: torch.Tensor, target_pose: torch.Tensor) -> list:
    return params(source, target_pose)
