"""Desk-scale experiments on toy pairs: flow recovery, texture ablation, stage-II overfits.

Shared by the acceptance tests and the scripts in ``scripts/``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import Config, toy_config
from .metrics import epe, masked_metric, ssim
from .synthesis import garmentnet_forward, synthesisnet_forward
from .training import collate, predict_flows, train_flow
from .types import IDENTITY_CLASSES, to_raster
from .warp import inverse_warp

NO_TEXTURE = (0.0,) * 6


def flow_overfit_config(seed: int = 0, steps: int = 600, texture: bool = True, **overrides) -> Config:
    """Full-batch overfit of the flow net on toy pairs, no self-supervised substitution."""
    kw = {"train.seed": seed, "train.steps": steps, "train.batch_size": 8, "selfsup.ratio": 0.0}
    if not texture:
        kw["loss.beta"] = list(NO_TEXTURE)
    kw.update(overrides)
    return toy_config(**kw)


def figure_mask(pair) -> np.ndarray:
    """Target pixels outside the identity classes (background, face, hair)."""
    return ~np.isin(pair.target_garment.indices(), list(IDENTITY_CLASSES))


@dataclass
class FlowScores:
    epe: float  # mean over pairs of the in-figure end-point error
    masked_ssim: float  # mean over pairs of masked SSIM(warped source, target)
    per_pair_epe: list


def score_flow(net, samples, padding: str = "border") -> FlowScores:
    net.eval()
    epes, ssims = [], []
    for s in samples:
        b = collate([s.pair])
        flow = predict_flows(net, b)[0]
        warped = to_raster(inverse_warp(b.I_s, flow, padding))
        epes.append(epe(to_raster(flow), s.flow.levels[0], s.target_mask))
        ssims.append(masked_metric(ssim, warped, s.pair.target_image.data, figure_mask(s.pair)))
    net.train()
    return FlowScores(float(np.mean(epes)), float(np.mean(ssims)), epes)


def flow_recovery(samples, seed: int = 0, steps: int = 600, texture: bool = True, **overrides):
    """Train on ``samples`` and score against their ground-truth flows; returns (net, history, scores)."""
    cfg = flow_overfit_config(seed, steps, texture, **overrides)
    net, hist = train_flow(samples, cfg)
    return net, hist, score_flow(net, samples, cfg.warp.padding)


def garment_accuracy(garment_net, flow_net, samples) -> tuple:
    """(pixel accuracy of argmax vs G_t, worst |sum - 1|, smallest entry) of the output distribution."""
    hits, total, worst, low = 0, 0, 0.0, 1.0
    for s in samples:
        b = collate([s.pair])
        with torch.no_grad():
            probs = garmentnet_forward(garment_net, b.G_s, b.P_s, b.P_t, predict_flows(flow_net, b), b.G_r).result
        hits += int((probs.argmax(1) == b.G_t.argmax(1)).sum())
        total += probs[:, 0].numel()
        worst = max(worst, float((probs.sum(1) - 1).abs().max()))
        low = min(low, float(probs.min()))
    return hits / total, worst, low


def synthesis_masked_l1(synth_net, flow_net, samples, garment_net=None) -> float:
    """Mean over pairs of |I_hat - I_t| inside the figure mask, in [-1, 1] units."""
    vals = []
    for s in samples:
        b = collate([s.pair])
        flows = predict_flows(flow_net, b)
        with torch.no_grad():
            G_hat = b.G_t if garment_net is None else garmentnet_forward(garment_net, b.G_s, b.P_s, b.P_t, flows, b.G_r).result
            out = synthesisnet_forward(synth_net, b.I_s, b.P_s, G_hat, b.P_t, flows, b.I_r).result
        m = torch.from_numpy(figure_mask(s.pair))
        vals.append(float((out[0] - b.I_t[0]).abs().mean(0)[m].mean()))
    return float(np.mean(vals))

