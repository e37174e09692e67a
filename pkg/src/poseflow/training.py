"""Training loops for the flow estimator, GarmentNet and SynthesisNet, plus the discriminator."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import maybe_substitute
from .config import Config
from .flownet import FlowNet, init_flow_params
from .io import PairRecord, save_checkpoint
from .losses import FeatureExtractor, garment_cross_entropy, lsgan_losses, stage1_loss, texture_loss, vgg_feature_loss
from .synthesis import SynthNet, garmentnet_forward, init_synth_params, synthesisnet_forward
from .types import SamplePair, to_tensor

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "term", "level", "value")


class TrainingError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# spectral normalization


def _l2n(x, eps=1e-12):
    return x / (x.norm() + eps)


def spectral_normalize(weight: torch.Tensor, power_iters: int = 1, u: Optional[torch.Tensor] = None):
    """Divide ``weight`` by a power-iteration estimate of its largest singular value.

    The weight is unrolled to (out, -1). Returns ``(normalized, sigma, u)``;
    pass ``u`` back in to continue the iteration across calls.
    """
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    w = weight.reshape(weight.shape[0], -1)
    if u is None:
        u = _l2n(torch.randn(w.shape[0], dtype=w.dtype, generator=torch.Generator().manual_seed(0)))
    with torch.no_grad():
        for _ in range(power_iters):
            v = _l2n(w.t() @ u)
            u = _l2n(w @ v)
    sigma = u @ (w @ v)
    return weight / sigma, sigma, u


class SNConv2d(nn.Module):
    """Conv2d whose weight is divided by its spectral norm; u/v advance only in :meth:`power_iterate`."""

    def __init__(self, cin, cout, k, stride=1, padding=0, gen=None):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = nn.Parameter(torch.randn(cout, cin, k, k, generator=gen) * (2.0 / (cin * k * k)) ** 0.5)
        self.bias = nn.Parameter(torch.zeros(cout))
        self.register_buffer("u", _l2n(torch.randn(cout, generator=gen)))
        self.register_buffer("v", _l2n(torch.randn(cin * k * k, generator=gen)))

    def _matrix(self):
        return self.weight.reshape(self.weight.shape[0], -1)

    @torch.no_grad()
    def power_iterate(self, n: int = 1, tol: float = 0.0, max_iters: int = 200):
        """At least ``n`` iterations; with ``tol`` > 0, continue until sigma moves by less than ``tol`` (relative)."""
        w = self._matrix()
        u, v = self.u, self.v
        prev = float(u @ (w @ v))
        for i in range(max(n, max_iters if tol > 0 else n)):
            v = _l2n(w.t() @ u)
            u = _l2n(w @ v)
            cur = float(u @ (w @ v))
            if i + 1 >= n and abs(cur - prev) <= tol * abs(cur):
                break
            prev = cur
        self.u.copy_(u)
        self.v.copy_(v)

    def sigma(self):
        return self.u @ (self._matrix() @ self.v)

    def normalized_weight(self):
        return self.weight / self.sigma()

    def forward(self, x):
        return F.conv2d(x, self.normalized_weight(), self.bias, self.stride, self.padding)


def estimate_sigma(matrix: torch.Tensor, iters: int = 100, u=None) -> float:
    """Largest singular value by power iteration (used to audit normalized weights)."""
    w = matrix.detach().reshape(matrix.shape[0], -1).double()
    u = _l2n(torch.ones(w.shape[0], dtype=w.dtype)) if u is None else _l2n(u.double())
    for _ in range(iters):
        v = _l2n(w.t() @ u)
        u = _l2n(w @ v)
    return float(u @ (w @ v))


class Discriminator(nn.Module):
    """PatchGAN: four stride-2 4x4 convs and a 1x1 head, all spectrally normalized."""

    def __init__(self, in_channels: int = 3, width: int = 64, seed: int = 0, warmup_iters: int = 300):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        widths = [width, width * 2, width * 4, width * 4]
        layers, cin = [], in_channels
        for c in widths:
            layers += [SNConv2d(cin, c, 4, 2, 1, gen), nn.LeakyReLU(0.2)]
            cin = c
        layers.append(SNConv2d(cin, 1, 1, 1, 0, gen))
        self.net = nn.Sequential(*layers)
        self.power_iterate(warmup_iters)

    def sn_layers(self) -> list:
        return [m for m in self.modules() if isinstance(m, SNConv2d)]

    def power_iterate(self, n: int = 1, tol: float = 0.0):
        for m in self.sn_layers():
            m.power_iterate(n, tol)

    def normalized_sigmas(self, iters: int = 100) -> list:
        return [estimate_sigma(m.normalized_weight(), iters, m.u) for m in self.sn_layers()]

    def forward(self, x):
        return self.net(x)


# ----------------------------------------------------------------------------
# data


@dataclass
class Batch:
    I_s: torch.Tensor
    P_s: torch.Tensor
    G_s: torch.Tensor
    I_t: torch.Tensor
    P_t: torch.Tensor
    G_t: torch.Tensor
    I_r: torch.Tensor
    G_r: torch.Tensor
    substituted: list = field(default_factory=list)

    def to_numpy(self) -> dict:
        return {k: v.numpy() for k, v in self.__dict__.items() if isinstance(v, torch.Tensor)}


def collate(pairs: list, substituted=None) -> Batch:
    cat = lambda xs: torch.cat([to_tensor(x) for x in xs], 0)
    return Batch(
        I_s=cat([p.source_image.data for p in pairs]),
        P_s=cat([p.source_pose.stacked() for p in pairs]),
        G_s=cat([p.source_garment.classes for p in pairs]),
        I_t=cat([p.target_image.data for p in pairs]),
        P_t=cat([p.target_pose.stacked() for p in pairs]),
        G_t=cat([p.target_garment.classes for p in pairs]),
        I_r=cat([p.target_residues.image_residue.data for p in pairs]),
        G_r=cat([p.target_residues.garment_residue for p in pairs]),
        substituted=list(substituted or [False] * len(pairs)),
    )


def _pairs(dataset) -> list:
    out = []
    for item in dataset:
        if isinstance(item, SamplePair):
            out.append(item)
        elif isinstance(item, PairRecord):
            out.append(item.pair)
        else:  # ToySample
            out.append(item.pair)
    return out


STAGE_IDS = {"flow": 1, "garment": 2, "synthesis": 3}


def iterate_batches(pairs: list, cfg: Config, stage: str, epoch: int, ratio: float, direction: str):
    """Seeded shuffle and per-sample self-supervision; every batch has its own RNG stream."""
    seed = cfg.train.seed
    order = np.random.default_rng([seed, STAGE_IDS[stage], epoch]).permutation(len(pairs))
    bs = cfg.train.batch_size
    chunks = [order[i : i + bs] for i in range(0, len(order), bs)]

    def build(b):
        rng = np.random.default_rng([seed, STAGE_IDS[stage], epoch, b])
        items, flags = [], []
        for i in chunks[b]:
            p, sub = maybe_substitute(pairs[i], rng, ratio, direction, cfg.aug, residue_fill=cfg.data.residue_fill) if ratio > 0 else (pairs[i], False)
            items.append(p)
            flags.append(sub)
        return collate(items, flags)

    if cfg.train.workers > 1:
        with ThreadPoolExecutor(cfg.train.workers) as ex:
            yield from ex.map(build, range(len(chunks)))
    else:
        for b in range(len(chunks)):
            yield build(b)


def _schedule(cfg: Config, stage: str, n_pairs: int):
    """Yield epoch numbers; with ``train.steps`` set, the caller stops after that many steps."""
    epochs = cfg.train.epochs[list(STAGE_IDS).index(stage)]
    if cfg.train.steps > 0:
        e = 0
        while True:
            yield e
            e += 1
    else:
        yield from range(epochs)


# ----------------------------------------------------------------------------
# logging / checkpoints


@dataclass
class History:
    rows: list = field(default_factory=list)

    def add(self, step, term, value, level=""):
        self.rows.append((int(step), term, level, float(value)))

    def values(self, term, level="") -> list:
        return [r[3] for r in self.rows if r[1] == term and r[2] == level]

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for step, term, level, value in self.rows:
                w.writerow((step, term, level, repr(value)))


def _metadata(cfg: Config, stage: str, epoch: int, step: int, **extra) -> dict:
    meta = {
        "stage": stage,
        "epoch": epoch,
        "step": step,
        "config_hash": cfg.hash(),
        "feature_backend": cfg.loss.feature_backend,
        "warp_padding": cfg.warp.padding,
        "lr_schedule": "constant",
        "config": cfg.to_dict(),
    }
    meta.update(extra)
    return meta


def _checkpoint(run_dir, name, module, meta):
    if run_dir is not None:
        save_checkpoint(Path(run_dir) / "checkpoints" / f"{name}.pfck", module, meta)


def _check_finite(loss, batch: Batch, run_dir, stage, step):
    if torch.isfinite(loss):
        return
    if run_dir is not None:
        dump = Path(run_dir) / "logs" / f"nan_{stage}_step{step}.npz"
        dump.parent.mkdir(parents=True, exist_ok=True)
        np.savez(dump, **batch.to_numpy())
        raise TrainingError(f"{stage}: non-finite loss at step {step}; last batch dumped to {dump}")
    raise TrainingError(f"{stage}: non-finite loss at step {step}")


def make_adam(params, lr, cfg: Config):
    return torch.optim.Adam(params, lr=lr, betas=(cfg.train.adam_beta1, cfg.train.adam_beta2))


def _freeze(net: nn.Module) -> nn.Module:
    net.requires_grad_(False)
    net.eval()
    return net


def feature_extractor(cfg: Config) -> FeatureExtractor:
    return FeatureExtractor(cfg.loss.feature_backend, cfg.loss.feature_seed)


# ----------------------------------------------------------------------------
# Stage I


def train_flow(dataset, cfg: Config, run_dir=None, params: FlowNet = None, callback=None):
    """Adam over the multi-scale objective with self-supervised substitution; returns (net, history)."""
    pairs = _pairs(dataset)
    net = params if params is not None else init_flow_params(cfg.train.seed, cfg.flow_net())
    net.train()
    opt = make_adam(net.parameters(), cfg.train.lr_gen, cfg)
    weights, cp = cfg.loss.stage_one(), cfg.loss.charbonnier()
    fx = feature_extractor(cfg) if any(b > 0 for b in weights.beta) else None
    hist = History()
    step, epoch = 0, -1
    limit = cfg.train.steps
    for epoch in _schedule(cfg, "flow", len(pairs)):
        if limit and step >= limit:
            break
        for batch in iterate_batches(pairs, cfg, "flow", epoch, cfg.selfsup.ratio, cfg.selfsup.direction):
            if limit and step >= limit:
                break
            flows = net(torch.cat([batch.I_s, batch.P_s], 1), batch.P_t)
            terms = stage1_loss(batch.I_s, batch.I_t, flows, weights, cp, fx, cfg.warp.padding)
            _check_finite(terms.total, batch, run_dir, "flow", step)
            opt.zero_grad()
            terms.total.backward()
            opt.step()
            for row in terms.as_rows(step):
                hist.rows.append(row)
            if callback:
                callback(step, net, terms)
            step += 1
        if run_dir is not None and (epoch + 1) % cfg.train.checkpoint_every == 0:
            _checkpoint(run_dir, f"flow_e{epoch + 1:03d}", net, _metadata(cfg, "flow", epoch + 1, step))
    _checkpoint(run_dir, "flow", net, _metadata(cfg, "flow", epoch + 1, step))
    return net, hist


def predict_flows(flow_net: FlowNet, batch: Batch):
    with torch.no_grad():
        return [f.detach() for f in flow_net(torch.cat([batch.I_s, batch.P_s], 1), batch.P_t)]


# ----------------------------------------------------------------------------
# Stage II


def train_garment(dataset, flow_net: FlowNet, cfg: Config, run_dir=None, params: SynthNet = None, callback=None):
    pairs = _pairs(dataset)
    flow_net = _freeze(flow_net)
    net = params if params is not None else init_synth_params(cfg.train.seed, cfg.garment_net())
    opt = make_adam(net.parameters(), cfg.train.lr_gen, cfg)
    hist = History()
    step, epoch, limit = 0, -1, cfg.train.steps
    for epoch in _schedule(cfg, "garment", len(pairs)):
        if limit and step >= limit:
            break
        for batch in iterate_batches(pairs, cfg, "garment", epoch, 0.0, "source"):
            if limit and step >= limit:
                break
            flows = predict_flows(flow_net, batch)
            out = garmentnet_forward(net, batch.G_s, batch.P_s, batch.P_t, flows, batch.G_r)
            loss = garment_cross_entropy(out.result, batch.G_t)
            _check_finite(loss, batch, run_dir, "garment", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            hist.add(step, "cross_entropy", loss.item())
            if callback:
                callback(step, net, loss)
            step += 1
        if run_dir is not None and (epoch + 1) % cfg.train.checkpoint_every == 0:
            _checkpoint(run_dir, f"garment_e{epoch + 1:03d}", net, _metadata(cfg, "garment", epoch + 1, step))
    _checkpoint(run_dir, "garment", net, _metadata(cfg, "garment", epoch + 1, step))
    return net, hist


def generator_loss(I_hat, I_t, fx: FeatureExtractor, lambdas, disc: Discriminator = None, disc_input=None):
    """Weighted L1 + feature + Gram texture + LSGAN generator terms; returns (total, terms)."""
    l1_w, vgg_w, tex_w, gan_w = lambdas
    terms = {"l1": (I_hat - I_t).abs().mean()}
    total = l1_w * terms["l1"]
    if vgg_w > 0:
        terms["vgg"] = vgg_feature_loss(I_hat, I_t, fx)
        total = total + vgg_w * terms["vgg"]
    if tex_w > 0:
        terms["texture"] = sum(texture_loss(I_hat, I_t, fx))
        total = total + tex_w * terms["texture"]
    if gan_w > 0:
        if disc is None:
            raise ValueError("GAN weight set but no discriminator given")
        d_fake = disc(disc_input if disc_input is not None else I_hat)
        terms["gan_gen"] = ((d_fake - 1) ** 2).mean()
        total = total + gan_w * terms["gan_gen"]
    return total, terms


def _disc_input(img, batch: Batch, cfg: Config):
    return torch.cat([img, batch.P_t], 1) if cfg.train.disc_pose_cond else img


def synthesize(snet: SynthNet, garment_net: Optional[SynthNet], flows, batch: Batch, teacher_forcing: bool = False):
    if teacher_forcing or garment_net is None:
        G_hat = batch.G_t
    else:
        with torch.no_grad():
            G_hat = garmentnet_forward(garment_net, batch.G_s, batch.P_s, batch.P_t, flows, batch.G_r).result
    return synthesisnet_forward(snet, batch.I_s, batch.P_s, G_hat, batch.P_t, flows, batch.I_r)


def train_synthesis(
    dataset, flow_net: FlowNet, garment_net: SynthNet, cfg: Config, run_dir=None,
    params: SynthNet = None, disc: Discriminator = None, callback=None,
):
    """Alternating discriminator / generator steps; returns (net, discriminator, history)."""
    pairs = _pairs(dataset)
    flow_net = _freeze(flow_net)
    if garment_net is not None:
        garment_net = _freeze(garment_net)
    net = params if params is not None else init_synth_params(cfg.train.seed, cfg.synthesis_net())
    lambdas = cfg.train.lambdas
    use_gan = lambdas[3] > 0
    d_in = 3 + (cfg.data.num_parts + 2 if cfg.train.disc_pose_cond else 0)
    if disc is None:
        disc = Discriminator(d_in, cfg.train.disc_width, cfg.train.seed)
    opt_g = make_adam(net.parameters(), cfg.train.lr_gen, cfg)
    opt_d = make_adam(disc.parameters(), cfg.train.lr_disc, cfg)
    fx = feature_extractor(cfg) if lambdas[1] > 0 or lambdas[2] > 0 else None
    hist = History()
    step, epoch, limit = 0, -1, cfg.train.steps
    for epoch in _schedule(cfg, "synthesis", len(pairs)):
        if limit and step >= limit:
            break
        for batch in iterate_batches(pairs, cfg, "synthesis", epoch, cfg.selfsup.synth_ratio, "source"):
            if limit and step >= limit:
                break
            flows = predict_flows(flow_net, batch)
            out = synthesize(net, garment_net, flows, batch, cfg.train.teacher_forcing)
            I_hat = out.result

            if use_gan:
                disc.requires_grad_(True)
                disc.power_iterate(cfg.train.power_iters, cfg.train.power_tol)
                d_real = disc(_disc_input(batch.I_t, batch, cfg))
                d_fake = disc(_disc_input(I_hat.detach(), batch, cfg))
                d_loss, _ = lsgan_losses(d_real, d_fake)
                _check_finite(d_loss, batch, run_dir, "discriminator", step)
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
                # the update moves the weights; refresh u/v so the generator step and any audit see a current sigma
                disc.power_iterate(cfg.train.power_iters, cfg.train.power_tol)
                hist.add(step, "gan_disc", d_loss.item())
                disc.requires_grad_(False)

            g_loss, terms = generator_loss(I_hat, batch.I_t, fx, lambdas, disc if use_gan else None, _disc_input(I_hat, batch, cfg))
            _check_finite(g_loss, batch, run_dir, "synthesis", step)
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            for k, v in terms.items():
                hist.add(step, k, v.item())
            hist.add(step, "total", g_loss.item())
            if callback:
                callback(step, net, disc, terms)
            step += 1
        if run_dir is not None and (epoch + 1) % cfg.train.checkpoint_every == 0:
            _checkpoint(run_dir, f"synthesis_e{epoch + 1:03d}", net, _metadata(cfg, "synthesis", epoch + 1, step))
    _checkpoint(run_dir, "synthesis", net, _metadata(cfg, "synthesis", epoch + 1, step))
    _checkpoint(run_dir, "disc", disc, _metadata(cfg, "disc", epoch + 1, step))
    disc.requires_grad_(True)
    return net, disc, hist
