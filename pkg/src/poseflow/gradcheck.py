"""Finite-difference gradient checks for the differentiable pieces, in float64.

Element-wise checks compare autograd against central differences per input
element. The error of element i is |a_i - fd_i| / max(|a_i|, |fd_i|, floor)
with ``floor = 1e-4 * max|a|``, so entries that are round-off sized do not
blow up the ratio. Deep compositions are checked along random directions
instead (one directional derivative per input tensor).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .losses import FeatureExtractor, gram, photometric_loss, texture_loss, tv_loss
from .synthesis import SynthConfig, gated_attention, init_synth_params, synthesisnet_forward
from .types import NUM_LEVELS
from .warp import inverse_warp

ELEMENT_TOL = 1e-3
COMPOSITE_TOL = 1e-2


@dataclass
class GradResult:
    name: str
    max_error: float
    tolerance: float
    size: tuple

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<28} {'x'.join(map(str, self.size)):>8}  max rel err {self.max_error:.3e}  (tol {self.tolerance:g})  {status}"


def relative_error(analytic: np.ndarray, fd: np.ndarray, plain: bool = False) -> float:
    """Scaled-floor relative error; ``plain`` uses |a - fd| / (|a| + 1e-8) instead."""
    if plain:
        return float((np.abs(analytic - fd) / (np.abs(analytic) + 1e-8)).max(initial=0.0))
    a, f = np.abs(analytic), np.abs(fd)
    floor = max(1e-4 * a.max(initial=0.0), 1e-12)
    return float((np.abs(analytic - fd) / np.maximum(np.maximum(a, f), floor)).max(initial=0.0))


def _scalar(fn, inputs, probe):
    out = fn(*inputs)
    return out if probe is None else (out * probe).sum()


def elementwise_check(fn: Callable, inputs: Sequence[torch.Tensor], which=None, eps: float = 1e-6,
                      probe: torch.Tensor = None, max_elems: int = None, seed: int = 0, plain: bool = False) -> float:
    """Check d fn / d inputs[k] for k in ``which`` element by element.

    ``fn`` returns a scalar, or a tensor that is contracted with ``probe``.
    With ``max_elems`` only a seeded random subset of each input is perturbed.
    """
    inputs = [x.detach().double().clone() for x in inputs]
    which = range(len(inputs)) if which is None else which
    leaves = [x.clone().requires_grad_(k in which) for k, x in enumerate(inputs)]
    grads = torch.autograd.grad(_scalar(fn, leaves, probe), [leaves[k] for k in which])
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for k, g in zip(which, grads):
            flat = inputs[k].view(-1)
            idx = np.arange(flat.numel())
            if max_elems is not None and flat.numel() > max_elems:
                idx = rng.choice(flat.numel(), max_elems, replace=False)
            fd = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = _scalar(fn, inputs, probe).item()
                flat[i] = orig - eps
                fm = _scalar(fn, inputs, probe).item()
                flat[i] = orig
                fd[j] = (fp - fm) / (2 * eps)
            worst = max(worst, relative_error(g.reshape(-1).numpy()[idx], fd, plain))
    return worst


def directional_check(fn: Callable, inputs: Sequence[torch.Tensor], eps: float = 1e-5, seed: int = 0) -> float:
    """Compare <grad, d> with a central difference along a random unit direction d, per input tensor."""
    return relative_error(*directional_pairs(fn, inputs, eps, seed))


def directional_pairs(fn: Callable, inputs: Sequence[torch.Tensor], eps: float = 1e-5, seed: int = 0):
    """(analytic, finite-difference) directional derivatives, one per input tensor."""
    leaves = [x.detach().double().clone().requires_grad_(True) for x in inputs]
    grads = torch.autograd.grad(fn(*leaves), leaves)
    gen = torch.Generator().manual_seed(seed)
    analytic, fd = [], []
    with torch.no_grad():
        for k, g in enumerate(grads):
            d = torch.randn(leaves[k].shape, generator=gen, dtype=torch.float64)
            d /= d.norm()
            plus = [x.detach() + (eps * d if j == k else 0) for j, x in enumerate(leaves)]
            minus = [x.detach() - (eps * d if j == k else 0) for j, x in enumerate(leaves)]
            fd.append((fn(*plus) - fn(*minus)).item() / (2 * eps))
            analytic.append((g * d).sum().item())
    return np.array(analytic), np.array(fd)


# ----------------------------------------------------------------------------
# seeded instances


def interior_flow(gen: torch.Generator, n: int, h: int, w: int, reach: int = 3) -> torch.Tensor:
    """Flow whose sample points lie inside the grid with fractional parts in [0.1, 0.9].

    Keeps central differences away from the kinks of bilinear interpolation and of border clamping.
    """
    def axis(size, shape, dim):
        grid = torch.arange(size, dtype=torch.float64).view([size if d == dim else 1 for d in range(3)])
        base = (grid + torch.randint(-reach, reach + 1, shape, generator=gen)).clamp(0, size - 2)
        return base + 0.1 + 0.8 * torch.rand(shape, generator=gen, dtype=torch.float64) - grid

    shape = (n, h, w)
    return torch.stack([axis(w, shape, 2), axis(h, shape, 1)], 1)


def _randn(gen, *shape):
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def check_photometric(size, seed=0) -> GradResult:
    gen = torch.Generator().manual_seed(seed)
    a, b = _randn(gen, 1, 3, *size) * 0.5, _randn(gen, 1, 3, *size) * 0.5
    err = elementwise_check(photometric_loss, [a, b])
    return GradResult("photometric", err, ELEMENT_TOL, size)


def check_tv(size, seed=0) -> GradResult:
    gen = torch.Generator().manual_seed(seed)
    err = elementwise_check(tv_loss, [_randn(gen, 1, 2, *size) * 2])
    return GradResult("tv", err, ELEMENT_TOL, size)


def check_gram(size, seed=0) -> GradResult:
    gen = torch.Generator().manual_seed(seed)
    f = _randn(gen, 1, 4, *size)
    probe = _randn(gen, 1, 4, 4)
    err = elementwise_check(gram, [f], probe=probe)
    return GradResult("gram", err, ELEMENT_TOL, size)


def check_texture(size, seed=0, max_elems=None) -> GradResult:
    gen = torch.Generator().manual_seed(seed)
    fx = FeatureExtractor("random", seed).double()
    a, b = _randn(gen, 1, 3, *size) * 0.5, _randn(gen, 1, 3, *size) * 0.5
    err = elementwise_check(lambda x, y: sum(texture_loss(x, y, fx)), [a, b], which=[1], max_elems=max_elems, seed=seed)
    return GradResult("texture", err, ELEMENT_TOL, size)


def check_warp(size, seed=0, max_elems=None) -> list:
    gen = torch.Generator().manual_seed(seed)
    src = _randn(gen, 1, 3, *size)
    flow = interior_flow(gen, 1, *size)
    probe = _randn(gen, 1, 3, *size)
    out = []
    for which, name in ((0, "warp/src"), (1, "warp/flow")):
        err = elementwise_check(inverse_warp, [src, flow], which=[which], probe=probe, max_elems=max_elems, seed=seed)
        out.append(GradResult(name, err, ELEMENT_TOL, size))
    return out


def check_gated_attention(size, seed=0, channels=(5, 4)) -> GradResult:
    gen = torch.Generator().manual_seed(seed)
    cs, ct = channels
    fw, ft = _randn(gen, 1, cs, *size), _randn(gen, 1, ct, *size)
    W = _randn(gen, ct, cs) * 0.3
    probe = _randn(gen, 1, cs, *size)
    err = elementwise_check(lambda a, b, m: gated_attention(a, b, m)[0], [fw, ft, W], probe=probe)
    return GradResult("gated_attention", err, ELEMENT_TOL, size)


def check_heads_and_blend(size, seed=0, width=8) -> GradResult:
    gen = torch.Generator().manual_seed(seed)
    net = init_synth_params(seed, SynthConfig(width=width, num_parts=3, num_garments=3)).double()
    f_dec, residue = _randn(gen, 1, width, *size), _randn(gen, 1, 3, *size)
    probe = _randn(gen, 1, 3, *size)
    err = elementwise_check(lambda f, r: net.heads_and_blend(f, r).result, [f_dec, residue], probe=probe)
    return GradResult("heads_and_blend", err, ELEMENT_TOL, size)


def check_synthesis_net(size=(64, 64), seed=0, width=8) -> GradResult:
    """Full SynthesisNet composition, directional derivatives w.r.t. every input and every parameter tensor."""
    gen = torch.Generator().manual_seed(seed)
    cfg = SynthConfig(width=width, num_parts=3, num_garments=3, num_res_blocks=1)
    net = init_synth_params(seed, cfg).double()
    h, w = size
    pc = cfg.pose_channels
    I_s, P_s = _randn(gen, 1, 3, h, w) * 0.5, torch.rand((1, pc, h, w), generator=gen, dtype=torch.float64)
    G_hat, P_t = torch.softmax(_randn(gen, 1, 3, h, w), 1), torch.rand((1, pc, h, w), generator=gen, dtype=torch.float64)
    I_r = _randn(gen, 1, 3, h, w) * 0.5
    flows = [interior_flow(gen, 1, h >> l, w >> l) * (0.5 if l else 1.0) for l in range(NUM_LEVELS)]
    probe = _randn(gen, 1, 3, h, w)

    def run(I_s, G_hat, I_r, f1):
        out = synthesisnet_forward(net, I_s, P_s, G_hat, P_t, [flows[0], f1] + flows[2:], I_r).result
        return (out * probe).sum()

    # one floor for the whole composition: conv biases feeding instance norm have exactly zero gradient
    analytic, fd = map(list, directional_pairs(run, [I_s, G_hat, I_r, flows[1]], seed=seed))
    for k in range(len(list(net.parameters()))):
        pair = _param_directional(net, k, (I_s, P_s, G_hat, P_t, flows, I_r), probe, seed + k)
        if pair is not None:
            analytic.append(pair[0])
            fd.append(pair[1])
    err = relative_error(np.array(analytic), np.array(fd))
    return GradResult("synthesis_net", err, COMPOSITE_TOL, size)


def _param_directional(net, k, run_inputs, probe, seed, eps=1e-5):
    """Directional check for parameter tensor ``k`` of ``net``."""
    p = list(net.parameters())[k]
    gen = torch.Generator().manual_seed(seed)
    d = torch.randn(p.shape, generator=gen, dtype=torch.float64)
    d /= d.norm()

    def f():
        return (synthesisnet_forward(net, *run_inputs).result * probe).sum()

    net.zero_grad()
    f().backward()
    if p.grad is None:  # e.g. norm affines on maps too small to normalize
        return None
    analytic = (p.grad * d).sum().item()
    with torch.no_grad():
        p.add_(eps * d)
        fp = f().item()
        p.sub_(2 * eps * d)
        fm = f().item()
        p.add_(eps * d)
    net.zero_grad()
    return analytic, (fp - fm) / (2 * eps)


def run_suite(seed: int = 0, quick: bool = False) -> list:
    """All checks on seeded instances from 6x6 up to 64x64."""
    small = [(6, 6), (9, 7)] if quick else [(6, 6), (9, 7), (16, 16)]
    results = []
    for i, size in enumerate(small):
        s = seed + i
        results += [check_photometric(size, s), check_tv(size, s), check_gram(size, s)]
        results += check_warp(size, s)
        results += [check_gated_attention(size, s), check_heads_and_blend(size, s)]
    results.append(check_texture((16, 16), seed))
    results += check_warp((64, 64), seed, max_elems=300)
    results.append(check_texture((64, 64), seed, max_elems=200))
    results.append(check_synthesis_net((64, 64), seed))
    return results
