import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, strategies as st

from poseflow.synthesis import (
    GARMENT, SYNTHESIS, SynthConfig, garmentnet_forward, gated_attention, init_synth_params, synthesisnet_forward,
)
from poseflow.types import ValidationError

import oracles


def _cfg(kind=SYNTHESIS, **kw):
    kw.setdefault("width", 4)
    kw.setdefault("num_res_blocks", 1)
    return SynthConfig(kind=kind, **kw)


def _flows(seed, n=1, size=64, scale=2.0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(n, 2, size >> l, size >> l, generator=g) * scale / 2 ** l for l in range(6)]


def _inputs(cfg, seed=0, n=1, size=64):
    g = torch.Generator().manual_seed(seed)
    in_s = torch.randn(n, cfg.source_channels, size, size, generator=g)
    in_t = torch.randn(n, cfg.target_channels, size, size, generator=g)
    residue = torch.randn(n, cfg.out_channels, size, size, generator=g)
    return in_s, in_t, _flows(seed, n, size), residue


def _set_all(net, weight=0.0, bias=0.0):
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.fill_(weight)
                if m.bias is not None:
                    m.bias.fill_(bias)


class TestEncoders:
    @pytest.mark.parametrize("kind", [GARMENT, SYNTHESIS])
    def test_level_dims(self, kind):
        cfg = _cfg(kind)
        net = init_synth_params(0, cfg)
        in_s, in_t, _, _ = _inputs(cfg, n=2)
        for feats in (net.encode_source(in_s), net.encode_target(in_t)):
            assert [tuple(f.shape[2:]) for f in feats] == [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2), (1, 1)]
            assert [f.shape[1] for f in feats] == [cfg.level_width(l) for l in range(6)]

    def test_zero_weights_no_bias_give_zero_features(self):
        cfg = _cfg(norm="none")
        net = init_synth_params(0, cfg)
        _set_all(net)
        in_s, in_t, _, _ = _inputs(cfg)
        for f in net.encode_source(in_s) + net.encode_target(in_t):
            assert not f.any()

    def test_zero_weights_constant_bias(self):
        cfg = _cfg(norm="none", num_res_blocks=2)
        net = init_synth_params(0, cfg)
        _set_all(net, bias=0.3)
        in_s, in_t, _, _ = _inputs(cfg)
        fs, ft = net.encode_source(in_s), net.encode_target(in_t)
        for f in fs[:-1] + ft:
            assert torch.allclose(f, torch.tensor(0.3))
        # each residual block adds its second conv's bias on top of the identity path
        assert torch.allclose(fs[-1], torch.tensor(0.3 * 3))

    def test_deterministic(self):
        cfg = _cfg()
        net = init_synth_params(1, cfg)
        in_s, in_t, _, _ = _inputs(cfg)
        a, b = net.encode_source(in_s), net.encode_source(in_s)
        assert all(torch.equal(x, y) for x, y in zip(a, b))

    def test_channel_mismatch(self):
        cfg = _cfg()
        net = init_synth_params(0, cfg)
        in_s, in_t, _, _ = _inputs(cfg)
        with pytest.raises(ValidationError):
            net.encode_source(in_t)
        with pytest.raises(ValidationError):
            net.encode_target(in_s[:, :, :48])


class TestGatedAttention:
    def test_zero_w_halves_input(self):
        g = torch.Generator().manual_seed(0)
        f, ft = torch.randn(2, 5, 4, 3, generator=g), torch.randn(2, 7, 4, 3, generator=g)
        out, gate = gated_attention(f, ft, torch.zeros(7, 5))
        assert torch.equal(gate, torch.full_like(gate, 0.5))
        assert (out - 0.5 * f).abs().max() < 1e-7
        conv = nn.Conv2d(5, 7, 1, bias=False)
        nn.init.zeros_(conv.weight)
        assert (gated_attention(f, ft, conv)[0] - 0.5 * f).abs().max() < 1e-7

    def test_zero_target_gives_half_gate(self):
        g = torch.Generator().manual_seed(1)
        f = torch.randn(1, 4, 5, 5, generator=g)
        _, gate = gated_attention(f, torch.zeros(1, 4, 5, 5), torch.randn(4, 4, generator=g) * 10)
        assert torch.equal(gate, torch.full_like(gate, 0.5))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        fw, ft, W = rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 2, 3)), rng.normal(size=(3, 3))
        t = lambda a: torch.tensor(a).permute(2, 0, 1)[None]
        out, gate = gated_attention(t(fw), t(ft), torch.tensor(W))
        expect, egates = oracles.gated_attention(fw, ft, W)
        assert np.abs(out[0].permute(1, 2, 0).numpy() - expect).max() < 1e-6
        assert np.abs(gate[0, 0].numpy() - egates).max() < 1e-6

    def test_module_and_matrix_agree(self):
        g = torch.Generator().manual_seed(2)
        conv = nn.Conv2d(3, 6, 1, bias=False)
        f, ft = torch.randn(1, 3, 4, 4, generator=g), torch.randn(1, 6, 4, 4, generator=g)
        a = gated_attention(f, ft, conv)[0]
        b = gated_attention(f, ft, conv.weight[:, :, 0, 0])[0]
        assert torch.allclose(a, b, atol=1e-6)

    @given(st.integers(0, 2**31), st.floats(0.01, 3.0))
    def test_gate_range_and_shrinkage(self, seed, scale):
        g = torch.Generator().manual_seed(seed)
        f = torch.randn(1, 4, 3, 3, generator=g, dtype=torch.float64)
        ft = torch.randn(1, 4, 3, 3, generator=g, dtype=torch.float64) * scale
        out, gate = gated_attention(f, ft, torch.randn(4, 4, generator=g, dtype=torch.float64))
        assert (gate > 0).all() and (gate < 1).all()
        assert (out.abs() <= f.abs()).all()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            gated_attention(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), torch.zeros(3, 3))
        with pytest.raises(ValueError):
            gated_attention(torch.zeros(1, 3, 4, 4), torch.zeros(1, 5, 4, 4), torch.zeros(3, 3))


class TestDecodeAndBlend:
    def test_decode_full_resolution_and_zero(self):
        cfg = _cfg()
        net = init_synth_params(0, cfg)
        in_s, in_t, flows, _ = _inputs(cfg, n=2)
        f_t = net.encode_target(in_t)
        filtered, _ = net.filter(net.align(net.encode_source(in_s), flows), f_t)
        assert tuple(net.decode(filtered, f_t).shape) == (2, cfg.width, 64, 64)
        _set_all(net)
        zeros = [torch.zeros_like(f) for f in f_t]
        assert not net.decode(zeros, zeros).any()

    def _dec(self, cfg, seed=0):
        g = torch.Generator().manual_seed(seed)
        return torch.randn(2, cfg.width, 64, 64, generator=g), torch.randn(2, cfg.out_channels, 64, 64, generator=g)

    @pytest.mark.parametrize("logit,expect", [(float("inf"), "fg"), (float("-inf"), "residue")])
    def test_forced_mask_logits(self, logit, expect):
        cfg = _cfg()
        net = init_synth_params(0, cfg)
        with torch.no_grad():
            net.mask_head.weight.zero_()
            net.mask_head.bias.fill_(logit)
        f_dec, residue = self._dec(cfg)
        o = net.heads_and_blend(f_dec, residue)
        assert torch.equal(o.out, o.fg if expect == "fg" else residue)

    def test_mask_override(self):
        cfg = _cfg()
        net = init_synth_params(0, cfg)
        f_dec, residue = self._dec(cfg)
        assert torch.equal(net.heads_and_blend(f_dec, residue, torch.zeros(2, 1, 64, 64)).out, residue)
        o = net.heads_and_blend(f_dec, residue, torch.ones(2, 1, 64, 64))
        assert torch.equal(o.out, o.fg)

    def test_blend_elementwise_oracle(self):
        cfg = _cfg()
        net = init_synth_params(3, cfg)
        f_dec, residue = self._dec(cfg, 1)
        o = net.heads_and_blend(f_dec, residue)
        m, fg, r = (t.detach().double().numpy() for t in (o.mask, o.fg, residue))
        expect = np.empty_like(fg)
        for c in range(fg.shape[1]):
            expect[:, c] = m[:, 0] * fg[:, c] + (1 - m[:, 0]) * r[:, c]
        assert np.abs(o.out.detach().numpy() - expect).max() < 1e-6
        assert (o.mask >= 0).all() and (o.mask <= 1).all()

    def test_residue_shape_checked(self):
        cfg = _cfg()
        net = init_synth_params(0, cfg)
        f_dec, residue = self._dec(cfg)
        with pytest.raises(ValidationError):
            net.heads_and_blend(f_dec, residue[:, :2])


class TestFullForward:
    def _garment_inputs(self, cfg, seed=0):
        g = torch.Generator().manual_seed(seed)
        G_s = torch.randn(1, cfg.num_garments, 64, 64, generator=g)
        P_s = torch.randn(1, cfg.pose_channels, 64, 64, generator=g)
        P_t = torch.randn(1, cfg.pose_channels, 64, 64, generator=g)
        G_r = torch.randn(1, cfg.num_garments, 64, 64, generator=g)
        return G_s, P_s, P_t, _flows(seed), G_r

    def test_garment_simplex_shape_determinism(self):
        cfg = _cfg(GARMENT)
        net = init_synth_params(0, cfg)
        x = self._garment_inputs(cfg)
        a, b = garmentnet_forward(net, *x), garmentnet_forward(net, *x)
        assert tuple(a.result.shape) == (1, cfg.num_garments, 64, 64)
        assert (a.result >= 0).all() and (a.result.sum(1) - 1).abs().max() < 1e-6
        assert torch.equal(a.result, b.result)
        assert len(a.attention_gates) == 6

    def test_synthesis_range_shape_determinism(self):
        cfg = _cfg(width=6)
        net = init_synth_params(0, cfg)
        g = torch.Generator().manual_seed(4)
        I_s = torch.rand(1, 3, 64, 64, generator=g) * 2 - 1
        P_s, P_t = torch.randn(1, cfg.pose_channels, 64, 64, generator=g), torch.randn(1, cfg.pose_channels, 64, 64, generator=g)
        G_hat = torch.softmax(torch.randn(1, cfg.num_garments, 64, 64, generator=g), 1)
        I_r = torch.randn(1, 3, 64, 64, generator=g) * 5  # push tanh towards saturation
        a = synthesisnet_forward(net, I_s, P_s, G_hat, P_t, _flows(1), I_r)
        b = synthesisnet_forward(net, I_s, P_s, G_hat, P_t, _flows(1), I_r)
        assert tuple(a.result.shape) == (1, 3, 64, 64)
        assert a.result.min() >= -1 and a.result.max() <= 1
        assert torch.equal(a.result, b.result)

    def test_kind_mismatch(self):
        net = init_synth_params(0, _cfg(SYNTHESIS))
        with pytest.raises(ValidationError):
            garmentnet_forward(net, *self._garment_inputs(_cfg(GARMENT)))

    @pytest.mark.parametrize("kw", [dict(attention=False), dict(use_flow=False), dict(norm="none")])
    def test_ablation_switches_run(self, kw):
        cfg = _cfg(**kw)
        o = init_synth_params(0, cfg)(*_inputs(cfg))
        assert torch.isfinite(o.result).all()
        assert (len(o.attention_gates) == 0) == (not cfg.attention)

    def test_gates_strictly_inside_unit_interval(self):
        cfg = _cfg()
        o = init_synth_params(0, cfg)(*_inputs(cfg))
        for l, gate in enumerate(o.attention_gates):
            assert gate.shape[2:] == (32 >> l, 32 >> l)
            assert (gate > 0).all() and (gate < 1).all()

    def test_same_seed_same_params(self):
        a, b = init_synth_params(7, _cfg()), init_synth_params(7, _cfg())
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
        c = init_synth_params(8, _cfg())
        assert not torch.equal(a.fg_head.weight, c.fg_head.weight)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            SynthConfig(kind="other")
        with pytest.raises(ValueError):
            SynthConfig(norm="batch")
