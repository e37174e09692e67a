import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from poseflow.losses import (
    CharbonnierParams, FeatureExtractor, StageOneWeights, charbonnier, garment_cross_entropy, gram,
    lsgan_losses, photometric_loss, stage1_loss, texture_loss, tv_loss, vgg_feature_loss,
)
from poseflow.warp import inverse_warp, resize_image

import oracles

# (1e-6) ** 0.45 evaluated in float64
PHOTOMETRIC_FLOOR = 0.0019952623149688794


def _rand(*shape, seed=0):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestParams:
    def test_charbonnier_validation(self):
        with pytest.raises(ValueError):
            CharbonnierParams(eps=0)
        with pytest.raises(ValueError):
            CharbonnierParams(alpha=1.5)

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            StageOneWeights(s=(1, 1, 1))
        with pytest.raises(ValueError):
            StageOneWeights(gamma=(0.1, -0.1, 0, 0, 0, 0))

    def test_default_weights(self):
        w = StageOneWeights()
        assert w.s == (1.0, 1.0, 0.5, 0.25, 0.125, 0.0)
        assert w.beta == (0.002, 0.002, 0.002, 0.002, 0.0, 0.0)
        assert w.gamma == (0.1, 0.1, 0.1, 0.1, 0.0, 0.0)


class TestPhotometric:
    def test_identical_floor(self):
        a = _rand(1, 3, 8, 8)
        assert abs(photometric_loss(a, a).item() - PHOTOMETRIC_FLOOR) < 1e-9

    def test_unit_difference_limit(self):
        a = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
        val = photometric_loss(a + 1, a, CharbonnierParams(eps=1e-9, alpha=0.5)).item()
        assert abs(val - 1.0) < 1e-12

    def test_matches_scalar_loop(self):
        a, b = _rand(1, 3, 5, 6, seed=1), _rand(1, 3, 5, 6, seed=2)
        expect = oracles.charbonnier_mean((a - b).numpy(), 1e-3, 0.45)
        assert abs(photometric_loss(a, b).item() - expect) < 1e-7

    @given(st.integers(0, 2**31))
    def test_floor_is_lower_bound(self, seed):
        a, b = _rand(1, 3, 4, 4, seed=seed), _rand(1, 3, 4, 4, seed=seed + 1)
        assert photometric_loss(a, b).item() >= PHOTOMETRIC_FLOOR

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            photometric_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


class TestTV:
    def test_constant_zero(self):
        assert tv_loss(torch.full((1, 2, 6, 6), 3.0)).item() == 0.0

    @given(st.integers(0, 2**31), st.floats(-10, 10), st.floats(-10, 10))
    def test_shift_invariant(self, seed, cx, cy):
        f = _rand(1, 2, 5, 5, seed=seed)
        shifted = f + torch.tensor([cx, cy], dtype=torch.float64).view(1, 2, 1, 1)
        assert abs(tv_loss(f).item() - tv_loss(shifted).item()) < 1e-9

    def test_unit_ramp(self):
        f = torch.zeros(1, 2, 6, 6, dtype=torch.float64)
        f[:, 0] = torch.arange(6, dtype=torch.float64)
        # horizontal differences are all 1, vertical all 0
        assert tv_loss(f).item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_loop_oracle(self):
        f = _rand(1, 2, 5, 7, seed=3)
        assert abs(tv_loss(f).item() - oracles.tv(f[0].permute(1, 2, 0).numpy())) < 1e-9

    @given(st.integers(0, 2**31))
    def test_non_negative(self, seed):
        assert tv_loss(_rand(1, 2, 4, 4, seed=seed)).item() >= 0


class TestGram:
    def test_zero(self):
        assert not gram(torch.zeros(1, 4, 3, 3)).any()

    @given(st.integers(0, 2**31), st.floats(-4, 4))
    def test_quadratic_scaling(self, seed, c):
        f = _rand(1, 3, 4, 4, seed=seed)
        assert torch.allclose(gram(c * f), c * c * gram(f), atol=1e-9)

    def test_matches_double_loop(self):
        f = _rand(1, 2, 3, 3, seed=4)
        expect = oracles.gram(f[0].permute(1, 2, 0).numpy())
        assert np.abs(gram(f)[0].numpy() - expect).max() < 1e-6

    @given(st.integers(0, 2**31))
    def test_symmetric_psd(self, seed):
        g = gram(_rand(1, 5, 4, 3, seed=seed))[0]
        assert (g - g.T).abs().max() < 1e-7
        assert torch.linalg.eigvalsh(g).min() >= -1e-6


class TestFeatureExtractor:
    def test_frozen_and_deterministic(self):
        fx1, fx2 = FeatureExtractor(seed=3), FeatureExtractor(seed=3)
        assert all(not p.requires_grad for p in fx1.parameters())
        x = torch.randn(1, 3, 32, 32)
        assert all(torch.equal(a, b) for a, b in zip(fx1(x), fx2(x)))
        fx1.train()
        assert not fx1.training

    def test_five_taps(self):
        feats = FeatureExtractor()(torch.zeros(1, 3, 64, 64))
        assert [f.shape[1] for f in feats] == [16, 32, 64, 64, 64]
        assert [f.shape[-1] for f in feats] == [32, 16, 8, 4, 2]

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            FeatureExtractor("resnet")


def _tiny_extractor():
    """Two-layer random extractor for oracle composition."""
    fx = FeatureExtractor(seed=5, widths=(3, 4)).double()
    return fx


class TestTexture:
    def test_identical_zero(self):
        fx = FeatureExtractor()
        a = torch.rand(1, 3, 16, 16) * 2 - 1
        assert all(v.item() == 0 for v in texture_loss(a, a, fx))

    def test_symmetric(self):
        fx = FeatureExtractor()
        a, b = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
        assert all(torch.allclose(x, y) for x, y in zip(texture_loss(a, b, fx), texture_loss(b, a, fx)))

    def test_matches_gram_oracle_composition(self):
        fx = _tiny_extractor()
        a, b = _rand(1, 3, 8, 8, seed=6), _rand(1, 3, 8, 8, seed=7)
        fa, fb = fx(a), fx(b)
        got = texture_loss(a, b, fx)
        for l, (x, y) in enumerate(zip(fa, fb)):
            ga = oracles.gram(x[0].permute(1, 2, 0).numpy())
            gb = oracles.gram(y[0].permute(1, 2, 0).numpy())
            assert abs(got[l].item() - np.abs(ga - gb).mean()) < 1e-6


class TestFeatureAndGan:
    def test_vgg_feature_identity_and_symmetry(self):
        fx = FeatureExtractor()
        a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
        assert vgg_feature_loss(a, a, fx).item() == 0
        assert torch.allclose(vgg_feature_loss(a, b, fx), vgg_feature_loss(b, a, fx))

    def test_vgg_feature_elementwise(self):
        fx = FeatureExtractor().double()
        a, b = _rand(1, 3, 32, 32, seed=8), _rand(1, 3, 32, 32, seed=9)
        fa, fb = fx(a)[3].numpy().ravel(), fx(b)[3].numpy().ravel()
        expect = sum(abs(x - y) for x, y in zip(fa, fb)) / fa.size
        assert abs(vgg_feature_loss(a, b, fx).item() - expect) < 1e-9

    def test_lsgan_closed_forms(self):
        d, g = lsgan_losses(torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4))
        assert (d.item(), g.item()) == (0.0, 1.0)
        assert lsgan_losses(torch.ones(3), torch.ones(3))[1].item() == 0.0

    def test_lsgan_loop(self):
        r, f = _rand(1, 1, 3, 3, seed=10), _rand(1, 1, 3, 3, seed=11)
        d, g = lsgan_losses(r, f)
        ed, eg = oracles.lsgan(r.numpy(), f.numpy())
        assert abs(d.item() - ed) < 1e-12 and abs(g.item() - eg) < 1e-12

    def test_cross_entropy_uniform_is_log_n(self):
        n = 8
        probs = torch.full((1, n, 4, 4), 1.0 / n, dtype=torch.float64)
        target = torch.zeros(1, n, 4, 4, dtype=torch.float64)
        target[:, 3] = 1
        assert garment_cross_entropy(probs, target).item() == pytest.approx(np.log(n), abs=1e-12)

    @pytest.mark.parametrize("smooth", [1e-1, 1e-3, 1e-6])
    def test_cross_entropy_smoothed_one_hot(self, smooth):
        n = 8
        target = torch.zeros(1, n, 2, 2, dtype=torch.float64)
        target[:, 2] = 1
        probs = target * (1 - smooth) + smooth / n
        expect = -np.log(1 - smooth + smooth / n)
        assert garment_cross_entropy(probs, target).item() == pytest.approx(expect, rel=1e-9)


def _flows(seed, h=64, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(1, 2, h >> l, h >> l, generator=g, dtype=torch.float64) * scale for l in range(6)]


class TestStageOne:
    def test_zero_flow_identical_images(self):
        a = _rand(1, 3, 64, 64) * 0.3
        flows = [torch.zeros(1, 2, 64 >> l, 64 >> l, dtype=torch.float64) for l in range(6)]
        t = stage1_loss(a, a, flows, fx=FeatureExtractor().double())
        for (name, l), v in t.terms.items():
            if name == "photometric":
                assert abs(v.item() - PHOTOMETRIC_FLOOR) < 1e-9
            else:
                assert v.item() == 0

    def test_linear_in_gamma(self):
        a, b = _rand(1, 3, 64, 64, seed=1), _rand(1, 3, 64, 64, seed=2)
        flows = _flows(3)
        w1 = StageOneWeights(s=(1,) * 6, beta=(0,) * 6, gamma=(0.1, 0.2, 0.1, 0.3, 0.1, 0.2))
        w2 = StageOneWeights(s=(1,) * 6, beta=(0,) * 6, gamma=tuple(2 * g for g in w1.gamma))
        only_tv = lambda w: stage1_loss(a, b, flows, w).total - sum(
            v for (n, _), v in stage1_loss(a, b, flows, w).terms.items() if n == "photometric")
        assert only_tv(w2).item() == pytest.approx(2 * only_tv(w1).item(), rel=1e-12)

    def test_recomposes_from_single_terms(self):
        a, b = _rand(1, 3, 64, 64, seed=4) * 0.5, _rand(1, 3, 64, 64, seed=5) * 0.5
        flows = _flows(6, scale=2.0)
        fx = FeatureExtractor().double()
        w = StageOneWeights()
        got = stage1_loss(a, b, flows, w, fx=fx).total.item()
        tex = texture_loss(b, inverse_warp(a, flows[0]), fx)
        expect = 0.0
        for l in range(6):
            if w.s[l] == 0:
                continue
            size = (64 >> l, 64 >> l)
            ia, ib = resize_image(a, size), resize_image(b, size)
            term = photometric_loss(ib, inverse_warp(ia, flows[l])).item() + w.gamma[l] * tv_loss(flows[l]).item()
            if l < 5:
                term += w.beta[l] * tex[l].item()
            expect += w.s[l] * term
        assert abs(got - expect) < 1e-6

    def test_wrong_level_count(self):
        with pytest.raises(ValueError):
            stage1_loss(torch.zeros(1, 3, 64, 64), torch.zeros(1, 3, 64, 64), _flows(0)[:5])

    def test_beta5_must_be_zero(self):
        with pytest.raises(ValueError, match="beta_5"):
            StageOneWeights(beta=(0, 0, 0, 0, 0, 0.1))

    def test_breakdown_rows(self):
        a = _rand(1, 3, 64, 64) * 0.3
        t = stage1_loss(a, a, _flows(1), fx=FeatureExtractor().double())
        rows = t.as_rows(7)
        assert rows[-1][1] == "total" and all(r[0] == 7 for r in rows)
        assert {("photometric", l) for l in range(5)} <= set(t.terms)
