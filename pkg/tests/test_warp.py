import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from poseflow.gradcheck import interior_flow
from poseflow.warp import WarpConfig, grad_check_warp, inverse_warp, resize_flow

import oracles


def _t(a):
    return torch.tensor(np.asarray(a), dtype=torch.float64).permute(2, 0, 1).unsqueeze(0)


def _r(t):
    return t[0].permute(1, 2, 0).numpy()


class TestInverseWarp:
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 5), st.sampled_from(["border", "zeros"]))
    def test_zero_flow_is_bit_exact_identity(self, h, w, c, padding):
        src = torch.randn(2, c, h, w)
        out = inverse_warp(src, torch.zeros(2, 2, h, w), padding)
        assert torch.equal(out, src)

    def test_unit_shift_on_ramp(self):
        xs = np.tile(np.arange(8, dtype=np.float64), (8, 1))[..., None]
        flow = np.zeros((8, 8, 2))
        flow[..., 0] = 1.0
        out = _r(inverse_warp(_t(xs), _t(flow)))
        assert np.array_equal(out[:, :-1, 0], xs[:, :-1, 0] + 1)

    @pytest.mark.parametrize("padding", ["border", "zeros"])
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_four_corner_oracle(self, seed, padding):
        rng = np.random.default_rng(seed)
        src = rng.normal(size=(5, 5, 3))
        flow = rng.uniform(-3, 3, (5, 5, 2))
        out = _r(inverse_warp(_t(src), _t(flow), padding))
        assert np.abs(out - oracles.bilinear_warp(src, flow, padding)).max() < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            inverse_warp(torch.zeros(1, 3, 4, 4), torch.zeros(1, 2, 4, 5))
        with pytest.raises(ValueError):
            inverse_warp(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4))

    @given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_src(self, seed, a, b):
        g = torch.Generator().manual_seed(seed)
        A, B = torch.randn(1, 2, 6, 7, generator=g, dtype=torch.float64), torch.randn(1, 2, 6, 7, generator=g, dtype=torch.float64)
        w = torch.randn(1, 2, 6, 7, generator=g, dtype=torch.float64) * 3
        lhs = inverse_warp(a * A + b * B, w)
        rhs = a * inverse_warp(A, w) + b * inverse_warp(B, w)
        assert torch.allclose(lhs, rhs, atol=1e-6)

    def test_zeros_padding_far_outside_gives_zero(self):
        out = inverse_warp(torch.ones(1, 1, 4, 4), torch.full((1, 2, 4, 4), 10.0), "zeros")
        assert torch.equal(out, torch.zeros_like(out))

    def test_config_rejects_unknown_padding(self):
        with pytest.raises(ValueError):
            WarpConfig(padding="reflect")
        with pytest.raises(ValueError):
            inverse_warp(torch.zeros(1, 1, 2, 2), torch.zeros(1, 2, 2, 2), "reflect")


class TestResizeFlow:
    def test_same_size_unchanged(self):
        f = torch.randn(1, 2, 8, 8)
        assert torch.equal(resize_flow(f, (8, 8)), f)

    def test_constant_halved(self):
        f = torch.empty(1, 2, 8, 8)
        f[:, 0], f[:, 1] = 2.0, 4.0
        out = resize_flow(f, (4, 4))
        assert torch.allclose(out[:, 0], torch.tensor(1.0)) and torch.allclose(out[:, 1], torch.tensor(2.0))

    def test_anisotropic_scaling(self):
        f = torch.ones(1, 2, 8, 4)
        out = resize_flow(f, (4, 8))
        assert torch.allclose(out[:, 0], torch.tensor(2.0)) and torch.allclose(out[:, 1], torch.tensor(0.5))

    def test_linear_field_upsample_matches_oracle(self):
        ys, xs = np.mgrid[0:6, 0:6].astype(np.float64)
        flow = np.stack([0.3 * xs - 0.2 * ys + 1, 0.1 * xs + 0.4 * ys], -1)
        out = _r(resize_flow(_t(flow), (12, 12)))
        expect = oracles.bilinear_resize_half_pixel(flow, 12, 12) * 2.0
        assert np.abs(out - expect).max() < 1e-9

    @given(st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([1, 2, 3]))
    def test_down_then_up_constant_is_identity(self, dx, dy, k):
        f = torch.empty(1, 2, 16, 16, dtype=torch.float64)
        f[:, 0], f[:, 1] = dx, dy
        back = resize_flow(resize_flow(f, (16 >> k, 16 >> k)), (16, 16))
        assert torch.allclose(back, f, atol=1e-9)


class TestGradCheckWarp:
    @pytest.mark.parametrize("seed", range(3))
    def test_small_case_within_tolerance(self, seed):
        gen = torch.Generator().manual_seed(seed)
        src = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
        flow = interior_flow(gen, 1, 4, 4, reach=1)
        assert grad_check_warp(src, flow, eps=1e-3) < 1e-3

    def test_zero_src_zero_error(self):
        rng = np.random.default_rng(0)
        flow = rng.uniform(0.2, 0.8, (1, 2, 4, 4))
        assert grad_check_warp(np.zeros((1, 2, 4, 4)), flow) < 1e-12
        f = torch.tensor(flow, requires_grad=True)
        (inverse_warp(torch.zeros(1, 2, 4, 4, dtype=torch.float64), f) * torch.randn(1, 2, 4, 4, dtype=torch.float64)).sum().backward()
        assert not f.grad.any()

    def test_constant_src_has_no_flow_gradient(self):
        src = torch.full((1, 3, 6, 6), 0.7, dtype=torch.float64)
        flow = torch.tensor(np.random.default_rng(0).uniform(-4, 4, (1, 2, 6, 6)), requires_grad=True)
        inverse_warp(src, flow).sum().backward()
        assert flow.grad.abs().max() < 1e-12
