import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dkic.dynamic_kernel import (
    LDCN,
    DynamicKernelConfig,
    OffsetGenerator,
    bilinear_sample,
    default_groups,
    generate_offsets_modulations,
    kernel_grid,
    ldcn_forward,
    sample_bilinear,
)

from oracles import bilinear, box_filter_zero_pad, ldcn_nested, random_ldcn_instance, softmax


def _t(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


class TestConfig:
    def test_points_and_group_channels(self):
        cfg = DynamicKernelConfig(32, 2, 5, 3.0)
        assert cfg.points == 25
        assert cfg.group_channels == 16

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(channels=10, groups=3),
            dict(channels=8, groups=2, kernel_side=4),
            dict(channels=8, groups=2, offset_clamp=-1.0),
            dict(channels=8, groups=2, padding_mode="reflect"),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            DynamicKernelConfig(**kwargs)

    def test_default_groups(self):
        assert default_groups(192) == 12
        assert default_groups(8) == 1

    def test_kernel_grid_row_major(self):
        assert kernel_grid(3)[0] == (-1, -1)
        assert kernel_grid(3)[4] == (0, 0)
        assert kernel_grid(1) == [(0, 0)]


class TestBilinearSample:
    def test_integer_location(self):
        f = np.arange(30.0).reshape(5, 6)
        assert bilinear_sample(f, (2, 3)) == f[2, 3]

    def test_horizontal_midpoint(self):
        f = np.array([[3.0, 7.0]])
        assert bilinear_sample(f, (0, 0.5)) == pytest.approx(5.0)

    def test_hand_evaluated(self):
        # (1-.25)(1-.75)*0 + (1-.25)(.75)*1 + .25(1-.75)*2 + .25*.75*3
        f = np.array([[0.0, 1.0], [2.0, 3.0]])
        assert bilinear_sample(f, (0.25, 0.75)) == pytest.approx(1.25)

    def test_out_of_bounds_reads_zero(self):
        f = np.ones((3, 3))
        assert bilinear_sample(f, (-5, 1)) == 0.0
        assert bilinear_sample(f, (-0.5, 1)) == pytest.approx(0.5)

    @pytest.mark.parametrize("loc", [(np.nan, 0), (0, np.inf)])
    def test_non_finite(self, loc):
        with pytest.raises(ValueError, match="invalid sampling location"):
            bilinear_sample(np.ones((2, 2)), loc)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-2, 6), st.floats(-2, 7), st.integers(0, 2**31 - 1))
    def test_matches_scipy_and_batched(self, row, col, seed):
        f = np.random.default_rng(seed).normal(size=(2, 5, 6))
        got = bilinear_sample(f, (row, col))
        np.testing.assert_allclose(got, [bilinear(ch, row, col) for ch in f], atol=1e-12)
        batched = sample_bilinear(_t(f)[None], _t([[row]]), _t([[col]]))
        np.testing.assert_allclose(batched[0, :, 0].numpy(), got, atol=1e-12)


class TestGenerator:
    def test_zero_init_gives_zero_offsets_uniform_mods(self):
        cfg = DynamicKernelConfig(8, 2, 3, 4.0)
        gen = OffsetGenerator(cfg)
        off, mod = generate_offsets_modulations(torch.randn(2, 8, 6, 6), gen, cfg)
        assert torch.all(off == 0)
        torch.testing.assert_close(mod, torch.full_like(mod, 1 / 9))

    def test_shapes(self):
        cfg = DynamicKernelConfig(8, 2, 3)
        off, mod = OffsetGenerator(cfg)(torch.randn(1, 8, 6, 6))
        assert off.shape == (1, 2, 9, 2, 6, 6)
        # 2 groups * 9 points * 2 coordinates per location
        assert off[0, ..., 0, 0].numel() == 2 * 9 * 2
        assert mod.shape == (1, 2, 9, 6, 6)

    def test_softmax_and_clamp_with_random_weights(self):
        torch.manual_seed(0)
        cfg = DynamicKernelConfig(8, 2, 3, 0.75)
        gen = OffsetGenerator(cfg)
        for p in gen.parameters():
            torch.nn.init.normal_(p, std=3.0)
        with torch.no_grad():
            off, mod = gen(torch.randn(3, 8, 5, 7))
        torch.testing.assert_close(mod.sum(dim=2), torch.ones(3, 2, 5, 7), atol=1e-6, rtol=0)
        assert off.abs().max() <= 0.75
        assert float(off.abs().max()) == pytest.approx(0.75)  # clamp is active

    def test_channel_mismatch(self):
        cfg = DynamicKernelConfig(8, 2)
        with pytest.raises(ValueError, match="config/feature mismatch"):
            generate_offsets_modulations(torch.randn(1, 4, 5, 5), OffsetGenerator(cfg), cfg)


class TestLdcnForward:
    def test_constant_field_fixed_point(self):
        rng = np.random.default_rng(3)
        c, h, w = 4, 7, 7
        feature = np.full((1, c, h, w), 2.5)
        # offsets keep every sample strictly inside the raster
        off = np.zeros((1, 2, 9, 2, h, w))
        off[..., 2:5, 2:5] = rng.uniform(-0.9, 0.9, size=(1, 2, 9, 2, 3, 3))
        mod = softmax(rng.normal(size=(1, 2, 9, h, w)), axis=2)
        out = ldcn_forward(_t(feature), _t(off), _t(mod))
        np.testing.assert_allclose(out.numpy()[..., 2:5, 2:5], 2.5, atol=1e-12)

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_zero_offsets_is_box_filter(self, k):
        feature = np.random.default_rng(k).normal(size=(4, 6, 5))
        off = np.zeros((1, 2, k * k, 2, 6, 5))
        mod = np.full((1, 2, k * k, 6, 5), 1 / (k * k))
        out = ldcn_forward(_t(feature[None]), _t(off), _t(mod), kernel_side=k)
        np.testing.assert_allclose(out[0].numpy(), box_filter_zero_pad(feature, k), atol=1e-12)

    def test_matches_nested_loop(self):
        feature = np.random.default_rng(0).normal(size=(4, 5, 5))
        rng = np.random.default_rng(1)
        off = rng.uniform(-1.5, 1.5, size=(2, 9, 2, 5, 5))
        mod = softmax(rng.normal(size=(2, 9, 5, 5)), axis=1)
        got = ldcn_forward(_t(feature[None]), _t(off[None]), _t(mod[None]))
        np.testing.assert_allclose(got[0].numpy(), ldcn_nested(feature, off, mod), atol=1e-6)

    def test_matches_nested_loop_with_projections(self):
        feature, off, mod, w_in, b_in, w_out, b_out, k = random_ldcn_instance(np.random.default_rng(7))
        got = ldcn_forward(
            _t(feature[None]), _t(off[None]), _t(mod[None]), (_t(w_in), _t(b_in)), (_t(w_out), _t(b_out))
        )
        want = ldcn_nested(feature, off, mod, w_in, b_in, w_out, b_out, k)
        np.testing.assert_allclose(got[0].numpy(), want, atol=1e-6)

    def test_locality_with_zero_clamp(self):
        torch.manual_seed(1)
        cfg = DynamicKernelConfig(4, 2, 3, offset_clamp=0.0)
        layer = LDCN(cfg).double()
        for p in layer.generator.parameters():
            torch.nn.init.normal_(p)
        x = torch.randn(1, 4, 9, 9, dtype=torch.float64)
        base = layer(x)[0, :, 4, 4]
        # the generator itself is a depthwise 3x3 conv, so the receptive field
        # of the whole layer at (4, 4) is 5x5; outside it nothing may leak
        x2 = x.clone()
        x2[..., 0, :] += 10
        x2[..., :, 8] -= 10
        torch.testing.assert_close(layer(x2)[0, :, 4, 4], base)

    def test_aggregate_locality_with_zero_offsets(self):
        x = torch.randn(1, 2, 7, 7, dtype=torch.float64)
        off = torch.zeros(1, 1, 9, 2, 7, 7, dtype=torch.float64)
        mod = torch.softmax(torch.randn(1, 1, 9, 7, 7, dtype=torch.float64), dim=2)
        base = ldcn_forward(x, off, mod)[0, :, 3, 3]
        x2 = x.clone()
        x2[..., 1, :] += 5.0  # row 1 is outside the 3x3 window of (3, 3)
        torch.testing.assert_close(ldcn_forward(x2, off, mod)[0, :, 3, 3], base)

    def test_group_independence(self):
        rng = np.random.default_rng(5)
        x = _t(rng.normal(size=(1, 4, 5, 5)))
        off = _t(rng.uniform(-1, 1, size=(1, 2, 9, 2, 5, 5)))
        mod = _t(softmax(rng.normal(size=(1, 2, 9, 5, 5)), axis=2))
        base = ldcn_forward(x, off, mod)
        x2 = x.clone()
        x2[:, 2:] += 3.0  # group 1 channels
        out = ldcn_forward(x2, off, mod)
        torch.testing.assert_close(out[:, :2], base[:, :2])
        assert not torch.allclose(out[:, 2:], base[:, 2:])

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda off, mod: (off[:, :, :4], mod[:, :, :4]),
            lambda off, mod: (off, mod * 2),
            lambda off, mod: (off, -mod),
            lambda off, mod: (off[..., 0, :, :], mod),
            lambda off, mod: (off.masked_fill(off == off.flatten()[0], float("nan")), mod),
        ],
    )
    def test_malformed_fields(self, mutate):
        x = torch.randn(1, 4, 5, 5)
        off = torch.randn(1, 2, 9, 2, 5, 5)
        mod = torch.softmax(torch.randn(1, 2, 9, 5, 5), dim=2)
        off, mod = mutate(off, mod)
        with pytest.raises(ValueError, match="malformed modulation/offset field"):
            ldcn_forward(x, off, mod)


class TestGradients:
    def test_gradcheck_all_inputs(self):
        rng = np.random.default_rng(11)
        x = _t(rng.normal(size=(1, 4, 4, 4))).requires_grad_()
        # keep samples away from integer grid lines where bilinear is not smooth
        off = _t(rng.uniform(0.1, 0.4, size=(1, 2, 9, 2, 4, 4)) * rng.choice([-1, 1], size=(1, 2, 9, 2, 4, 4)))
        off.requires_grad_()
        logits = _t(rng.normal(size=(1, 2, 9, 4, 4))).requires_grad_()
        w_in = _t(rng.normal(size=(4, 4))).requires_grad_()
        w_out = _t(rng.normal(size=(4, 4))).requires_grad_()
        b = _t(rng.normal(size=4))

        def fn(x, off, logits, w_in, w_out):
            mod = torch.softmax(logits, dim=2)
            return ldcn_forward(x, off, mod, (w_in, b), (w_out, b), check=False)

        assert torch.autograd.gradcheck(fn, (x, off, logits, w_in, w_out), eps=1e-4, atol=1e-7, rtol=1e-4)

    def test_layer_backward_reaches_generator(self):
        torch.manual_seed(0)
        layer = LDCN(DynamicKernelConfig(8, 2, 3, 2.0))
        for p in layer.generator.parameters():
            torch.nn.init.normal_(p, std=0.1)
        layer(torch.randn(2, 8, 6, 6)).pow(2).sum().backward()
        assert layer.generator.offset_head.weight.grad.abs().sum() > 0
        assert layer.generator.mod_head.weight.grad.abs().sum() > 0
