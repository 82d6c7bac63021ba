import math

import numpy as np
import pytest
import torch

from c2fcd.errors import ConfigurationError
from c2fcd.model import (ENCODER_CHANNELS, ENCODER_STRIDES, C2FNet,
                         CascadeAggregation, ChannelAttention, GlobalContextModule,
                         ModuleToggles, SiameseEncoder, SpatialAttention,
                         build_model, fuse_pyramids, get_params, gradient_audit,
                         param_checksum, refine_features, scaled_channels,
                         set_params)


def small_model(w=0.125, cd=8, toggles=None, seed=0):
    model = build_model(w, cd, toggles, seed=seed)
    model.eval()
    return model


class TestEncoder:
    def test_channel_table(self):
        assert scaled_channels(1.0) == (64, 128, 256, 512, 512)
        assert scaled_channels(0.25) == (16, 32, 64, 128, 128)
        assert scaled_channels(0.125) == (8, 16, 32, 64, 64)

    def test_tiny_width_floors_at_one(self):
        assert min(scaled_channels(0.001)) == 1

    def test_width_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            scaled_channels(0.0)

    def test_pyramid_shapes_small(self):
        enc = SiameseEncoder(0.125)
        enc.eval()
        with torch.no_grad():
            feats = enc(torch.rand(1, 3, 32, 32))
        shapes = [tuple(f.shape[1:]) for f in feats]
        assert shapes[-1] == (64, 2, 2)
        for f, ch, stride in zip(feats, scaled_channels(0.125), ENCODER_STRIDES):
            assert f.shape[1] == ch
            assert f.shape[-1] == 32 // stride

    def test_full_width_deepest_level(self):
        # stride arithmetic at 256 with the unscaled channel table
        enc = SiameseEncoder(1.0)
        enc.eval()
        with torch.no_grad():
            feats = enc(torch.rand(1, 3, 256, 256))
        assert tuple(feats[-1].shape[1:]) == (512, 16, 16)
        assert [f.shape[1] for f in feats] == list(ENCODER_CHANNELS)

    def test_zero_image_stays_finite(self):
        enc = SiameseEncoder(0.125)
        enc.eval()
        with torch.no_grad():
            feats = enc(torch.zeros(1, 3, 32, 32))
        assert all(torch.isfinite(f).all() for f in feats)


class TestFusion:
    def test_identical_pyramids_fuse_to_zero(self):
        p = (torch.rand(1, 4, 8, 8), torch.rand(1, 8, 4, 4))
        fused = fuse_pyramids(p, p)
        assert all((f == 0).all() for f in fused)

    def test_swap_symmetry(self):
        a = (torch.rand(1, 4, 8, 8),)
        b = (torch.rand(1, 4, 8, 8),)
        assert torch.equal(fuse_pyramids(a, b)[0], fuse_pyramids(b, a)[0])

    def test_scalar_difference(self):
        a = (torch.full((1, 1, 1, 1), 3.0),)
        b = (torch.full((1, 1, 1, 1), 5.0),)
        assert fuse_pyramids(a, b)[0].item() == pytest.approx(2.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            fuse_pyramids((torch.rand(1, 4, 8, 8),), (torch.rand(1, 4, 4, 4),))


class TestChannelAttention:
    def test_zero_input_zero_output(self):
        attn = ChannelAttention(32)
        assert (attn(torch.zeros(1, 32, 6, 6)) == 0).all()

    def test_gate_strictly_inside_unit_interval(self):
        attn = ChannelAttention(32)
        g = attn.gate(torch.randn(2, 32, 6, 6))
        assert (g > 0).all() and (g < 1).all()

    def test_shape_preserved(self):
        attn = ChannelAttention(16)
        x = torch.randn(2, 16, 5, 7)
        assert attn(x).shape == x.shape

    def test_hidden_width_clamped_for_narrow_models(self):
        attn = ChannelAttention(8)
        assert attn.fc_down.out_channels == 4


class TestSpatialAttention:
    def test_zero_input_zero_output(self):
        attn = SpatialAttention()
        assert (attn(torch.zeros(1, 8, 6, 6)) == 0).all()

    def test_gate_strictly_inside_unit_interval(self):
        attn = SpatialAttention()
        g = attn.gate(torch.randn(2, 8, 9, 9))
        assert (g > 0).all() and (g < 1).all()

    def test_constant_input_gives_constant_interior_gate(self):
        attn = SpatialAttention()
        g = attn.gate(torch.full((1, 4, 16, 16), 0.7))
        interior = g[0, 0, 3:-3, 3:-3]
        assert torch.allclose(interior, interior[0, 0].expand_as(interior),
                              atol=1e-6)


class TestGlobalContextModule:
    def test_channel_bookkeeping(self):
        gcm = GlobalContextModule(256, 64)
        gcm.eval()
        with torch.no_grad():
            out = gcm(torch.randn(1, 256, 64, 64))
        assert tuple(out.shape) == (1, 64, 64, 64)

    def test_output_nonnegative(self):
        gcm = GlobalContextModule(16, 8)
        gcm.eval()
        with torch.no_grad():
            out = gcm(torch.randn(2, 16, 12, 12))
        assert (out >= 0).all()

    def test_spatial_dims_preserved_for_odd_sizes(self):
        gcm = GlobalContextModule(8, 8)
        gcm.eval()
        with torch.no_grad():
            out = gcm(torch.randn(1, 8, 19, 23))
        assert out.shape[-2:] == (19, 23)


class TestRefine:
    def setup_method(self):
        torch.manual_seed(0)
        self.x1 = torch.randn(1, 4, 16, 16)
        self.x2 = torch.randn(1, 6, 8, 8)
        self.x3 = torch.randn(1, 8, 4, 4)

    def test_saturated_negative_attention_is_identity(self):
        attn = torch.full((1, 1, 4, 4), -40.0)
        y1, y2, y3 = refine_features(self.x1, self.x2, self.x3, attn)
        assert torch.allclose(y1, self.x1, atol=1e-6)
        assert torch.allclose(y2, self.x2, atol=1e-6)
        assert torch.allclose(y3, self.x3, atol=1e-6)

    def test_zero_attention_scales_by_one_and_a_half(self):
        attn = torch.zeros(1, 1, 4, 4)
        y1, y2, y3 = refine_features(self.x1, self.x2, self.x3, attn)
        assert torch.allclose(y1, 1.5 * self.x1, atol=1e-6)
        assert torch.allclose(y3, 1.5 * self.x3, atol=1e-6)

    def test_zero_inputs_stay_zero(self):
        attn = torch.randn(1, 1, 4, 4)
        ys = refine_features(torch.zeros_like(self.x1), torch.zeros_like(self.x2),
                             torch.zeros_like(self.x3), attn)
        assert all((y == 0).all() for y in ys)

    def test_stride_ratio_violation(self):
        with pytest.raises(ValueError):
            refine_features(self.x1, self.x2, self.x3, torch.zeros(1, 1, 5, 5))

    def test_multichannel_attention_rejected(self):
        with pytest.raises(ValueError):
            refine_features(self.x1, self.x2, self.x3, torch.zeros(1, 2, 4, 4))


class TestAggregation:
    def test_head_output_upsamples_to_shallow_resolution(self):
        agg = CascadeAggregation(8, emit_head=True)
        agg.eval()
        with torch.no_grad():
            out = agg(torch.randn(1, 8, 16, 16), torch.randn(1, 8, 32, 32),
                      torch.randn(1, 8, 64, 64))
        assert tuple(out.shape) == (1, 1, 64, 64)

    def test_no_head_keeps_three_widths(self):
        agg = CascadeAggregation(8, emit_head=False)
        agg.eval()
        with torch.no_grad():
            out = agg(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 8, 8),
                      torch.randn(1, 8, 16, 16))
        assert out.shape[1] == 24

    def test_zero_inputs_zero_output(self):
        # biases and batch-norm offsets are zero at init
        torch.manual_seed(0)
        agg = CascadeAggregation(8, emit_head=True)
        agg.eval()
        with torch.no_grad():
            out = agg(torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 8, 8),
                      torch.zeros(1, 8, 16, 16))
        assert (out == 0).all()

    def test_width_mismatch_rejected(self):
        agg = CascadeAggregation(8, emit_head=False)
        with pytest.raises(ConfigurationError):
            agg(torch.randn(1, 8, 4, 4), torch.randn(1, 4, 8, 8),
                torch.randn(1, 8, 16, 16))


class TestForward:
    def test_output_shapes(self):
        model = small_model()
        with torch.no_grad():
            final, coarse = model(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32))
        assert tuple(final.shape) == (1, 1, 32, 32)
        assert tuple(coarse.shape) == (1, 1, 8, 8)

    @pytest.mark.parametrize("w,cd,size", [(0.125, 8, 32), (0.25, 16, 64)])
    def test_shape_contract(self, w, cd, size):
        model = small_model(w, cd)
        with torch.no_grad():
            final, coarse = model(torch.rand(1, 3, size, size),
                                  torch.rand(1, 3, size, size))
        assert final.shape[-2:] == (size, size)
        assert coarse.shape[-2:] == (size // 4, size // 4)

    def test_identical_inputs_give_constant_logits(self):
        model = small_model()
        x = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            final, coarse = model(x, x)
        assert final.max() == final.min()
        assert coarse.max() == coarse.min()

    def test_swap_symmetry_bit_exact(self):
        model = small_model(seed=3)
        a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            f_ab, c_ab = model(a, b)
            f_ba, c_ba = model(b, a)
        assert torch.equal(f_ab, f_ba) and torch.equal(c_ab, c_ba)

    def test_deterministic_repeated_forward(self):
        model = small_model(seed=5)
        a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            f1, c1 = model(a, b)
            f2, c2 = model(a, b)
        assert torch.equal(f1, f2) and torch.equal(c1, c2)

    def test_all_toggles_off_keeps_full_resolution(self):
        model = small_model(toggles=ModuleToggles.all_off())
        with torch.no_grad():
            final, coarse = model(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32))
        assert tuple(final.shape) == (1, 1, 32, 32)
        assert tuple(coarse.shape) == (1, 1, 8, 8)

    @pytest.mark.parametrize("name", ["gcm_abc_enabled", "gcm_cde_enabled",
                                      "refine_enabled", "agg_init_enabled",
                                      "agg_final_enabled"])
    def test_each_single_bypass_runs(self, name):
        model = small_model(toggles=ModuleToggles().with_disabled(name))
        with torch.no_grad():
            final, _ = model(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32))
        assert torch.isfinite(final).all()

    def test_indivisible_dims_rejected(self):
        model = small_model()
        with pytest.raises(ValueError):
            model(torch.rand(1, 3, 30, 30), torch.rand(1, 3, 30, 30))

    def test_mismatched_inputs_rejected(self):
        model = small_model()
        with pytest.raises(ValueError):
            model(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 64, 64))

    def test_bad_decoder_width_rejected(self):
        with pytest.raises(ConfigurationError):
            C2FNet(0.125, decoder_width=6)


class TestParams:
    def test_roundtrip_bit_exact(self):
        model = small_model(seed=2)
        params = get_params(model)
        other = small_model(seed=9)
        set_params(other, params)
        assert param_checksum(other) == param_checksum(params)

    def test_width_mismatch_names_entry(self):
        params = get_params(small_model(w=0.25, cd=8))
        with pytest.raises(ConfigurationError, match="shape disagreement"):
            set_params(small_model(w=0.125, cd=8), params)

    def test_missing_entry_reported(self):
        model = small_model()
        params = get_params(model)
        params.pop(next(iter(params)))
        with pytest.raises(ConfigurationError, match="names disagree"):
            set_params(model, params)

    def test_checksum_tracks_values(self):
        model = small_model(seed=2)
        before = param_checksum(model)
        with torch.no_grad():
            model.head.bias.add_(1.0)
        assert param_checksum(model) != before

    def test_seeded_build_is_reproducible(self):
        assert param_checksum(build_model(0.125, 8, seed=11)) == \
            param_checksum(build_model(0.125, 8, seed=11))


class TestGradientAudit:
    def test_quick_audit_passes(self):
        report = gradient_audit(width_multiplier=0.125, tile=32, samples=40,
                                decoder_width=8, seed=1)
        assert report.ok(0.95), (report.worst_param, report.worst_rel_err)

    def test_corrupted_gradient_is_detected(self):
        report = gradient_audit(width_multiplier=0.125, tile=32, samples=10,
                                decoder_width=8, seed=1, corrupt_param="head.bias")
        assert not report.ok(0.999)
        assert "head.bias" in [name for name, *_ in report.failures]

    def test_unknown_corrupt_param_rejected(self):
        with pytest.raises(ValueError):
            gradient_audit(samples=2, decoder_width=8, corrupt_param="nope")

    def test_sample_count_validated(self):
        with pytest.raises(ValueError):
            gradient_audit(samples=0)
