"""Decoder contracts: mapping normalization, modulation/demodulation algebra,
skip-count arithmetic, and synthesis shape/determinism guarantees."""
import math

import pytest
import torch

from scenesynth.decoder import (
    DecoderConfig,
    MappingNetwork,
    ModulatedConv2d,
    SynthesisDecoder,
    compute_skip_K,
    modulated_conv2d,
)


class TestMapping:
    def test_scale_invariance_of_normalization(self):
        mapping = MappingNetwork(8, 8, depth=2)
        z = torch.randn(3, 8)
        assert torch.allclose(mapping(z), mapping(4.2 * z), atol=1e-5)

    def test_depth_zero_is_normalized_latent(self):
        mapping = MappingNetwork(8, 8, depth=0)
        z = torch.randn(3, 8)
        expected = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        assert torch.equal(mapping(z), expected)

    def test_depth_zero_requires_matching_dims(self):
        with pytest.raises(ValueError):
            MappingNetwork(8, 16, depth=0)


class TestModulatedConv:
    def test_unit_styles_no_demod_is_plain_conv(self):
        weight = torch.randn(4, 3, 3, 3)
        x = torch.randn(2, 3, 6, 6)
        styles = torch.ones(2, 3)
        out = modulated_conv2d(x, styles, weight, demodulate=False, padding=1)
        expected = torch.nn.functional.conv2d(x, weight, padding=1)
        assert torch.allclose(out, expected, atol=1e-5)

    def test_demodulation_cancels_style_scale(self):
        weight = torch.randn(4, 3, 3, 3, dtype=torch.float64)
        x = torch.randn(2, 3, 6, 6, dtype=torch.float64)
        styles = torch.rand(2, 3, dtype=torch.float64) + 0.5
        a = modulated_conv2d(x, styles, weight, demodulate=True, padding=1)
        b = modulated_conv2d(x, 3.7 * styles, weight, demodulate=True, padding=1)
        assert torch.allclose(a, b, atol=1e-9)

    def test_single_channel_1x1_closed_form(self):
        # hand formula: y = x * s * w / sqrt((s*w)^2 + eps)
        w_val, s_val, eps = 0.8, 1.7, 1e-8
        weight = torch.full((1, 1, 1, 1), w_val, dtype=torch.float64)
        styles = torch.full((1, 1), s_val, dtype=torch.float64)
        x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
        out = modulated_conv2d(x, styles, weight, demodulate=True)
        expected = x * (s_val * w_val) / math.sqrt((s_val * w_val) ** 2 + eps)
        assert torch.allclose(out, expected, atol=1e-12)
        out_plain = modulated_conv2d(x, styles, weight, demodulate=False)
        assert torch.allclose(out_plain, x * s_val * w_val, atol=1e-12)

    def test_module_affine_bias_starts_at_one(self):
        conv = ModulatedConv2d(3, 4, 3, style_dim=5)
        with torch.no_grad():
            conv.affine.weight.zero_()
        styles = conv.affine(torch.randn(2, 5))
        assert torch.allclose(styles, torch.ones(2, 3))


class TestComputeSkipK:
    @pytest.mark.parametrize("phi_res,expected", [(4, 0), (8, 1), (32, 3)])
    def test_block_count_arithmetic(self, phi_res, expected):
        assert compute_skip_K(phi_res) == expected

    def test_rejects_small(self):
        with pytest.raises(ValueError):
            compute_skip_K(2)


def toy_decoder(output_res=32, phi_res=4, **kw):
    cfg = DecoderConfig(
        output_res=output_res, phi_res=phi_res, phi_channels=6,
        latent_dim=8, style_dim=8, mapping_depth=1,
        max_channels=16, base_channels=4, **kw,
    )
    return SynthesisDecoder(cfg), cfg


class TestDecode:
    def test_stage_count(self):
        _, cfg = toy_decoder(output_res=512, phi_res=32)
        assert cfg.num_blocks == 4
        assert cfg.skip_k == 3

    def test_output_shape(self):
        dec, _ = toy_decoder(output_res=32, phi_res=4)
        img = dec(torch.randn(2, 6, 4, 4), torch.randn(2, 8))
        assert img.shape == (2, 3, 32, 32)

    def test_rectangular_phi_keeps_aspect(self):
        dec, _ = toy_decoder(output_res=32, phi_res=4)
        img = dec(torch.randn(1, 6, 4, 8), torch.randn(1, 8))
        assert img.shape == (1, 3, 32, 64)

    def test_deterministic_without_noise(self):
        dec, _ = toy_decoder()
        phi = torch.randn(1, 6, 4, 4)
        z = torch.randn(1, 8)
        assert torch.equal(dec(phi, z), dec(phi, z))

    def test_noise_changes_output_but_seeded_noise_repeats(self):
        dec, _ = toy_decoder()
        phi = torch.randn(1, 6, 4, 4)
        z = torch.randn(1, 8)
        with torch.no_grad():
            for layer in [dec.input_layer] + [l for b in dec.blocks for l in b]:
                layer.noise.strength.fill_(1.0)
        g1 = torch.Generator().manual_seed(3)
        g2 = torch.Generator().manual_seed(3)
        a = dec(phi, z, noise_mode="random", generator=g1)
        b = dec(phi, z, noise_mode="random", generator=g2)
        assert torch.equal(a, b)
        assert not torch.equal(a, dec(phi, z, noise_mode="none"))

    def test_finite_outputs_for_random_inputs(self):
        dec, _ = toy_decoder(output_res=64, phi_res=8)
        img = dec(torch.randn(4, 6, 8, 8) * 3, torch.randn(4, 8) * 3)
        assert torch.isfinite(img).all()

    def test_rejects_wrong_phi_res(self):
        dec, _ = toy_decoder(output_res=32, phi_res=4)
        with pytest.raises(ValueError):
            dec(torch.randn(1, 6, 8, 8), torch.randn(1, 8))

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            DecoderConfig(output_res=31, phi_res=4, phi_channels=4)
        with pytest.raises(ValueError):
            DecoderConfig(output_res=16, phi_res=2, phi_channels=4)
