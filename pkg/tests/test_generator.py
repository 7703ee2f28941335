import numpy as np
import pytest
import torch

from stainfuse.exceptions import ShapeError
from stainfuse.generator import (
    GeneratorConfig,
    GeneratorFeatureMaps,
    StainGenerator,
    fuse_hidden,
)
from stainfuse.multiscale import HiddenSequence

from oracles import central_difference


def small_config(**kwargs) -> GeneratorConfig:
    defaults = dict(base_width=8, encoder_channels=32)
    defaults.update(kwargs)
    return GeneratorConfig(**defaults)


def guidance_for(cfg: GeneratorConfig, x: torch.Tensor) -> torch.Tensor:
    b, _, h, w = x.shape
    return torch.randn(b, cfg.encoder_channels, h // 4, w // 4, dtype=x.dtype)


class TestFuseHidden:
    def test_zero_hidden_is_identity(self):
        f = GeneratorFeatureMaps(*(torch.randn(1, 4, 2, 2) for _ in range(4)))
        z = torch.zeros(1, 4, 2, 2)
        fused = fuse_hidden(f, HiddenSequence(z, z, z))
        for got, want in zip(fused, f):
            assert torch.equal(got, want)

    def test_zero_features_pass_hidden_through(self):
        z = torch.zeros(1, 3, 2, 2)
        hs = HiddenSequence(*(torch.randn(1, 3, 2, 2) for _ in range(3)))
        fused = fuse_hidden(GeneratorFeatureMaps(z, z, z, z), hs)
        assert torch.equal(fused.f1, z)
        assert torch.equal(fused.f2, hs.h3)
        assert torch.equal(fused.f3, hs.h2)
        assert torch.equal(fused.f4, hs.h1)

    def test_matches_scalar_loop_oracle(self):
        torch.manual_seed(0)
        fmaps = GeneratorFeatureMaps(*(torch.randn(1, 2, 2, 2) for _ in range(4)))
        hs = HiddenSequence(*(torch.randn(1, 2, 2, 2) for _ in range(3)))
        fused = fuse_hidden(fmaps, hs)

        f_np = [t.numpy() for t in fmaps]
        h_np = [t.numpy() for t in hs]  # (h3, h2, h1)
        for k, h in zip((1, 2, 3), h_np):  # f2+h3, f3+h2, f4+h1
            want = np.empty_like(f_np[k])
            for c in range(2):
                for i in range(2):
                    for j in range(2):
                        want[0, c, i, j] = f_np[k][0, c, i, j] + h[0, c, i, j]
            np.testing.assert_allclose(fused[k].numpy(), want, atol=1e-6)

    def test_shape_mismatch(self):
        f = GeneratorFeatureMaps(*(torch.zeros(1, 2, 2, 2) for _ in range(4)))
        bad = HiddenSequence(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2, 2))
        with pytest.raises(ShapeError, match="f2"):
            fuse_hidden(f, bad)


class TestStainGenerator:
    def test_full_size_shape_and_range(self):
        cfg = GeneratorConfig()  # paper-scale defaults: base 64, 6 blocks
        gen = StainGenerator(cfg)
        x = torch.rand(1, 3, 512, 512) * 2 - 1
        with torch.no_grad():
            out = gen(x, torch.randn(1, 256, 128, 128))
        assert out.shape == (1, 3, 512, 512)
        assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0

    def test_desk_scale_shape(self):
        cfg = small_config()
        gen = StainGenerator(cfg)
        x = torch.randn(2, 3, 64, 64)
        with torch.no_grad():
            out = gen(x, guidance_for(cfg, x))
        assert out.shape == (2, 3, 64, 64)

    def test_output_range_under_extreme_input(self):
        cfg = small_config()
        gen = StainGenerator(cfg)
        x = torch.randn(1, 3, 16, 16) * 50
        with torch.no_grad():
            out = gen(x, guidance_for(cfg, x))
        assert float(out.abs().max()) <= 1.0

    def test_zero_fusion_reduces_to_backbone(self):
        torch.manual_seed(3)
        cfg = small_config(fusion_strength=0.0)
        gen = StainGenerator(cfg)
        x = torch.randn(1, 3, 16, 16)

        def zero_hidden(pyramid):
            z = torch.zeros_like(pyramid.x3)
            return HiddenSequence(z, z.clone(), z.clone())

        gen.extractor.run_recurrence = zero_hidden
        with torch.no_grad():
            fused = gen(x, guidance_for(cfg, x))
            plain = gen.backbone_forward(x)
        assert torch.equal(fused, plain)

    def test_indivisible_dims_rejected(self):
        gen = StainGenerator(small_config())
        with pytest.raises(ShapeError, match="divisible"):
            gen(torch.zeros(1, 3, 18, 16), None)

    def test_wrong_guidance_channels_rejected(self):
        cfg = small_config(encoder_channels=32)
        gen = StainGenerator(cfg)
        x = torch.zeros(1, 3, 16, 16)
        with pytest.raises(ShapeError):
            gen(x, torch.zeros(1, 7, 4, 4))

    def test_missing_guidance_rejected_when_attention_on(self):
        gen = StainGenerator(small_config())
        with pytest.raises(ValueError, match="encoder features"):
            gen(torch.zeros(1, 3, 16, 16), None)

    def test_stem_weight_gradient_matches_finite_differences(self):
        torch.manual_seed(4)
        cfg = small_config(base_width=4, encoder_channels=16)
        gen = StainGenerator(cfg).double()
        x = torch.randn(1, 3, 16, 16, dtype=torch.float64)
        feats = torch.randn(1, 16, 4, 4, dtype=torch.float64)

        def scalar():
            return gen(x, feats).mean()

        scalar().backward()
        weight = gen.extractor.stem[1].weight
        index = (0, 0, 3, 3)
        # eps small enough that the +-eps window crosses no relu kinks
        fd = central_difference(scalar, weight.data, index, eps=1e-6)
        assert fd == pytest.approx(float(weight.grad[index]), rel=1e-3)

    def test_ablated_variants_remain_valid_and_smaller(self):
        full = StainGenerator(small_config())
        no_vmfe = StainGenerator(small_config(use_vmfe=False))
        no_attn = StainGenerator(small_config(use_attention=False))
        n_params = lambda m: sum(p.numel() for p in m.parameters())
        assert n_params(no_vmfe) < n_params(full)
        assert n_params(no_attn) < n_params(full)

        x = torch.randn(1, 3, 16, 16)
        with torch.no_grad():
            out_v = no_vmfe(x, guidance_for(no_vmfe.cfg, x))
            out_a = no_attn(x, None)  # guidance ignored without attention
        for out in (out_v, out_a):
            assert out.shape == (1, 3, 16, 16)
            assert float(out.abs().max()) <= 1.0

    def test_config_validation(self):
        with pytest.raises(ValueError, match="fusion_strength"):
            GeneratorConfig(fusion_strength=-0.5)
        with pytest.raises(ValueError, match="distinct"):
            GeneratorConfig(fusion_points=(2, 2, 3))
        with pytest.raises(ValueError, match="lie in"):
            GeneratorConfig(fusion_points=(2, 3, 9))

    def test_configurable_fusion_points(self):
        cfg = small_config(fusion_points=(4, 5, 6), attention_point=2)
        gen = StainGenerator(cfg)
        x = torch.randn(1, 3, 16, 16)
        with torch.no_grad():
            out = gen(x, guidance_for(cfg, x))
        assert out.shape == (1, 3, 16, 16)
