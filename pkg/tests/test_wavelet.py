import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stainfuse.exceptions import ShapeError
from stainfuse.wavelet import WaveletSubbands, WTConvLayer, haar_dwt2d, haar_idwt2d

from oracles import central_difference, haar_transform_matrix


class TestHaarDWT:
    def test_constant_image(self):
        c = 3.25
        x = torch.full((1, 1, 4, 4), c)
        s = haar_dwt2d(x)
        assert torch.allclose(s.ll, torch.full((1, 1, 2, 2), 2 * c))
        for band in (s.lh, s.hl, s.hh):
            assert torch.allclose(band, torch.zeros_like(band))

    def test_energy_conservation(self):
        x = torch.randn(2, 3, 8, 12, dtype=torch.float64)
        s = haar_dwt2d(x)
        energy = sum(float((b**2).sum()) for b in s)
        assert energy == pytest.approx(float((x**2).sum()), rel=1e-6)

    def test_matches_transform_matrix_oracle(self):
        torch.manual_seed(3)
        x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
        s = haar_dwt2d(x)
        mat = haar_transform_matrix(4, 4)
        coeffs = mat @ x.numpy().ravel()
        bands = coeffs.reshape(4, 2, 2)
        for got, want in zip((s.ll, s.lh, s.hl, s.hh), bands):
            np.testing.assert_allclose(got.numpy()[0, 0], want, atol=1e-6)

    def test_transform_matrix_is_orthogonal(self):
        mat = haar_transform_matrix(4, 4)
        np.testing.assert_allclose(mat @ mat.T, np.eye(16), atol=1e-12)

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError, match="height"):
            haar_dwt2d(torch.zeros(1, 1, 5, 4))
        with pytest.raises(ShapeError, match="width"):
            haar_dwt2d(torch.zeros(1, 1, 4, 6 + 1))

    @settings(max_examples=25, deadline=None)
    @given(
        h=st.integers(1, 8).map(lambda v: 2 * v),
        w=st.integers(1, 8).map(lambda v: 2 * v),
        seed=st.integers(0, 10_000),
    )
    def test_linearity(self, h, w, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(1, 2, h, w, generator=g, dtype=torch.float64)
        y = torch.randn(1, 2, h, w, generator=g, dtype=torch.float64)
        a, b = 0.7, -2.3
        combined = haar_dwt2d(a * x + b * y)
        separate = WaveletSubbands(
            *(a * bx + b * by for bx, by in zip(haar_dwt2d(x), haar_dwt2d(y)))
        )
        for got, want in zip(combined, separate):
            assert torch.allclose(got, want, atol=1e-6)


class TestHaarIDWT:
    def test_constant_roundtrip(self):
        x = torch.full((1, 2, 4, 4), -1.5)
        back = haar_idwt2d(haar_dwt2d(x))
        assert torch.allclose(back, x, atol=1e-6)

    def test_zero_subbands_give_zero_image(self):
        z = torch.zeros(1, 1, 2, 2)
        out = haar_idwt2d(WaveletSubbands(z, z, z, z))
        assert torch.equal(out, torch.zeros(1, 1, 4, 4))

    def test_random_roundtrip(self):
        torch.manual_seed(11)
        x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
        back = haar_idwt2d(haar_dwt2d(x))
        assert float((back - x).abs().max()) < 1e-6

    def test_mismatched_subband_shapes(self):
        z = torch.zeros(1, 1, 2, 2)
        bad = torch.zeros(1, 1, 2, 3)
        with pytest.raises(ShapeError, match="hh"):
            haar_idwt2d(WaveletSubbands(z, z, z, bad))

    @settings(max_examples=25, deadline=None)
    @given(
        h=st.integers(1, 10).map(lambda v: 2 * v),
        w=st.integers(1, 10).map(lambda v: 2 * v),
        seed=st.integers(0, 10_000),
    )
    def test_roundtrip_property(self, h, w, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(2, 1, h, w, generator=g, dtype=torch.float64)
        assert float((haar_idwt2d(haar_dwt2d(x)) - x).abs().max()) < 1e-6


class TestWTConvLayer:
    def test_ll_identity_on_constant_input(self):
        layer = WTConvLayer(3, 3, activation="linear")
        layer.init_ll_identity()
        c = 0.75
        out = layer(torch.full((1, 3, 8, 8), c))
        assert out.shape == (1, 3, 4, 4)
        assert torch.allclose(out, torch.full((1, 3, 4, 4), 2 * c), atol=1e-6)

    def test_output_shape(self):
        layer = WTConvLayer(3, 16)
        out = layer(torch.randn(1, 3, 8, 8))
        assert out.shape == (1, 16, 4, 4)

    def test_halves_spatial_dims_never_pads(self):
        layer = WTConvLayer(2, 4)
        out = layer(torch.randn(2, 2, 6, 10))
        assert out.shape == (2, 4, 3, 5)
        with pytest.raises(ShapeError):
            layer(torch.randn(1, 2, 7, 10))

    def test_channel_mismatch(self):
        layer = WTConvLayer(3, 8)
        with pytest.raises(ShapeError, match="3"):
            layer(torch.randn(1, 4, 8, 8))

    def test_mixing_weight_gradient_matches_finite_differences(self):
        torch.manual_seed(5)
        layer = WTConvLayer(2, 4).double()
        x = torch.randn(1, 2, 4, 4, dtype=torch.float64)

        def scalar():
            return (layer(x) ** 2).sum()

        loss = scalar()
        loss.backward()
        weight = layer.mix.weight
        for index in [(0, 0, 0, 0), (3, 7, 0, 0), (2, 4, 0, 0)]:
            fd = central_difference(scalar, weight.data, index, eps=1e-6)
            auto = float(weight.grad[index])
            assert fd == pytest.approx(auto, rel=1e-4)
