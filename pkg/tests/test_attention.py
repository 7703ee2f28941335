import numpy as np
import pytest
import torch

from stainfuse.attention import CrossAttentionFusion
from stainfuse.exceptions import ShapeError

from oracles import central_difference, cross_attention_reference


def make_layer(channels=2, alpha=0.2, **kwargs) -> CrossAttentionFusion:
    layer = CrossAttentionFusion(channels, alpha=alpha, **kwargs)
    layer.eval()  # deterministic batch-norm with running statistics
    return layer


class TestCrossAttentionFusion:
    def test_alpha_zero_is_identity(self):
        torch.manual_seed(0)
        layer = make_layer(alpha=0.0)
        f_gen = torch.randn(2, 2, 4, 4)
        f_enc = torch.randn(2, 2, 4, 4)
        assert torch.equal(layer(f_gen, f_enc), f_gen)

    def test_single_key_closed_form(self):
        torch.manual_seed(1)
        layer = make_layer(channels=3, alpha=0.7)
        f_gen = torch.randn(2, 3, 1, 1)
        f_enc = torch.randn(2, 3, 1, 1)
        got = layer(f_gen, f_enc)

        # softmax over one key is 1, so the attended value is v_proj(f_enc)
        v = layer.v_proj(f_enc)
        y = layer.out_proj(v)
        bn = layer.bn
        y = (y - bn.running_mean.view(1, -1, 1, 1)) / torch.sqrt(
            bn.running_var.view(1, -1, 1, 1) + bn.eps
        ) * bn.weight.view(1, -1, 1, 1) + bn.bias.view(1, -1, 1, 1)
        want = f_gen + layer.alpha * y
        assert torch.allclose(got, want, atol=1e-6)

    def test_matches_dense_loop_oracle(self):
        torch.manual_seed(2)
        layer = make_layer(channels=2, alpha=0.3).double()
        f_gen = torch.randn(1, 2, 2, 2, dtype=torch.float64)
        f_enc = torch.randn(1, 2, 2, 2, dtype=torch.float64)
        got = layer(f_gen, f_enc).detach().numpy()
        want = cross_attention_reference(f_gen, f_enc, layer)
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_default_fusion_strength(self):
        assert CrossAttentionFusion(8).alpha == pytest.approx(0.2)

    def test_attention_rows_sum_to_one(self):
        torch.manual_seed(3)
        layer = make_layer(channels=4)
        attn = layer.attention_matrix(torch.randn(2, 4, 3, 3), torch.randn(2, 4, 3, 3))
        sums = attn.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_scaling_q_and_k_preserves_row_argmax(self):
        torch.manual_seed(4)
        layer = make_layer(channels=4)
        f_gen, f_enc = torch.randn(1, 4, 3, 3), torch.randn(1, 4, 3, 3)
        before = layer.attention_matrix(f_gen, f_enc)
        c = 1.9
        with torch.no_grad():
            for proj in (layer.q_proj, layer.k_proj):
                proj.weight.mul_(c)
                proj.bias.mul_(c)
        after = layer.attention_matrix(f_gen, f_enc)
        assert torch.equal(before.argmax(dim=-1), after.argmax(dim=-1))
        assert not torch.allclose(before, after)  # full softmax values change

    def test_residual_scales_linearly_in_alpha(self):
        torch.manual_seed(5)
        f_gen, f_enc = torch.randn(1, 2, 4, 4), torch.randn(1, 2, 4, 4)
        deltas = {}
        base = make_layer(alpha=1.0)
        state = base.state_dict()
        for alpha in (0.5, 1.0, 2.0):
            layer = make_layer(alpha=alpha)
            layer.load_state_dict(state)
            layer.eval()
            deltas[alpha] = layer(f_gen, f_enc) - f_gen
        assert torch.allclose(deltas[1.0] * 0.5, deltas[0.5], atol=1e-6)
        assert torch.allclose(deltas[1.0] * 2.0, deltas[2.0], atol=1e-6)

    def test_q_projection_gradient_matches_finite_differences(self):
        torch.manual_seed(6)
        layer = make_layer(channels=2).double()
        f_gen = torch.randn(1, 2, 2, 2, dtype=torch.float64)
        f_enc = torch.randn(1, 2, 2, 2, dtype=torch.float64)

        def scalar():
            return layer(f_gen, f_enc).sum()

        scalar().backward()
        weight = layer.q_proj.weight
        for index in [(0, 0, 0, 0), (1, 1, 0, 0)]:
            fd = central_difference(scalar, weight.data, index, eps=1e-6)
            assert fd == pytest.approx(float(weight.grad[index]), rel=1e-4)

    def test_fixed_chunk_size_is_deterministic(self):
        torch.manual_seed(7)
        f_gen, f_enc = torch.randn(1, 8, 8, 8), torch.randn(1, 8, 8, 8)
        layer = make_layer(channels=8, chunk_size=5)
        assert torch.equal(layer(f_gen, f_enc), layer(f_gen, f_enc))

    def test_chunked_rows_match_dense_evaluation(self):
        # row-wise softmax makes chunking mathematically exact; BLAS kernel
        # selection varies with GEMM shape, so agreement is to float rounding
        torch.manual_seed(8)
        for channels, size in ((4, 4), (32, 32)):
            f_gen = torch.randn(1, channels, size, size)
            f_enc = torch.randn(1, channels, size, size)
            layer = make_layer(channels=channels, chunk_size=1_000_000)
            dense = layer(f_gen, f_enc)
            for chunk in (3, 100):
                layer.chunk_size = chunk
                assert torch.allclose(dense, layer(f_gen, f_enc), atol=1e-6)

    def test_shape_mismatch_and_bad_d(self):
        layer = make_layer(channels=2)
        with pytest.raises(ShapeError):
            layer(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 2, 2))
        with pytest.raises(ValueError, match="d must be positive"):
            CrossAttentionFusion(4, d=0)
        with pytest.raises(ValueError, match="alpha"):
            CrossAttentionFusion(4, alpha=-0.1)
