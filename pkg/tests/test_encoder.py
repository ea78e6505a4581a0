"""Tokenizer, window machinery, attention, and backbone tests."""

import numpy as np
import pytest

from terraseg import tensor as T
from terraseg.config import ModelConfig
from terraseg.encoder import (
    Encoder,
    PatchEmbed,
    PatchMerging,
    SwinBlock,
    WindowAttention,
    attention_mask,
    cyclic_shift,
    window_partition,
    window_reverse,
)
from terraseg.errors import ConfigurationError
from terraseg.tensor import Tensor, backward


def make_rng():
    return np.random.default_rng(7)


class TestPatchEmbed:
    def test_token_grid_shape(self, rng):
        cfg = ModelConfig(in_channels=5, patch_size=4, embed_dim=96)
        pe = PatchEmbed(cfg, make_rng())
        out = pe(Tensor(rng.standard_normal((1, 5, 64, 64)).astype(np.float32)))
        assert out.shape == (1, 16, 16, 96)

    def test_zero_input_zero_projection(self):
        cfg = ModelConfig.tiny()
        pe = PatchEmbed(cfg, make_rng())
        out = pe.proj(Tensor(np.zeros((1, 5, 16, 16), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_projection_is_linear(self, rng):
        cfg = ModelConfig.tiny()
        pe = PatchEmbed(cfg, make_rng())
        pe.proj.bias.data[:] = 0.0
        x = rng.standard_normal((1, 5, 16, 16)).astype(np.float32)
        one = pe.proj(Tensor(x)).data
        two = pe.proj(Tensor(2.0 * x)).data
        np.testing.assert_allclose(two, 2.0 * one, rtol=1e-5)

    def test_indivisible_extent_rejected(self):
        cfg = ModelConfig.tiny()
        pe = PatchEmbed(cfg, make_rng())
        with pytest.raises(ConfigurationError):
            pe(Tensor(np.zeros((1, 5, 18, 16), dtype=np.float32)))


class TestWindows:
    def test_partition_count(self, rng):
        x = Tensor(rng.standard_normal((1, 8, 8, 3)))
        wins = window_partition(x, 4)
        assert wins.shape == (4, 4, 4, 3)

    def test_round_trip_exact(self, rng):
        for _ in range(5):
            h = int(rng.integers(1, 5)) * 4
            w = int(rng.integers(1, 5)) * 4
            x = rng.standard_normal((2, h, w, 3)).astype(np.float32)
            back = window_reverse(window_partition(Tensor(x), 4), 4, h, w)
            np.testing.assert_array_equal(back.data, x)

    def test_single_window_is_identity(self, rng):
        x = rng.standard_normal((1, 6, 6, 2))
        wins = window_partition(Tensor(x), 6)
        np.testing.assert_array_equal(wins.data, x)

    def test_window_order_is_row_major(self):
        grid = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
        wins = window_partition(Tensor(grid), 2)
        # first window is the top-left 2x2 block, second the top-right
        np.testing.assert_array_equal(wins.data[0, :, :, 0], [[0, 1], [4, 5]])
        np.testing.assert_array_equal(wins.data[1, :, :, 0], [[2, 3], [6, 7]])

    def test_partition_gradient_flows(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 4, 2)), requires_grad=True)
        backward(T.tsum(T.power(window_partition(x, 2), 2)))
        assert x.grad is not None and x.grad.shape == x.shape


class TestCyclicShift:
    def test_zero_shift_identity(self, rng):
        x = rng.standard_normal((1, 4, 4, 1))
        np.testing.assert_array_equal(cyclic_shift(Tensor(x), 0, 0).data, x)

    def test_round_trip(self, rng):
        x = rng.standard_normal((1, 4, 4, 3)).astype(np.float32)
        out = cyclic_shift(cyclic_shift(Tensor(x), -2, -2), 2, 2)
        np.testing.assert_array_equal(out.data, x)

    def test_corner_wraps(self):
        x = np.zeros((1, 5, 7, 1), dtype=np.float32)
        x[0, 0, 0, 0] = 1.0
        out = cyclic_shift(Tensor(x), -1, -1)
        assert out.data[0, 4, 6, 0] == 1.0


class TestAttentionMask:
    def test_regions_allow_self(self):
        mask = attention_mask(8, 8, 4, 2)
        assert mask.shape == (4, 16, 16)
        assert (np.diagonal(mask, axis1=1, axis2=2) == 0).all()

    def test_unshifted_window_has_open_mask(self):
        # the window fully inside the grid sees no region boundary
        mask = attention_mask(8, 8, 4, 2)
        assert (mask[0] == 0).all()

    def test_masked_rows_still_sum_to_one(self, rng):
        mask = attention_mask(8, 8, 4, 2)
        logits = Tensor(rng.standard_normal((4, 16, 16)))
        probs = T.softmax(T.add(logits, Tensor(mask)), axis=-1)
        np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_cross_region_probability_suppressed(self, rng):
        mask = attention_mask(8, 8, 4, 2)
        crossing = mask < 0
        assert crossing.any()
        probs = T.softmax(T.add(Tensor(rng.standard_normal(mask.shape)), Tensor(mask)), axis=-1).data
        assert probs[crossing].max() < 1e-6


class TestWindowAttention:
    def test_single_token_window_is_value_projection(self, rng):
        attn = WindowAttention(dim=6, num_heads=2, window=1, rng=make_rng())
        x = rng.standard_normal((3, 1, 6)).astype(np.float32)
        out = attn(Tensor(x), window=1)
        wqkv, bqkv = attn.qkv.weight.data, attn.qkv.bias.data
        v = x @ wqkv[12:].T + bqkv[12:]
        expected = v @ attn.proj.weight.data.T + attn.proj.bias.data
        np.testing.assert_allclose(out.data, expected, atol=1e-5)

    def test_zero_bias_attention_is_permutation_equivariant(self, rng):
        attn = WindowAttention(dim=8, num_heads=2, window=2, rng=make_rng())
        attn.rel_bias.data[:] = 0.0
        x = rng.standard_normal((1, 4, 8)).astype(np.float32)
        perm = rng.permutation(4)
        out = attn(Tensor(x), window=2).data
        out_perm = attn(Tensor(x[:, perm]), window=2).data
        np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-5)

    def test_position_bias_contributes(self, rng):
        attn = WindowAttention(dim=8, num_heads=2, window=2, rng=make_rng())
        x = Tensor(rng.standard_normal((1, 4, 8)).astype(np.float32))
        with_bias = attn(x, window=2).data.copy()
        attn.rel_bias.data[:] = 0.0
        without_bias = attn(x, window=2).data
        assert not np.allclose(with_bias, without_bias)

    def test_gradients_reach_all_parameters(self, rng):
        attn = WindowAttention(dim=4, num_heads=2, window=2, rng=make_rng())
        x = Tensor(rng.standard_normal((2, 4, 4)).astype(np.float32), requires_grad=True)
        backward(T.tsum(T.power(attn(x, window=2), 2)))
        for name, p in attn.named_parameters():
            assert p.grad is not None, name
            assert np.abs(p.grad).sum() > 0, name


class TestSwinBlock:
    def test_shape_preserved(self, rng):
        block = SwinBlock(dim=8, num_heads=2, window=4, shifted=True, mlp_ratio=2.0, rng=make_rng())
        x = Tensor(rng.standard_normal((2, 8, 8, 8)).astype(np.float32))
        assert block(x).shape == x.shape

    def test_zero_weights_make_identity(self, rng):
        block = SwinBlock(dim=4, num_heads=1, window=2, shifted=False, mlp_ratio=2.0, rng=make_rng())
        for _, p in block.named_parameters():
            if not p.name.endswith(("gamma", "beta")):
                p.data[:] = 0.0
        x = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(block(Tensor(x)).data, x)

    def test_shifted_differs_from_unshifted(self, rng):
        plain = SwinBlock(dim=4, num_heads=1, window=4, shifted=False, mlp_ratio=2.0, rng=make_rng())
        shifted = SwinBlock(dim=4, num_heads=1, window=4, shifted=True, mlp_ratio=2.0, rng=make_rng())
        for block in (plain, shifted):  # identical weights, scaled to macroscopic size
            for _, p in block.named_parameters():
                p.data = p.data * 50.0
        x = np.zeros((1, 8, 8, 4), dtype=np.float32)
        # hot tokens in different windows unshifted, in the same window shifted
        x[0, 3, 3, :] = [1.0, -2.0, 0.5, 3.0]
        x[0, 4, 4, :] = [-1.0, 2.0, 1.5, 0.25]
        a = plain(Tensor(x)).data
        b = shifted(Tensor(x)).data
        assert not np.allclose(a, b)

    def test_single_window_shift_is_noop(self, rng):
        plain = SwinBlock(dim=4, num_heads=1, window=4, shifted=False, mlp_ratio=2.0, rng=make_rng())
        shifted = SwinBlock(dim=4, num_heads=1, window=4, shifted=True, mlp_ratio=2.0, rng=make_rng())
        x = Tensor(rng.standard_normal((1, 4, 4, 4)).astype(np.float32))
        np.testing.assert_allclose(plain(x).data, shifted(x).data, atol=1e-5)

    def test_non_window_multiple_grid_pads_internally(self, rng):
        block = SwinBlock(dim=4, num_heads=1, window=4, shifted=True, mlp_ratio=2.0, rng=make_rng())
        x = Tensor(rng.standard_normal((1, 6, 10, 4)).astype(np.float32))
        assert block(x).shape == (1, 6, 10, 4)


class TestPatchMerging:
    def test_halves_grid_doubles_channels(self, rng):
        pm = PatchMerging(dim=4, rng=make_rng())
        out = pm(Tensor(rng.standard_normal((1, 8, 8, 4)).astype(np.float32)))
        assert out.shape == (1, 4, 4, 8)

    def test_zero_input_zero_output(self):
        pm = PatchMerging(dim=4, rng=make_rng())
        out = pm(Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_constant_input_constant_output(self):
        pm = PatchMerging(dim=4, rng=make_rng())
        out = pm(Tensor(np.full((1, 6, 6, 4), 1.5, dtype=np.float32))).data
        np.testing.assert_allclose(out, np.broadcast_to(out[:, :1, :1, :], out.shape), atol=1e-6)

    def test_odd_extent_rejected(self):
        pm = PatchMerging(dim=4, rng=make_rng())
        with pytest.raises(ConfigurationError):
            pm(Tensor(np.zeros((1, 5, 4, 4), dtype=np.float32)))


class TestEncoder:
    def test_tiny_pyramid_shapes(self, rng):
        cfg = ModelConfig.tiny()
        enc = Encoder(cfg, make_rng())
        with T.no_grad():
            pyr = enc(Tensor(rng.standard_normal((1, 5, 64, 64)).astype(np.float32)))
        shapes = [f.shape for f in pyr.levels()]
        assert shapes == [(1, 32, 16, 16), (1, 64, 8, 8), (1, 128, 4, 4), (1, 256, 2, 2)]

    def test_default_pyramid_shapes(self, rng):
        cfg = ModelConfig()
        enc = Encoder(cfg, make_rng())
        with T.no_grad():
            pyr = enc(Tensor(rng.standard_normal((1, 5, 224, 224)).astype(np.float32)))
        shapes = [f.shape for f in pyr.levels()]
        assert shapes == [(1, 96, 56, 56), (1, 192, 28, 28), (1, 384, 14, 14), (1, 768, 7, 7)]

    def test_deterministic(self, rng):
        cfg = ModelConfig.tiny()
        x = rng.standard_normal((1, 5, 64, 64)).astype(np.float32)
        with T.no_grad():
            a = Encoder(cfg, make_rng())(Tensor(x)).f4.data
            b = Encoder(cfg, make_rng())(Tensor(x)).f4.data
        np.testing.assert_array_equal(a, b)

    def test_gradient_reaches_tokenizer(self, rng):
        cfg = ModelConfig.tiny()
        enc = Encoder(cfg, make_rng())
        pyr = enc(Tensor(rng.standard_normal((1, 5, 32, 32)).astype(np.float32)))
        backward(T.tsum(T.power(pyr.f4, 2)))
        grad = enc.patch_embed.proj.weight.grad
        assert grad is not None and np.abs(grad).sum() > 0

    def test_indivisible_input_rejected(self, rng):
        cfg = ModelConfig.tiny()
        enc = Encoder(cfg, make_rng())
        with pytest.raises(ConfigurationError):
            enc(Tensor(np.zeros((1, 5, 48, 48), dtype=np.float32)))
