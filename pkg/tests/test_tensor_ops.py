"""Forward-value checks of the primitive ops against independent oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsunet import tensor as T
from lsunet.errors import ConfigError, ContractError, NonFiniteError, ShapeError
from lsunet.tensor import RunningStats, Tensor


def direct_conv2d(x, w, b, stride, padding):
    """Naive looped convolution oracle (float64)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for ni in range(n):
        for oi in range(oc):
            for p in range(oh):
                for q in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += xp[ni, ci, p * stride + ki, q * stride + kj] * w[oi, ci, ki, kj]
                    out[ni, oi, p, q] = acc
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[None, :, None, None]
    return out


class TestConv2d:
    def test_identity_1x1(self):
        v = 0.37
        x = Tensor(np.full((1, 1, 1, 1), v, dtype=np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = T.conv2d(x, w, b, 1, 0)
        assert out.data[0, 0, 0, 0] == pytest.approx(v)

    def test_all_ones_3x3_padded(self):
        x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = T.conv2d(x, w, b, 1, 1).data[0, 0]
        expected = direct_conv2d(x.data, w.data, b.data, 1, 1)[0, 0]
        np.testing.assert_allclose(out, expected, atol=1e-6)
        assert out[1, 1] == 9.0
        assert out[0, 1] == out[1, 0] == out[1, 2] == out[2, 1] == 6.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0

    def test_stride2_downsamples_224(self):
        x = Tensor(np.zeros((1, 1, 224, 224), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        out = T.conv2d(x, w, None, stride=2, padding=0)
        assert out.shape == (1, 1, 112, 112)

    def test_matches_direct_oracle_on_random_configs(self, rng):
        for _ in range(12):
            c = int(rng.integers(1, 4))
            oc = int(rng.integers(1, 4))
            k = int(rng.choice([1, 2, 3]))
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 2))
            h = int(rng.integers(k, 8))
            w = int(rng.integers(k, 8))
            x = rng.standard_normal((2, c, h, w)).astype(np.float32)
            wt = rng.standard_normal((oc, c, k, k)).astype(np.float32)
            b = rng.standard_normal(oc).astype(np.float32)
            got = T.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, padding).data
            want = direct_conv2d(x, wt, b, stride, padding)
            np.testing.assert_allclose(got, want, atol=1e-5)

    def test_channel_mismatch_reports_both_shapes(self):
        x = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
        w = Tensor(np.zeros((2, 2, 1, 1), dtype=np.float32))
        with pytest.raises(ShapeError) as err:
            T.conv2d(x, w, None, 1, 0)
        assert "(1, 3, 4, 4)" in str(err.value) and "(2, 2, 1, 1)" in str(err.value)

    def test_kernel_larger_than_padded_input(self):
        x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32))
        with pytest.raises(ShapeError):
            T.conv2d(x, w, None, 1, 0)


class TestDepthwise:
    def test_per_channel_scaling(self):
        x = Tensor(np.stack([np.full((4, 4), 1.0), np.full((4, 4), 1.0)])[None].astype(np.float32))
        w = Tensor(np.array([2.0, 3.0], dtype=np.float32).reshape(2, 1, 1, 1))
        b = Tensor(np.zeros(2, dtype=np.float32))
        out = T.depthwise_conv2d(x, w, b, 1, 0)
        assert np.all(out.data[0, 0] == 2.0)
        assert np.all(out.data[0, 1] == 3.0)

    def test_equals_block_diagonal_conv2d(self, rng):
        x = rng.standard_normal((1, 3, 5, 5)).astype(np.float32)
        wd = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        dense = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            dense[c, c] = wd[c, 0]
        got = T.depthwise_conv2d(Tensor(x), Tensor(wd), Tensor(b), 1, 1).data
        want = T.conv2d(Tensor(x), Tensor(dense), Tensor(b), 1, 1).data
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_zero_input_gives_bias(self):
        x = Tensor(np.zeros((2, 3, 4, 4), dtype=np.float32))
        w = Tensor(np.zeros((3, 1, 3, 3), dtype=np.float32))
        b = Tensor(np.array([1.0, -2.0, 0.5], dtype=np.float32))
        out = T.depthwise_conv2d(x, w, b, 1, 1).data
        np.testing.assert_array_equal(out, np.broadcast_to(b.data[None, :, None, None], out.shape))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.depthwise_conv2d(Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)),
                               Tensor(np.zeros((3, 1, 3, 3), dtype=np.float32)), None, 1, 1)


class TestBatchNorm:
    def test_constant_channel_zeroes_out(self):
        x = Tensor(np.full((2, 1, 3, 3), 7.0, dtype=np.float32))
        g = Tensor(np.ones(1, dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = T.batch_norm2d(x, g, b, RunningStats(1), training=True)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-4)

    def test_zero_gamma_gives_beta(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
        g = Tensor(np.zeros(3, dtype=np.float32))
        b = Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32))
        out = T.batch_norm2d(x, g, b, RunningStats(3), training=True).data
        np.testing.assert_array_equal(out, np.broadcast_to(b.data[None, :, None, None], out.shape))

    def test_normalized_statistics(self, rng):
        x = Tensor((rng.standard_normal((4, 3, 8, 8)) * 3 + 1).astype(np.float32))
        g = Tensor(np.ones(3, dtype=np.float32))
        b = Tensor(np.zeros(3, dtype=np.float32))
        out = T.batch_norm2d(x, g, b, RunningStats(3), training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_eval_before_any_stats_uses_initial(self, rng):
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        g = Tensor(np.ones(2, dtype=np.float32))
        b = Tensor(np.zeros(2, dtype=np.float32))
        out = T.batch_norm2d(Tensor(x), g, b, RunningStats(2), training=False).data
        np.testing.assert_allclose(out, x / np.sqrt(1.0 + 1e-5), rtol=1e-6)

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((4, 2, 4, 4)).astype(np.float32)
        stats = RunningStats(2)
        g = Tensor(np.ones(2, dtype=np.float32))
        b = Tensor(np.zeros(2, dtype=np.float32))
        T.batch_norm2d(Tensor(x), g, b, stats, training=True, momentum=0.1)
        np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-6)
        np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), atol=1e-6)

    def test_training_requires_two_elements(self):
        x = Tensor(np.zeros((1, 2, 1, 1), dtype=np.float32))
        g = Tensor(np.ones(2, dtype=np.float32))
        b = Tensor(np.zeros(2, dtype=np.float32))
        with pytest.raises(ContractError):
            T.batch_norm2d(x, g, b, RunningStats(2), training=True)


class TestGroupNorm:
    def test_groups_equal_channels_is_instance_norm(self, rng):
        x = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
        g = Tensor(np.ones(4, dtype=np.float32))
        b = Tensor(np.zeros(4, dtype=np.float32))
        out = T.group_norm(Tensor(x), 4, g, b).data
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + 1e-5), rtol=1e-4, atol=1e-5)

    def test_batch_independence(self, rng):
        x1 = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
        g = Tensor(np.ones(4, dtype=np.float32))
        b = Tensor(np.zeros(4, dtype=np.float32))
        single = T.group_norm(Tensor(x1), 2, g, b).data
        batched = T.group_norm(Tensor(np.repeat(x1, 8, axis=0)), 2, g, b).data
        np.testing.assert_array_equal(batched[3], single[0])

    def test_slab_statistics(self, rng):
        x = Tensor((rng.standard_normal((2, 4, 4, 4)) * 2 - 1).astype(np.float32))
        g = Tensor(np.ones(4, dtype=np.float32))
        b = Tensor(np.zeros(4, dtype=np.float32))
        out = T.group_norm(x, 2, g, b).data.reshape(2, 2, 2, 4, 4)
        np.testing.assert_allclose(out.mean(axis=(2, 3, 4)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(2, 3, 4)), 1.0, atol=1e-4)

    def test_indivisible_groups_rejected(self):
        x = Tensor(np.zeros((1, 6, 2, 2), dtype=np.float32))
        g = Tensor(np.ones(6, dtype=np.float32))
        b = Tensor(np.zeros(6, dtype=np.float32))
        with pytest.raises(ConfigError):
            T.group_norm(x, 4, g, b)


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor(np.zeros(1, dtype=np.float32))).data[0] == 0.0

    def test_asymptote(self):
        out = T.gelu(Tensor(np.array([10.0], dtype=np.float32))).data[0]
        assert out == pytest.approx(10.0, abs=1e-4)

    def test_value_at_one(self):
        # oracle: x * Phi(x) at x=1 with the high-precision normal CDF
        expected = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        assert expected == pytest.approx(0.841345, abs=1e-6)
        out = T.gelu(Tensor(np.array([1.0], dtype=np.float32))).data[0]
        assert out == pytest.approx(expected, abs=1e-5)


class TestBilinearUpsample:
    def test_constant(self):
        x = Tensor(np.full((1, 2, 3, 3), 2.5, dtype=np.float32))
        out = T.bilinear_upsample2x(x).data
        assert out.shape == (1, 2, 6, 6)
        np.testing.assert_allclose(out, 2.5, rtol=1e-6)

    def test_single_pixel(self):
        x = Tensor(np.full((1, 1, 1, 1), 0.7, dtype=np.float32))
        out = T.bilinear_upsample2x(x).data
        np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), np.float32(0.7)))

    def test_2x2_against_index_arithmetic_oracle(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]], dtype=np.float32)

        def oracle(i, j):
            def axis(pos, size):
                src = max((pos + 0.5) / 2.0 - 0.5, 0.0)
                i0 = int(math.floor(src))
                i1 = min(i0 + 1, size - 1)
                return i0, i1, src - i0

            r0, r1, tr = axis(i, 2)
            c0, c1, tc = axis(j, 2)
            top = (1 - tc) * x[r0, c0] + tc * x[r0, c1]
            bot = (1 - tc) * x[r1, c0] + tc * x[r1, c1]
            return (1 - tr) * top + tr * bot

        got = T.bilinear_upsample2x(Tensor(x[None, None])).data[0, 0]
        want = np.array([[oracle(i, j) for j in range(4)] for i in range(4)], dtype=np.float32)
        np.testing.assert_array_equal(got, want)


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4)).astype(np.float32)
        out = T.linear(Tensor(x), Tensor(np.eye(4, dtype=np.float32)),
                       Tensor(np.zeros(4, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight_broadcasts_bias(self, rng):
        x = rng.standard_normal((3, 4)).astype(np.float32)
        b = np.array([1.0, 2.0], dtype=np.float32)
        out = T.linear(Tensor(x), Tensor(np.zeros((2, 4), dtype=np.float32)), Tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)))

    def test_against_triple_loop_matmul(self, rng):
        x = rng.standard_normal((3, 4)).astype(np.float32)
        w = rng.standard_normal((5, 4)).astype(np.float32)
        b = rng.standard_normal(5).astype(np.float32)
        want = np.zeros((3, 5))
        for i in range(3):
            for o in range(5):
                acc = float(b[o])
                for k in range(4):
                    acc += float(x[i, k]) * float(w[o, k])
                want[i, o] = acc
        got = T.linear(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.linear(Tensor(np.zeros((2, 3), dtype=np.float32)),
                     Tensor(np.zeros((4, 5), dtype=np.float32)))


class TestIngestion:
    def test_nan_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, np.nan]))

    def test_inf_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([np.inf]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_conv_im2col_path_equals_direct(seed_val):
    rng = np.random.default_rng(seed_val)
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    x = rng.standard_normal((1, 2, int(rng.integers(k, 7)), int(rng.integers(k, 7)))).astype(np.float32)
    w = rng.standard_normal((2, 2, k, k)).astype(np.float32)
    got = T.conv2d(Tensor(x), Tensor(w), None, stride, padding).data
    want = direct_conv2d(x, w, None, stride, padding)
    np.testing.assert_allclose(got, want, atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1, 2, 4]))
def test_norm_statistics_property(seed_val, groups):
    rng = np.random.default_rng(seed_val)
    x = Tensor((rng.standard_normal((2, 4, 4, 4)) * 5).astype(np.float32))
    g = Tensor(np.ones(4, dtype=np.float32))
    b = Tensor(np.zeros(4, dtype=np.float32))
    out = T.group_norm(x, groups, g, b).data.reshape(2, groups, -1)
    np.testing.assert_allclose(out.mean(axis=2), 0.0, atol=1e-4)
    np.testing.assert_allclose(out.var(axis=2), 1.0, atol=1e-3)
