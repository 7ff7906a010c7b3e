import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ditehrnet import tensor as T
from ditehrnet.tensor import ConvSpec, ShapeError


def random_conv_case(rng):
    groups = int(rng.choice([1, 2, 3]))
    cin = groups * int(rng.integers(1, 4))
    cout = groups * int(rng.integers(1, 4))
    k = int(rng.choice([1, 2, 3, 5]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k // 2 + 2))
    h, w = int(rng.integers(k, 9)), int(rng.integers(k, 9))
    spec = ConvSpec(cin, cout, (k, k), stride, pad, groups)
    x = rng.standard_normal((int(rng.integers(1, 3)), cin, h, w))
    wt = rng.standard_normal(spec.weight_shape)
    return x, wt, spec


class TestConv:
    def test_matches_loop_oracle_on_random_cases(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(120):
            x, w, spec = random_conv_case(rng)
            ref = T.naive_conv_oracle(x, w, spec)
            got = T.conv2d(x, w, spec)
            worst = max(worst, np.abs(got - ref).max() / max(np.abs(ref).max(), 1e-300))
        assert worst <= 1e-12

    @pytest.mark.parametrize("k,groups", [(1, 1), (3, 4), (5, 4), (3, 1)])
    def test_fast_paths(self, rng, k, groups):
        spec = ConvSpec(4, 4, (k, k), 1, k // 2, groups)
        x = rng.standard_normal((2, 4, 6, 5))
        w = rng.standard_normal(spec.weight_shape)
        np.testing.assert_allclose(T.conv2d(x, w, spec), T.naive_conv_oracle(x, w, spec), rtol=1e-12, atol=1e-12)

    def test_bias_is_added_per_channel(self, rng):
        spec = ConvSpec(2, 3, (1, 1))
        x = rng.standard_normal((1, 2, 3, 3))
        w = rng.standard_normal(spec.weight_shape)
        b = np.array([1.0, -2.0, 3.0])
        np.testing.assert_allclose(T.conv2d(x, w, spec, b) - T.conv2d(x, w, spec), b.reshape(1, 3, 1, 1) * np.ones((1, 3, 3, 3)))

    def test_shape_errors(self, rng):
        spec = ConvSpec(4, 4, (3, 3), 1, 1, 2)
        with pytest.raises(ShapeError) as e:
            T.conv2d(rng.standard_normal((1, 3, 5, 5)), rng.standard_normal(spec.weight_shape), spec)
        assert e.value.dim == "channels"
        with pytest.raises(ShapeError):
            T.conv2d(rng.standard_normal((1, 4, 5, 5)), rng.standard_normal((4, 4, 3, 3)), spec)
        with pytest.raises(ShapeError):
            T.conv2d(rng.standard_normal((4, 5, 5)), rng.standard_normal(spec.weight_shape), spec)
        with pytest.raises(ShapeError):
            ConvSpec(3, 4, (3, 3), groups=2)

    def test_output_size_and_macs(self):
        spec = ConvSpec(8, 16, (3, 3), 2, 1)
        assert spec.output_size(64, 48) == (32, 24)
        assert spec.macs(32, 24) == 32 * 24 * 16 * 8 * 9
        dw = ConvSpec(8, 8, (3, 3), 1, 1, 8)
        assert dw.depthwise and dw.macs(4, 4) == 4 * 4 * 8 * 9
        with pytest.raises(ShapeError):
            ConvSpec(1, 1, (5, 5)).output_size(3, 3)


class TestChannelOps:
    @given(st.integers(1, 6), st.integers(1, 6))
    def test_shuffle_is_a_bijection_inverted_by_transposed_shuffle(self, groups, per):
        c = groups * per
        perm = T.shuffle_permutation(c, groups)
        assert sorted(perm.tolist()) == list(range(c))
        x = np.arange(c, dtype=float).reshape(1, c, 1, 1)
        y = T.channel_shuffle(x, groups)
        np.testing.assert_array_equal(T.channel_shuffle(y, per), x)

    def test_shuffle_one_group_is_identity(self, rng):
        x = rng.standard_normal((2, 6, 3, 3))
        np.testing.assert_array_equal(T.channel_shuffle(x, 1), x)

    def test_shuffle_two_groups_interleaves(self):
        x = np.arange(6, dtype=float).reshape(1, 6, 1, 1)
        assert T.channel_shuffle(x, 2).ravel().tolist() == [0, 3, 1, 4, 2, 5]

    def test_split_concat_roundtrip(self, rng):
        x = rng.standard_normal((1, 7, 2, 2))
        parts = T.channel_split(x, [2, 5])
        assert [p.shape[1] for p in parts] == [2, 5]
        np.testing.assert_array_equal(T.channel_concat(parts), x)

    def test_split_errors(self, rng):
        x = rng.standard_normal((1, 5, 2, 2))
        with pytest.raises(ShapeError):
            T.channel_split(x, 2)
        with pytest.raises(ShapeError):
            T.channel_split(x, [2, 2])
        with pytest.raises(ShapeError):
            T.channel_concat([x, rng.standard_normal((1, 5, 3, 2))])


class TestPoolingAndResampling:
    @given(st.integers(1, 12), st.data())
    def test_bins_cover_input(self, n_in, data):
        n_out = data.draw(st.integers(1, n_in))
        bins = T.pool_bins(n_in, n_out)
        assert bins[0][0] == 0 and bins[-1][1] == n_in
        assert all(lo < hi for lo, hi in bins)
        assert all(bins[i + 1][0] <= bins[i][1] for i in range(n_out - 1))

    def test_adaptive_pool_matches_loop(self, rng):
        x = rng.standard_normal((2, 3, 7, 5))
        got = T.adaptive_avg_pool(x, (3, 2))
        for i, (a, b) in enumerate(T.pool_bins(7, 3)):
            for j, (c, d) in enumerate(T.pool_bins(5, 2)):
                np.testing.assert_allclose(got[:, :, i, j], x[:, :, a:b, c:d].mean(axis=(2, 3)))
        np.testing.assert_allclose(T.adaptive_avg_pool(x, (1, 1)), T.global_avg_pool(x))

    def test_pool_rejects_upsizing(self, rng):
        with pytest.raises(ShapeError) as e:
            T.adaptive_avg_pool(rng.standard_normal((1, 1, 4, 4)), (5, 2))
        assert e.value.dim == "height"

    def test_bilinear_upsample(self, rng):
        x = rng.standard_normal((1, 2, 3, 4))
        np.testing.assert_array_equal(T.bilinear_upsample(x, (3, 4)), x)
        c = np.full((1, 1, 3, 3), 2.5)
        np.testing.assert_allclose(T.bilinear_upsample(c, (6, 6)), 2.5)
        y = T.bilinear_upsample(x, (6, 8))
        assert y.shape == (1, 2, 6, 8)
        assert y.min() >= x.min() - 1e-12 and y.max() <= x.max() + 1e-12
        with pytest.raises(ShapeError):
            T.bilinear_upsample(x, (2, 4))

    def test_interp_rows_sum_to_one(self):
        m = T.interp_matrix(5, 11)
        np.testing.assert_allclose(m.sum(axis=1), 1.0)


class TestPointwise:
    def test_sigmoid_is_stable_and_symmetric(self):
        x = np.array([-1000.0, -10.0, 0.0, 10.0, 1000.0])
        s = T.sigmoid(x)
        assert np.all(np.isfinite(s)) and s[2] == 0.5
        np.testing.assert_allclose(s + T.sigmoid(-x), 1.0)

    def test_softmax_over_axes(self, rng):
        x = rng.standard_normal((2, 1, 3, 4)) * 50
        p = T.softmax(x, axis=(2, 3))
        np.testing.assert_allclose(p.sum(axis=(2, 3)), 1.0)
        with pytest.raises(ShapeError):
            T.softmax(x, axis=5)

    def test_fully_connected_and_matmul(self, rng):
        w, b, x = rng.standard_normal((3, 4)), rng.standard_normal(3), rng.standard_normal((2, 4))
        np.testing.assert_allclose(T.fully_connected(x, w, b), x @ w.T + b)
        with pytest.raises(ShapeError):
            T.fully_connected(rng.standard_normal(5), w)
        with pytest.raises(ShapeError):
            T.matmul(w, w)

    def test_batchnorm(self, rng):
        x = rng.standard_normal((2, 3, 2, 2))
        y = T.batchnorm_inference(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=0.0)
        np.testing.assert_allclose(y, x)
        with pytest.raises(ValueError):
            T.batchnorm_inference(x, np.ones(3), np.zeros(3), np.zeros(3), -np.ones(3))
        with pytest.raises(ShapeError):
            T.batchnorm_inference(x, np.ones(2), np.zeros(3), np.zeros(3), np.ones(3))


class TestFixtures:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip(self, tmp_path, rng, dtype):
        x = rng.standard_normal((1, 2, 3, 4)).astype(dtype)
        p = tmp_path / "x.bin"
        T.save_fixture(p, x)
        assert p.stat().st_size == 16 + x.nbytes
        y = T.load_fixture(p)
        assert y.dtype == dtype
        np.testing.assert_array_equal(x, y)

    def test_corrupt_file(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\x01\x00\x00\x00" * 4 + b"\x00" * 3)
        with pytest.raises(ValueError):
            T.load_fixture(p)

    def test_as_tensor_rejects_empty_dims(self):
        with pytest.raises(ShapeError) as e:
            T.as_tensor(np.zeros((1, 0, 2, 2)))
        assert e.value.dim == "channels"


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conv_oracle_property(seed):
    x, w, spec = random_conv_case(np.random.default_rng(seed))
    np.testing.assert_allclose(T.conv2d(x, w, spec), T.naive_conv_oracle(x, w, spec), rtol=1e-12, atol=1e-12)
