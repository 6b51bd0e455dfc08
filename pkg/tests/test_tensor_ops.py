import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sonoseg import config
from sonoseg import tensor as T
from sonoseg.tensor import ConvWeights, ShapeError, Tensor4


def t4(arr, dtype=np.float64):
    return Tensor4(np.asarray(arr, dtype=dtype))


def identity_conv1x1(c, dtype=np.float64):
    k = np.zeros((c, c, 1, 1), dtype=dtype)
    for i in range(c):
        k[i, i, 0, 0] = 1.0
    return ConvWeights(Tensor4(k), Tensor4(np.zeros((1, c, 1, 1), dtype=dtype)))


class TestConv:
    def test_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = t4(rng.standard_normal((2, 3, 4, 5)))
        out = T.conv(x, identity_conv1x1(3))
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_1x1_sums_channels(self):
        x = t4(np.zeros((1, 2, 1, 1)))
        x.data[0, 0, 0, 0] = 3.0
        x.data[0, 1, 0, 0] = 4.0
        w = ConvWeights(t4(np.ones((1, 2, 1, 1))), t4(np.zeros((1, 1, 1, 1))))
        out = T.conv(x, w)
        assert out.data[0, 0, 0, 0] == 7.0

    def test_3x3_ones_on_ones(self):
        x = t4(np.ones((1, 1, 3, 3)))
        w = ConvWeights(t4(np.ones((1, 1, 3, 3))), t4(np.zeros((1, 1, 1, 1))))
        out = T.conv(x, w).data[0, 0]
        assert out[1, 1] == 9.0
        for i, j in ((0, 0), (0, 2), (2, 0), (2, 2)):
            assert out[i, j] == 4.0

    def test_stride2_output_dims(self):
        x = t4(np.zeros((1, 1, 6, 6)))
        w = ConvWeights(t4(np.ones((2, 1, 3, 3))), t4(np.zeros((1, 2, 1, 1))))
        assert T.conv(x, w, stride=2).dims == (1, 2, 3, 3)

    def test_shape_error_mentions_both_shapes(self):
        x = t4(np.zeros((1, 3, 4, 4)))
        w = ConvWeights(t4(np.ones((1, 2, 1, 1))), t4(np.zeros((1, 1, 1, 1))))
        with pytest.raises(ShapeError) as exc:
            T.conv(x, w)
        assert "(1, 3, 4, 4)" in str(exc.value) and "(1, 2, 1, 1)" in str(exc.value)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        x = t4(rng.standard_normal((1, 2, 5, 5)))
        y = t4(rng.standard_normal((1, 2, 5, 5)))
        w = ConvWeights.create(3, 2, 3, rng, np.float64)
        w.bias.data[:] = 0.0
        a, b = 1.7, -0.3
        lhs = T.conv(t4(a * x.data + b * y.data), w).data
        rhs = a * T.conv(x, w).data + b * T.conv(y, w).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-5)


class TestElementwise:
    def test_relu_example(self):
        out = T.relu(t4(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)))
        np.testing.assert_array_equal(out.data.ravel(), [0.0, 0.0, 2.0])

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=32))
    @settings(max_examples=50, deadline=None)
    def test_relu_idempotent(self, vals):
        x = t4(np.array(vals).reshape(1, 1, 1, -1))
        once = T.relu(x).data
        twice = T.relu(T.relu(x)).data
        np.testing.assert_array_equal(once, twice)

    def test_softmax_uniform(self):
        out = T.softmax_channels(t4(np.zeros((1, 5, 1, 1))))
        np.testing.assert_allclose(out.data.ravel(), 0.2)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_softmax_sums_to_one(self, seed):
        rng = np.random.default_rng(seed)
        x = t4(rng.standard_normal((2, 4, 3, 3)))
        s = T.softmax_channels(x).data.sum(axis=1)
        np.testing.assert_allclose(s, 1.0, atol=1e-6)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_checked_mode_rejects_nonfinite(self):
        assert config.checked_mode()
        x = t4(np.array([[[[1e308]]]]))
        with pytest.raises(T.NumericError):
            T.scale(x, 1e308)


class TestSpatial:
    def test_upsample_example(self):
        x = t4(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2],
                             [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float64)
        np.testing.assert_array_equal(T.upsample2x_nearest(x).data[0, 0], expected)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_upsample_avgpool_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        x = t4(rng.standard_normal((1, 2, 4, 4)))
        back = T.avgpool2x2(T.upsample2x_nearest(x)).data
        np.testing.assert_array_equal(back, x.data)

    def test_maxpool(self):
        x = t4(np.array([[1, 2, 5, 1], [3, 4, 0, 0],
                         [0, 0, 7, 8], [0, 1, 9, 2]], dtype=np.float64
                        ).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(T.maxpool2x2(x).data[0, 0],
                                      [[4, 5], [1, 9]])

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_concat_slice_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        a = t4(rng.standard_normal((1, 2, 3, 3)))
        b = t4(rng.standard_normal((1, 3, 3, 3)))
        cat = T.concat_channels([a, b])
        np.testing.assert_array_equal(T.slice_channels(cat, 0, 2).data, a.data)
        np.testing.assert_array_equal(T.slice_channels(cat, 2, 5).data, b.data)

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(t4(np.zeros((1, 1, 2, 2))), t4(np.zeros((1, 2, 2, 2))))


class TestChannelNorm:
    def test_3_4_5(self):
        x = t4(np.array([3.0, 4.0]).reshape(1, 2, 1, 1))
        g = t4(np.ones((1, 2, 1, 1)))
        out = T.channel_l2norm_scale(x, g).data.ravel()
        np.testing.assert_allclose(out, [0.6, 0.8], atol=1e-9)

    def test_zero_vector_no_nan(self):
        x = t4(np.zeros((1, 2, 2, 2)))
        g = t4(np.ones((1, 2, 1, 1)))
        out = T.channel_l2norm_scale(x, g).data
        np.testing.assert_array_equal(out, 0.0)

    def test_gamma_scaling(self):
        x = t4(np.array([3.0, 4.0]).reshape(1, 2, 1, 1))
        g = t4(np.full((1, 2, 1, 1), 2.0))
        out = T.channel_l2norm_scale(x, g).data.ravel()
        np.testing.assert_allclose(out, [1.2, 1.6], atol=1e-9)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_unit_norm(self, seed):
        rng = np.random.default_rng(seed)
        x = t4(rng.uniform(0.5, 2.0, size=(1, 3, 4, 4)))
        g = t4(np.ones((1, 3, 1, 1)))
        norms = np.sqrt((T.channel_l2norm_scale(x, g).data ** 2).sum(axis=1))
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)


class TestGradCheck:
    def test_relu_away_from_zero(self):
        rng = np.random.default_rng(7)
        d = rng.uniform(0.01, 1.0, size=(1, 2, 3, 3)) * rng.choice(
            [-1.0, 1.0], size=(1, 2, 3, 3))
        x = t4(d)
        w = rng.standard_normal(x.dims)
        rep = T.grad_check(lambda t: T.sum_all(T.mul_const(T.relu(t), w)), [x])
        assert rep["passed"] and rep["worst"] <= 1e-6

    def test_conv1x1_random(self):
        rng = np.random.default_rng(8)
        x = t4(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
        w = ConvWeights.create(2, 3, 1, rng, np.float64)
        red = rng.standard_normal((2, 2, 4, 4))
        rep = T.grad_check(
            lambda u, k, b: T.sum_all(T.mul_const(
                T.conv(u, ConvWeights(k, b)), red)),
            [x, w.kernel, w.bias])
        assert rep["passed"]

    def test_softmax_ce_composite(self):
        from sonoseg.losses import classification_loss
        rng = np.random.default_rng(9)
        x = t4(rng.uniform(-1, 1, size=(3, 6, 1, 1)))
        tc = rng.integers(0, 6, size=3)
        rep = T.grad_check(lambda u: classification_loss(u, tc), [x])
        assert rep["passed"]

    def test_nonfinite_gradient_is_hard_failure(self):
        x = t4(np.ones((1, 1, 1, 1)))

        def bad(t):
            out = T.scale(t, 1.0)
            orig = out.node.vjp
            out.node.vjp = lambda g: (orig(g)[0] * np.nan,)
            return T.sum_all(out)

        with pytest.raises(T.NumericError):
            T.grad_check(bad, [x], name="bad_op")


class TestArchiveFormat:
    def test_roundtrip_and_layout(self, tmp_path):
        from sonoseg.archive import load_tensor, save_tensor
        rng = np.random.default_rng(3)
        arr = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
        p = tmp_path / "t.tns4"
        save_tensor(p, arr)
        raw = p.read_bytes()
        assert raw[:4] == b"TNS4"
        assert raw[4] == 0  # f32 tag
        assert np.frombuffer(raw[5:21], dtype="<u4").tolist() == [2, 3, 4, 5]
        np.testing.assert_array_equal(load_tensor(p), arr)

    def test_f64_tag(self, tmp_path):
        from sonoseg.archive import load_tensor, save_tensor
        arr = np.ones((1, 1, 1, 2), dtype=np.float64)
        p = tmp_path / "t.tns4"
        save_tensor(p, arr)
        assert p.read_bytes()[4] == 1
        assert load_tensor(p).dtype == np.float64
