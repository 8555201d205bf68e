"""Tensor-field ops, the linear layer, activations, and gradient checking."""

import numpy as np
import pytest

from bpdo import autodiff as ad
from bpdo.autodiff import LinearParams, Tensor
from bpdo.errors import InvalidInputError
from bpdo.fields import TensorField


def direct_bilinear(field, x, y):
    """Independent scalar-loop evaluation of the bilinear formula."""
    c, h, w = field.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    out = np.zeros(c)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w:
                out += wx * wy * field[:, yy, xx]
    return out


class TestBilinearSample:
    def test_integer_coordinate_identity(self):
        field = np.array([[[0.0, 1.0], [2.0, 3.0]]])
        assert ad.bilinear_sample(field, np.array([0.0, 0.0])).data[0] == 0.0
        assert ad.bilinear_sample(field, np.array([1.0, 1.0])).data[0] == 3.0

    def test_center_is_mean_of_corners(self):
        field = np.array([[[0.0, 1.0], [2.0, 3.0]]])
        assert ad.bilinear_sample(field, np.array([0.5, 0.5])).data[0] == pytest.approx(1.5)

    def test_matches_direct_evaluation(self):
        rng = np.random.default_rng(42)
        field = rng.normal(size=(3, 8, 8))
        got = ad.bilinear_sample(field, np.array([2.37, 5.81])).data
        expected = direct_bilinear(field, 2.37, 5.81)
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_out_of_bounds_zero_padding(self):
        field = np.ones((2, 4, 4))
        far = ad.bilinear_sample(field, np.array([100.0, 100.0])).data
        np.testing.assert_array_equal(far, np.zeros(2))
        # half a cell outside: half weight remains
        edge = ad.bilinear_sample(field, np.array([-0.5, 1.0])).data
        np.testing.assert_allclose(edge, np.full(2, 0.5), rtol=1e-12)

    def test_linear_in_field_values(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(2, 6, 6))
        g = rng.normal(size=(2, 6, 6))
        pts = rng.uniform(-1, 6, size=(40, 2))
        a, b = 0.7, -1.3
        lhs = ad.bilinear_sample(a * f + b * g, pts).data
        rhs = a * ad.bilinear_sample(f, pts).data + b * ad.bilinear_sample(g, pts).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_integer_coordinates_reproduce_grid(self):
        rng = np.random.default_rng(3)
        f = rng.normal(size=(2, 5, 7))
        for y in range(5):
            for x in range(7):
                got = ad.bilinear_sample(f, np.array([float(x), float(y)])).data
                np.testing.assert_array_equal(got, f[:, y, x])

    def test_accepts_tensorfield(self):
        tf = TensorField(np.ones((1, 3, 3)))
        assert ad.bilinear_sample(tf, np.array([1.0, 1.0])).data[0] == 1.0

    def test_empty_field_rejected(self):
        with pytest.raises(InvalidInputError):
            ad.bilinear_sample(np.ones((1, 2)), np.array([0.0, 0.0]))

    def test_gradients(self):
        rng = np.random.default_rng(7)
        f = Tensor(rng.normal(size=(3, 6, 7)), requires_grad=True)
        p = Tensor(rng.uniform(1.2, 4.7, size=(5, 2)), requires_grad=True)
        rep = ad.grad_check(
            lambda: (ad.bilinear_sample(f, p) ** 2).sum(),
            [f, p],
            op_name="bilinear",
        )
        assert rep.passed, rep.line()


class TestLinearApply:
    def test_identity(self):
        lp = LinearParams(np.eye(3), np.zeros(3))
        np.testing.assert_array_equal(
            ad.linear_apply(lp, np.array([1.0, 2.0, 3.0])).data, [1.0, 2.0, 3.0]
        )

    def test_zero_weight_gives_bias(self):
        lp = LinearParams(np.zeros((1, 4)), np.array([5.0]))
        np.testing.assert_array_equal(
            ad.linear_apply(lp, np.array([9.0, -2.0, 0.1, 3.0])).data, [5.0]
        )

    def test_matches_matrix_multiply(self):
        rng = np.random.default_rng(11)
        w = rng.normal(size=(2, 4))
        b = rng.normal(size=2)
        x = rng.normal(size=4)
        got = ad.linear_apply(LinearParams(w, b), x).data
        np.testing.assert_allclose(got, w @ x + b, rtol=1e-12)

    def test_batched_input(self):
        rng = np.random.default_rng(12)
        w, b = rng.normal(size=(3, 5)), rng.normal(size=3)
        x = rng.normal(size=(7, 5))
        got = ad.linear_apply(LinearParams(w, b), x).data
        np.testing.assert_allclose(got, x @ w.T + b, rtol=1e-12)

    def test_dim_mismatch(self):
        lp = LinearParams(np.eye(3), np.zeros(3))
        with pytest.raises(InvalidInputError):
            ad.linear_apply(lp, np.zeros(4))

    def test_bad_params(self):
        with pytest.raises(InvalidInputError):
            LinearParams(np.zeros((2, 3)), np.zeros(3))


class TestActivation:
    def test_relu(self):
        np.testing.assert_array_equal(
            ad.activation("relu", np.array([-1.0, 2.0])).data, [0.0, 2.0]
        )

    def test_sigmoid_at_zero(self):
        assert ad.activation("sigmoid", np.array([0.0])).data[0] == pytest.approx(0.5)

    def test_softmax_symmetry(self):
        got = ad.activation("softmax", np.array([1.0, 1.0, 1.0])).data
        np.testing.assert_allclose(got, np.full(3, 1 / 3), atol=1e-12)

    def test_softmax_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            x = rng.normal(scale=5, size=rng.integers(1, 9))
            y = ad.activation("softmax", x).data
            assert abs(y.sum() - 1.0) <= 1e-9
            y2 = ad.activation("softmax", x + 17.3).data
            np.testing.assert_allclose(y, y2, atol=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            ad.activation("relu", np.array([]))

    def test_unknown_kind(self):
        with pytest.raises(InvalidInputError):
            ad.activation("swish", np.array([1.0]))


class TestGradCheck:
    def test_square_function(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        rep = ad.grad_check(lambda: (x * x).sum(), [x], op_name="square")
        assert rep.passed
        x.zero_grad()
        out = (x * x).sum()
        out.backward()
        assert x.grad[0] == pytest.approx(6.0)

    def test_linear_sigmoid_chain(self):
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        x = Tensor(rng.normal(size=4), requires_grad=True)

        def fn():
            return (ad.sigmoid(ad.linear_apply(LinearParams(w, b), x)) ** 2).sum()

        rep = ad.grad_check(fn, [w, b, x], op_name="linear+sigmoid")
        assert rep.passed and rep.max_rel_err <= 1e-4

    def test_report_invariant(self):
        x = Tensor(np.array([1.5]), requires_grad=True)
        rep = ad.grad_check(lambda: (x ** 3).sum(), [x])
        assert rep.passed == (
            rep.max_rel_err <= rep.tol or rep.max_abs_err <= rep.abs_floor
        )
        assert rep.n_params_checked == 1

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(InvalidInputError):
            ad.grad_check(lambda: x * 2.0, [x])

    def test_float32_rejected(self):
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(InvalidInputError):
            ad.grad_check(lambda: (x * x).sum(), [x])


class TestOps:
    def test_conv2d_same_shape_and_value(self):
        img = np.zeros((5, 5))
        img[2, 2] = 1.0
        ker = np.arange(9, dtype=float).reshape(3, 3)
        out = ad.conv2d_same(img, ker).data
        assert out.shape == (5, 5)
        # correlation: out[y, x] = sum_k ker[i, j] * img[y+i-1, x+j-1]
        assert out[2, 2] == ker[1, 1]
        assert out[1, 1] == ker[2, 2]
        assert out[3, 3] == ker[0, 0]

    def test_conv_flip_is_transpose(self):
        rng = np.random.default_rng(1)
        ker = rng.normal(size=(3, 3))
        img = rng.normal(size=(6, 6))
        # <conv(x), y> == <x, conv_T(y)> for same zero padding
        y = rng.normal(size=(6, 6))
        lhs = float((ad.conv2d_same(img, ker).data * y).sum())
        rhs = float((img * ad.conv2d_same(y, ker, flip=True).data).sum())
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_kernel_larger_than_field(self):
        with pytest.raises(InvalidInputError):
            ad.conv2d_same(np.ones((2, 2)), np.ones((3, 3)))

    def test_grouped_linear_matches_loop(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(5, 3, 2, 4))
        w = rng.normal(size=(3, 6, 4))
        b = rng.normal(size=(3, 6))
        got = ad.grouped_linear(x, w, b).data
        want = np.empty((5, 3, 2, 6))
        for m in range(3):
            want[:, m] = x[:, m] @ w[m].T + b[m]
        np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_concat_and_getitem_gradients(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4)), requires_grad=True)

        def fn():
            cat = ad.concat([a, b], axis=0)
            return (cat[1:4] ** 2).sum() + cat[0].sum()

        rep = ad.grad_check(fn, [a, b], op_name="concat+slice")
        assert rep.passed

    def test_broadcast_gradients(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=(3, 1, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
        rep = ad.grad_check(lambda: ((a * b) ** 2).mean(), [a, b], op_name="broadcast")
        assert rep.passed

    def test_finite_outputs_under_composition(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(scale=3, size=(4, 4)))
        y = ad.tanh(ad.exp(ad.clip(x, -2.0, 2.0)) / 3.0) + ad.sqrt(ad.relu(x) + 1.0)
        assert np.all(np.isfinite(y.data))


class TestTensorField:
    def test_rejects_nan(self):
        arr = np.ones((1, 2, 2))
        arr[0, 0, 0] = np.nan
        with pytest.raises(InvalidInputError):
            TensorField(arr)

    def test_rejects_wrong_rank(self):
        with pytest.raises(InvalidInputError):
            TensorField(np.ones((2, 2)))

    def test_shape_accessors(self):
        tf = TensorField.zeros(3, 4, 5)
        assert (tf.channels, tf.rows, tf.cols) == (3, 4, 5)
        assert tf.data.shape == (3, 4, 5)
