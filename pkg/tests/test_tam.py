"""Attention-fusion forward pass against hand-rolled numpy evaluations."""

import numpy as np
import pytest
from scipy.special import expit

from bpdo import tam
from bpdo.autodiff import LinearParams, Tensor, grad_check
from bpdo.errors import InvalidInputError


def manual_conv_same(img, kernel, bias, flip=False):
    k = kernel[::-1, ::-1] if flip else kernel
    kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img, ((ph, ph), (pw, pw)))
    out = np.zeros_like(img)
    for y in range(img.shape[0]):
        for x in range(img.shape[1]):
            out[y, x] = (padded[y : y + kh, x : x + kw] * k).sum()
    return out + bias


def manual_forward(rv, p):
    """Second, independent implementation of the whole forward pass."""
    c = rv.shape[0]
    pooled = rv.mean(axis=(1, 2))
    h = np.maximum(p.ch_conv1.weight @ pooled + p.ch_conv1.bias, 0)
    w_c = expit(p.ch_conv2.weight @ h + p.ch_conv2.bias)

    pos_pool = rv.mean(axis=0)
    conv = np.maximum(manual_conv_same(pos_pool, p.pos_conv.kernel, p.pos_conv.bias), 0)
    w_p = expit(manual_conv_same(conv, p.pos_deconv.kernel, p.pos_deconv.bias, flip=True))

    cat = np.concatenate([rv * w_c[:, None, None], rv * w_p[None], rv], axis=0)
    flat = cat.reshape(3 * c, -1)
    f_tam = (p.fuse_conv.weight @ flat + p.fuse_conv.bias[:, None]).reshape(rv.shape)
    raw = (p.head_conv.weight @ f_tam.reshape(c, -1) + p.head_conv.bias[:, None])
    raw = raw.reshape(4, rv.shape[1], rv.shape[2])
    pred = np.concatenate([expit(raw[0:2]), np.tanh(raw[2:4])], axis=0)
    return w_c, w_p, f_tam, pred


@pytest.fixture
def setup():
    rng = np.random.default_rng(21)
    params = tam.init_tam_params(6, rng=rng, dtype=np.float64)
    rv = rng.normal(size=(6, 9, 11))
    return params, rv


class TestChannelAttention:
    def test_zero_input_zero_bias_gives_half(self, setup):
        params, _ = setup
        out = tam.channel_attention(np.zeros((6, 5, 5)), params)
        np.testing.assert_allclose(out.data, 0.5, atol=1e-12)

    def test_bounded_open_interval(self, setup):
        params, rv = setup
        out = tam.channel_attention(rv * 50, params).data
        assert np.all(out > 0) and np.all(out < 1)

    def test_matches_manual(self, setup):
        params, rv = setup
        got = tam.channel_attention(rv, params).data
        want, _, _, _ = manual_forward(rv, params)
        np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_channel_mismatch(self, setup):
        params, _ = setup
        with pytest.raises(InvalidInputError):
            tam.channel_attention(np.zeros((5, 4, 4)), params)


class TestPositionAttention:
    def test_zero_input_gives_half_map(self, setup):
        params, _ = setup
        out = tam.position_attention(np.zeros((6, 7, 7)), params).data
        np.testing.assert_allclose(out, 0.5, atol=1e-12)

    def test_uniform_input_uniform_interior(self, setup):
        params, _ = setup
        out = tam.position_attention(np.full((6, 12, 12), 1.7), params).data
        interior = out[3:-3, 3:-3]
        np.testing.assert_allclose(interior, interior[0, 0], atol=1e-9)

    def test_matches_manual(self, setup):
        params, rv = setup
        got = tam.position_attention(rv, params).data
        _, want, _, _ = manual_forward(rv, params)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)

    def test_kernel_too_large(self, setup):
        params, _ = setup
        with pytest.raises(InvalidInputError):
            tam.position_attention(np.zeros((6, 2, 2)), params)


class TestTamForward:
    def test_shape_contract(self, setup):
        params, rv = setup
        f_tam, pred = tam.tam_forward(rv, params)
        assert f_tam.shape == rv.shape
        assert pred.shape == (4, rv.shape[1], rv.shape[2])

    def test_degenerate_fuse_is_linear_in_input(self):
        # with both gates forced to one and an averaging fuse, the fused
        # features reduce to the input itself
        c = 4
        fuse = LinearParams(
            np.concatenate([np.eye(c) / 3.0] * 3, axis=1), np.zeros(c)
        )
        rng = np.random.default_rng(3)
        rv = rng.normal(size=(c, 6, 6))
        out = tam.fuse_features(rv, np.ones(c), np.ones((6, 6)), fuse).data
        np.testing.assert_allclose(out, rv, rtol=1e-10, atol=1e-12)

    def test_matches_manual(self, setup):
        params, rv = setup
        f_tam, pred = tam.tam_forward(rv, params)
        _, _, want_f, want_pred = manual_forward(rv, params)
        np.testing.assert_allclose(f_tam.data, want_f, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(pred.data, want_pred, rtol=1e-9, atol=1e-12)

    def test_prediction_ranges(self, setup):
        params, rv = setup
        _, pred = tam.tam_forward(rv * 10, params)
        assert np.all(pred.data[0:2] > 0) and np.all(pred.data[0:2] < 1)
        assert np.all(pred.data[2:4] > -1) and np.all(pred.data[2:4] < 1)

    def test_channel_scaling_keeps_everything_finite(self, setup):
        params, rv = setup
        doubled = rv.copy()
        doubled[2] *= 2.0
        f1, p1 = tam.tam_forward(rv, params)
        f2, p2 = tam.tam_forward(doubled, params)
        assert f1.shape == f2.shape and p1.shape == p2.shape
        assert np.all(np.isfinite(f2.data)) and np.all(np.isfinite(p2.data))
        assert not np.allclose(p1.data, p2.data)

    def test_gradcheck_scalar_readout(self, setup):
        params, rv = setup
        from bpdo import pipeline

        lifted = pipeline.lift_params(params, dtype=np.float64, requires_grad=True)
        leaves = [t for _n, t in tam.tam_leaves(lifted)]
        rv_t = Tensor(rv, requires_grad=True)
        proj = np.random.default_rng(8).normal(size=(4, 9, 11))

        def fn():
            _f, pred = tam.tam_forward(rv_t, lifted)
            return (pred * proj).sum()

        rep = grad_check(fn, leaves + [rv_t], op_name="tam scalar", tol=1e-4)
        assert rep.passed, rep.line()
