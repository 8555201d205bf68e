"""Deformable-attention refinement: bounds, locality, independent oracle."""

import numpy as np
import pytest
from scipy.special import expit  # noqa: F401  (kept for parity with sibling tests)

from bpdo import dom
from bpdo.autodiff import Tensor
from bpdo.geometry import BoundaryPoints


def manual_bilinear(field, x, y):
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


def manual_attention(field, point, p):
    """Independent numpy evaluation of one point's attended feature."""
    q = manual_bilinear(field, *point)
    f_da = np.zeros(p.c_channels)
    heads = []
    for m in range(p.m_heads):
        raw = p.offset_head[m].weight @ q + p.offset_head[m].bias
        offs = np.tanh(raw).reshape(p.n_samples, 2) * p.r_max
        scores = np.array(
            [
                (p.qk_weight[m][n].weight @ q + p.qk_weight[m][n].bias).item()
                for n in range(p.n_samples)
            ]
        )
        e = np.exp(scores - scores.max())
        w = e / e.sum()
        head = np.zeros(p.d_v)
        for n in range(p.n_samples):
            v = p.value_proj[m].weight @ manual_bilinear(
                field, point[0] + offs[n, 0], point[1] + offs[n, 1]
            ) + p.value_proj[m].bias
            head += w[n] * v
        heads.append(head)
    f_da = p.head_out.weight @ np.concatenate(heads) + p.head_out.bias
    return f_da


def manual_step(field, pts, p):
    out = np.empty_like(pts)
    for i, point in enumerate(pts):
        f_da = manual_attention(field, point, p)
        h = np.maximum(p.update_hidden.weight @ f_da + p.update_hidden.bias, 0)
        delta = np.tanh(p.update_out.weight @ h + p.update_out.bias) * p.r_max
        out[i] = point + delta
    return out


@pytest.fixture
def setup():
    rng = np.random.default_rng(13)
    params = dom.init_dom_params(
        5, m_heads=3, n_samples=2, r_max=2.0, t_iters=3, hidden=7,
        rng=rng, dtype=np.float64,
    )
    params.update_out.weight[...] = rng.normal(0, 0.4, params.update_out.weight.shape)
    field = rng.normal(size=(5, 12, 14))
    return params, field


class TestPredictOffsets:
    def test_zero_head_gives_zero_offsets(self, setup):
        params, field = setup
        for oh in params.offset_head:
            oh.weight[...] = 0.0
            oh.bias[...] = 0.0
        offs = dom.predict_offsets(field, np.array([4.3, 5.1]), params)
        np.testing.assert_array_equal(offs.data, np.zeros((3, 2, 2)))

    def test_bounded_by_r_max(self, setup):
        params, field = setup
        rng = np.random.default_rng(5)
        for _ in range(20):
            pt = rng.uniform(0, 11, size=2)
            offs = dom.predict_offsets(field, pt, params).data
            assert np.abs(offs).max() <= params.r_max

    def test_matches_manual(self, setup):
        params, field = setup
        pt = np.array([3.7, 6.2])
        got = dom.predict_offsets(field, pt, params).data
        q = manual_bilinear(field, *pt)
        for m in range(params.m_heads):
            raw = params.offset_head[m].weight @ q + params.offset_head[m].bias
            want = np.tanh(raw).reshape(params.n_samples, 2) * params.r_max
            np.testing.assert_allclose(got[m], want, rtol=1e-10)


class TestDeformableAttention:
    def test_matches_manual(self, setup):
        params, field = setup
        pt = np.array([5.4, 7.8])
        got = dom.deformable_attention(field, pt, params).data
        want = manual_attention(field, pt, params)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)

    def test_single_sample_softmax_degenerates(self, setup):
        _, field = setup
        rng = np.random.default_rng(2)
        p1 = dom.init_dom_params(
            5, m_heads=2, n_samples=1, r_max=2.0, rng=rng, dtype=np.float64
        )
        pt = np.array([6.1, 5.5])
        got = dom.deformable_attention(field, pt, p1).data
        # with one sample the attention weight is exactly 1
        q = manual_bilinear(field, *pt)
        heads = []
        for m in range(2):
            off = np.tanh(p1.offset_head[m].weight @ q + p1.offset_head[m].bias)
            off = off.reshape(1, 2) * p1.r_max
            v = p1.value_proj[m].weight @ manual_bilinear(
                field, pt[0] + off[0, 0], pt[1] + off[0, 1]
            ) + p1.value_proj[m].bias
            heads.append(v)
        want = p1.head_out.weight @ np.concatenate(heads) + p1.head_out.bias
        np.testing.assert_allclose(got, want, rtol=1e-9)

    def test_constant_field_position_independent(self, setup):
        params, _ = setup
        const = np.full((5, 12, 14), 1.3)
        a = dom.deformable_attention(const, np.array([3.3, 4.4]), params).data
        b = dom.deformable_attention(const, np.array([8.8, 6.6]), params).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_locality_window(self, setup):
        params, field = setup
        pt = np.array([6.3, 5.6])
        full = dom.deformable_attention(field, pt, params).data
        # zero everything outside a (r_max + 2)-radius window around the point
        masked = np.zeros_like(field)
        r = int(np.ceil(params.r_max)) + 2
        y0, y1 = int(pt[1]) - r, int(pt[1]) + r + 1
        x0, x1 = int(pt[0]) - r, int(pt[0]) + r + 1
        masked[:, max(y0, 0) : y1, max(x0, 0) : x1] = field[
            :, max(y0, 0) : y1, max(x0, 0) : x1
        ]
        windowed = dom.deformable_attention(masked, pt, params).data
        np.testing.assert_array_equal(full, windowed)

    def test_attention_weights_are_probabilities(self, setup):
        params, field = setup
        from bpdo import autodiff as ad

        q = ad.bilinear_sample(Tensor(field), Tensor(np.array([[4.2, 5.1]])))
        merged = dom._cat_linear(
            [params.qk_weight[m][n] for m in range(params.m_heads) for n in range(params.n_samples)],
            q,
        )
        scores = ad.linear_apply(merged, q).reshape(1, params.m_heads, params.n_samples)
        w = ad.softmax(scores, axis=-1).data
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(w >= 0)


class TestDomStep:
    def test_zero_update_head_is_identity(self, setup):
        params, field = setup
        params.update_out.weight[...] = 0.0
        params.update_out.bias[...] = 0.0
        pts = BoundaryPoints(np.array([[3.0, 4.0], [5.5, 6.5], [2.2, 8.8], [7.0, 3.0]]))
        out = dom.dom_step(field, pts, params)
        np.testing.assert_array_equal(out.points, pts.points)

    def test_updates_bounded(self, setup):
        params, field = setup
        rng = np.random.default_rng(4)
        pts = BoundaryPoints(rng.uniform(1, 11, size=(6, 2)))
        out = dom.dom_step(field, pts, params)
        assert np.abs(out.points - pts.points).max() <= params.r_max + 1e-9

    def test_matches_manual(self, setup):
        params, field = setup
        pts = np.array([[3.1, 4.9], [6.6, 7.2], [9.4, 2.8]])
        got = dom.dom_step(field, BoundaryPoints(pts), params).points
        np.testing.assert_allclose(got, manual_step(field, pts, params), rtol=1e-8)


class TestDomOptimize:
    def test_snapshot_count(self, setup):
        params, field = setup
        pts = BoundaryPoints(np.array([[3.0, 3.0], [6.0, 3.0], [6.0, 6.0], [3.0, 6.0]]))
        traces = dom.dom_optimize(field, [pts], params)
        assert len(traces) == 1
        assert len(traces[0].snapshots) == params.t_iters + 1
        np.testing.assert_array_equal(traces[0].snapshots[0].points, pts.points)
        np.testing.assert_array_equal(traces[0].final.points, traces[0].snapshots[-1].points)

    def test_single_iteration_equals_one_step(self, setup):
        params, field = setup
        params.t_iters = 1
        pts = BoundaryPoints(np.array([[3.0, 3.0], [6.0, 3.0], [6.0, 6.0], [3.0, 6.0]]))
        trace = dom.dom_optimize(field, [pts], params)[0]
        stepped = dom.dom_step(field, pts, params)
        np.testing.assert_allclose(trace.final.points, stepped.points, rtol=1e-12)

    def test_proposal_permutation_equivariance(self, setup):
        params, field = setup
        rng = np.random.default_rng(10)
        props = [BoundaryPoints(rng.uniform(1, 11, size=(5, 2))) for _ in range(4)]
        fwd = dom.dom_optimize(field, props, params)
        rev = dom.dom_optimize(field, list(reversed(props)), params)
        for a, b in zip(fwd, reversed(rev)):
            np.testing.assert_array_equal(a.final.points, b.final.points)

    def test_per_iteration_params(self, setup):
        params, field = setup
        rng = np.random.default_rng(31)
        second = dom.init_dom_params(
            5, m_heads=3, n_samples=2, r_max=2.0, t_iters=2, hidden=7,
            rng=rng, dtype=np.float64,
        )
        second.update_out.weight[...] = rng.normal(0, 0.4, second.update_out.weight.shape)
        params.t_iters = 2
        pts = BoundaryPoints(np.array([[4.0, 4.0], [7.0, 4.0], [7.0, 7.0], [4.0, 7.0]]))
        trace = dom.dom_optimize(field, [pts], [params, second])[0]
        assert len(trace.snapshots) == 3
        step1 = dom.dom_step(field, pts, params)
        step2 = dom.dom_step(field, step1, second)
        np.testing.assert_allclose(trace.final.points, step2.points, rtol=1e-12)

    def test_invalid_params(self):
        with pytest.raises(Exception):
            dom.init_dom_params(4, m_heads=0)
