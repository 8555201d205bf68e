"""Named finite-difference gradient-check suites.

Each suite builds small double-precision problems, runs every learnable
tensor through central differences (h = 1e-4), and reports the worst
relative error. Shared by the CLI's gradcheck command and the acceptance
tests.

Central differences are only meaningful away from the op set's kinks
(relu zero crossings, bilinear cell boundaries), so each suite probes its
realized activations and deterministically advances the seed until every
kink has a comfortable margin; the perturbation h = 1e-4 moves activations
by orders of magnitude less than the 5e-3 margin enforced here.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import dom as dom_mod
from . import losses
from . import pipeline
from . import tam as tam_mod
from .autodiff import Tensor, grad_check
from .errors import InvalidInputError
from .geometry import Polygon

SUITES = ("tam", "dom", "loss", "all")

_KINK_MARGIN = 5e-3


def _leaves_of(lifted):
    if isinstance(lifted, tam_mod.TamParams):
        return [t for _n, t in tam_mod.tam_leaves(lifted)]
    return [t for _n, t in dom_mod.dom_leaves(lifted)]


def _readout(t: Tensor, seed) -> Tensor:
    """Fixed random projection to a scalar; keeps every output in play."""
    w = np.random.default_rng(seed).normal(0.0, 1.0, size=t.shape)
    return (t * w).sum()


def _relu_margin(pre_values) -> float:
    return float(np.abs(np.asarray(pre_values)).min())


def _lattice_margin(positions) -> float:
    """Distance of sample coordinates from the nearest integer grid line."""
    arr = np.asarray(positions).reshape(-1)
    return float(np.abs(arr - np.rint(arr)).min())


def _tam_problem(seed):
    rng = np.random.default_rng(seed)
    c, h, w = 6, 10, 11
    params = tam_mod.init_tam_params(c, rng=rng, dtype=np.float64)
    lifted = pipeline.lift_params(params, dtype=np.float64, requires_grad=True)
    rv = Tensor(rng.normal(0.0, 1.0, size=(c, h, w)), requires_grad=True)

    # probe the two relu inputs for kink margins
    pooled = rv.data.mean(axis=(1, 2))
    pre_ch = params.ch_conv1.weight @ pooled + params.ch_conv1.bias
    pos_pooled = Tensor(rv.data.mean(axis=0))
    pre_pos = ad.conv2d_same(
        pos_pooled, params.pos_conv.kernel, params.pos_conv.bias
    ).data
    margin = min(_relu_margin(pre_ch), _relu_margin(pre_pos))
    return margin, lifted, rv


def tam_suite(seed=0):
    margin, lifted, rv = -1.0, None, None
    for attempt in range(64):
        margin, lifted, rv = _tam_problem(seed + 101 * attempt)
        if margin >= _KINK_MARGIN:
            break
    leaves = _leaves_of(lifted)
    w_pred = np.random.default_rng(1).normal(0.0, 1.0, size=(4,) + rv.shape[1:])
    w_f = np.random.default_rng(2).normal(0.0, 1.0, size=rv.shape)

    reports = []

    def full():
        f_tam, pred = tam_mod.tam_forward(rv, lifted)
        return (f_tam * w_f).sum() + (pred * w_pred).sum()

    reports.append(grad_check(full, leaves + [rv], op_name="tam.forward", tol=1e-4))

    def channel():
        return _readout(tam_mod.channel_attention(rv, lifted), 3)

    reports.append(
        grad_check(
            channel,
            [lifted.ch_conv1.weight, lifted.ch_conv1.bias,
             lifted.ch_conv2.weight, lifted.ch_conv2.bias, rv],
            op_name="tam.channel_attention",
            tol=1e-4,
        )
    )

    def position():
        return _readout(tam_mod.position_attention(rv, lifted), 4)

    reports.append(
        grad_check(
            position,
            [lifted.pos_conv.kernel, lifted.pos_conv.bias,
             lifted.pos_deconv.kernel, lifted.pos_deconv.bias, rv],
            op_name="tam.position_attention",
            tol=1e-4,
        )
    )
    return reports


def _dom_problem(seed):
    rng = np.random.default_rng(seed)
    c, h, w = 4, 8, 8
    params = dom_mod.init_dom_params(
        c, m_heads=2, n_samples=3, r_max=2.5, t_iters=2, hidden=8,
        rng=rng, dtype=np.float64,
    )
    # a zero update layer would hide the chain behind identity steps
    params.update_out.weight[...] = rng.normal(
        0.0, 0.3, size=params.update_out.weight.shape
    )
    field_data = rng.normal(0.0, 1.0, size=(c, h, w))
    pts = np.array([[2.31, 3.43], [4.62, 2.24], [3.17, 5.71], [5.23, 4.46]])

    # realized kink margins along the whole unperturbed trajectory
    field_t = Tensor(field_data)
    margins = [_lattice_margin(pts)]
    state = Tensor(pts)
    for _ in range(params.t_iters):
        q = ad.bilinear_sample(field_t, state)
        offs = dom_mod._offsets_from_query(q, params)
        margins.append(_lattice_margin(state.data[:, None, None, :] + offs.data))
        f_da = dom_mod._attention_batch(field_t, state, params)
        pre_hidden = (
            params.update_hidden.weight @ f_da.data.T
        ).T + params.update_hidden.bias
        margins.append(_relu_margin(pre_hidden))
        state = dom_mod._step_batch(field_t, state, params)
        margins.append(_lattice_margin(state.data))
    return min(margins), params, field_data, pts


def dom_suite(seed=0):
    margin, params, field_data, pts = -1.0, None, None, None
    for attempt in range(128):
        margin, params, field_data, pts = _dom_problem(seed + 101 * attempt)
        if margin >= _KINK_MARGIN:
            break
    lifted = pipeline.lift_params(params, dtype=np.float64, requires_grad=True)
    leaves = _leaves_of(lifted)
    field = Tensor(field_data, requires_grad=True)

    reports = []

    def offsets():
        out = dom_mod.predict_offsets(field, Tensor(pts[:1]), lifted)
        return _readout(out, 7)

    reports.append(
        grad_check(offsets, leaves + [field], op_name="dom.predict_offsets", tol=1e-4)
    )

    def attention():
        out = dom_mod.deformable_attention(field, Tensor(pts), lifted)
        return _readout(out, 5)

    reports.append(
        grad_check(
            attention, leaves + [field], op_name="dom.deformable_attention", tol=1e-4
        )
    )

    start = Tensor(pts.copy(), requires_grad=True)

    def full_chain():
        snaps = dom_mod.refine_rings(field, start, lifted)
        total = None
        for i, s in enumerate(snaps[1:]):
            term = _readout(s, 20 + i)
            total = term if total is None else total + term
        return total

    reports.append(
        grad_check(
            full_chain, leaves + [field, start], op_name="dom.optimize_chain", tol=1e-4
        )
    )
    return reports


def loss_suite(seed=0):
    rng = np.random.default_rng(seed)
    h, w = 7, 9
    gt_cls = (rng.random((h, w)) < 0.4).astype(np.float64)
    gt_dist = gt_cls * rng.random((h, w))
    ang = rng.random((h, w)) * 2 * np.pi
    gt_dx = np.cos(ang) * gt_cls
    gt_dy = np.sin(ang) * gt_cls

    z_cls = Tensor(rng.normal(0.0, 1.0, size=(h, w)), requires_grad=True)
    z_dist = Tensor(rng.normal(0.0, 1.0, size=(h, w)), requires_grad=True)
    p_dx = Tensor(rng.normal(0.5, 1.0, size=(h, w)), requires_grad=True)
    p_dy = Tensor(rng.normal(0.5, 1.0, size=(h, w)), requires_grad=True)

    reports = [
        grad_check(
            lambda: losses.cls_loss(ad.sigmoid(z_cls), gt_cls),
            [z_cls],
            op_name="loss.cls",
            tol=1e-4,
        ),
        grad_check(
            lambda: losses.dis_loss(ad.sigmoid(z_dist), gt_dist, gt_cls),
            [z_dist],
            op_name="loss.dis",
            tol=1e-4,
        ),
        grad_check(
            lambda: losses.dir_loss(p_dx, p_dy, gt_dx, gt_dy, gt_cls),
            [p_dx, p_dy],
            op_name="loss.dir",
            tol=1e-4,
        ),
    ]

    gt_poly = Polygon([(1.0, 1.0), (6.0, 1.5), (6.5, 5.0), (1.5, 5.5)])
    input_state = Tensor(np.zeros((4, 2)))
    ring0 = Tensor(
        np.array([[2.0, 2.0], [5.0, 2.2], [5.2, 4.0], [2.2, 4.4]]), requires_grad=True
    )
    ring1 = Tensor(
        np.array([[1.5, 1.4], [5.6, 1.8], [5.9, 4.6], [1.9, 5.0]]), requires_grad=True
    )
    reports.append(
        grad_check(
            lambda: losses.pm_loss([input_state, ring0, ring1], gt_poly, 4),
            [ring0, ring1],
            op_name="loss.pm",
            tol=1e-4,
        )
    )

    def combined():
        l_cls = losses.cls_loss(ad.sigmoid(z_cls), gt_cls)
        l_dis = losses.dis_loss(ad.sigmoid(z_dist), gt_dist, gt_cls)
        l_dir = losses.dir_loss(p_dx, p_dy, gt_dx, gt_dy, gt_cls)
        l_pm = losses.pm_loss([input_state, ring1], gt_poly, 4)
        sf = losses.schedule_factor(losses.LossWeights(eps_epochs=100), 10)
        return l_cls + 1.0 * l_dis + 3.0 * l_dir + sf * l_pm

    reports.append(
        grad_check(
            combined,
            [z_cls, z_dist, p_dx, p_dy, ring1],
            op_name="loss.total",
            tol=1e-4,
        )
    )
    return reports


def run_suite(name: str, seed=0):
    if name not in SUITES:
        raise InvalidInputError(f"unknown gradcheck suite {name!r}; pick from {SUITES}")
    reports = []
    if name in ("tam", "all"):
        reports.extend(tam_suite(seed))
    if name in ("dom", "all"):
        reports.extend(dom_suite(seed))
    if name in ("loss", "all"):
        reports.extend(loss_suite(seed))
    return reports
