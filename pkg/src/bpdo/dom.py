"""Boundary-point refinement by multi-head deformable attention.

Each ring point queries the fused feature field at its own position,
predicts a small set of sampling offsets per attention head, reads the
field at those offsets through bilinear interpolation, and combines the
samples into a bounded position update. Iterating the step walks the ring
onto the region boundary using only neighborhood information; points never
exchange state with each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import LinearParams, Tensor, as_tensor
from .errors import InvalidInputError
from .geometry import BoundaryPoints

__all__ = [
    "DomParams",
    "DomTrace",
    "init_dom_params",
    "predict_offsets",
    "deformable_attention",
    "dom_step",
    "dom_optimize",
    "dom_leaves",
]


@dataclass
class DomParams:
    """Learnable bundle for one refinement step.

    value_proj[m] projects a sampled feature vector to the head's value
    space (C -> d_v). qk_weight[m][n] scores sample n of head m from the
    query feature (C -> 1); scores are softmax-normalized over the N
    samples of each head. head_out recombines the concatenated head
    outputs (M * d_v -> C). offset_head[m] maps the query feature to the
    head's N offset pairs, squashed by tanh and scaled by r_max. The
    update head (C -> hidden -> 2, tanh output scaled by r_max) turns the
    attended feature into a per-point displacement.
    """

    m_heads: int
    n_samples: int
    value_proj: list
    qk_weight: list
    head_out: LinearParams
    offset_head: list
    update_hidden: LinearParams
    update_out: LinearParams
    r_max: float = 8.0
    t_iters: int = 3

    def __post_init__(self):
        if self.m_heads < 1 or self.n_samples < 1:
            raise InvalidInputError("m_heads and n_samples must be at least 1")
        if self.r_max <= 0:
            raise InvalidInputError("r_max must be positive")
        if self.t_iters < 1:
            raise InvalidInputError("t_iters must be at least 1")
        if len(self.value_proj) != self.m_heads or len(self.offset_head) != self.m_heads:
            raise InvalidInputError("per-head parameter lists must have m_heads entries")
        if len(self.qk_weight) != self.m_heads or any(
            len(row) != self.n_samples for row in self.qk_weight
        ):
            raise InvalidInputError("qk_weight must be m_heads x n_samples")
        c = self.value_proj[0].in_dim
        d_v = self.value_proj[0].out_dim
        for vp in self.value_proj:
            if vp.in_dim != c or vp.out_dim != d_v:
                raise InvalidInputError("value projections disagree on dimensions")
        for row in self.qk_weight:
            for qk in row:
                if qk.in_dim != c or qk.out_dim != 1:
                    raise InvalidInputError("qk weights must map C -> 1")
        for oh in self.offset_head:
            if oh.in_dim != c or oh.out_dim != 2 * self.n_samples:
                raise InvalidInputError("offset heads must map C -> 2*n_samples")
        if self.head_out.in_dim != self.m_heads * d_v or self.head_out.out_dim != c:
            raise InvalidInputError("head_out must map m_heads*d_v -> C")
        if self.update_hidden.in_dim != c or self.update_out.out_dim != 2:
            raise InvalidInputError("update head must map C -> hidden -> 2")
        if self.update_out.in_dim != self.update_hidden.out_dim:
            raise InvalidInputError("update head hidden widths disagree")

    @property
    def c_channels(self) -> int:
        return self.value_proj[0].in_dim

    @property
    def d_v(self) -> int:
        return self.value_proj[0].out_dim


@dataclass
class DomTrace:
    """One proposal's refinement history: t_iters + 1 states, input first."""

    snapshots: list = field(default_factory=list)

    @property
    def final(self) -> BoundaryPoints:
        return self.snapshots[-1]


def _ring_bias(m_heads, n_samples, dtype):
    """Spread initial sampling offsets on a ring of directions.

    With zero weights the offsets would all collapse onto the query point
    and the first gradient steps would see no spatial contrast; biasing
    the offset heads toward M*N distinct directions is the usual fix.
    The magnitude arctanh(0.5) puts each initial sample at half reach.
    """
    biases = []
    total = m_heads * n_samples
    mag = float(np.arctanh(0.5))
    for m in range(m_heads):
        b = np.zeros(2 * n_samples, dtype=dtype)
        for n in range(n_samples):
            ang = 2.0 * np.pi * (m * n_samples + n) / total
            b[2 * n] = mag * np.cos(ang)
            b[2 * n + 1] = mag * np.sin(ang)
        biases.append(b)
    return biases


def init_dom_params(
    c_channels,
    m_heads=8,
    n_samples=3,
    d_v=None,
    r_max=8.0,
    t_iters=3,
    hidden=64,
    rng=None,
    dtype=np.float32,
):
    """Seeded initialization; d_v defaults to C // m_heads.

    The final update layer starts at zero so the untrained module is an
    identity step, and offset-head biases start on a ring (see _ring_bias).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if d_v is None:
        d_v = max(c_channels // m_heads, 1)
    scale = 1.0 / np.sqrt(c_channels)

    def lin(out_dim, in_dim, zero=False, s=None):
        if zero:
            w = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            w = rng.normal(0.0, s or 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim)).astype(dtype)
        return LinearParams(w, np.zeros(out_dim, dtype=dtype))

    ring = _ring_bias(m_heads, n_samples, dtype)
    offset_head = []
    for m in range(m_heads):
        lp = lin(2 * n_samples, c_channels, s=0.1 * scale)
        offset_head.append(LinearParams(lp.weight, ring[m]))
    return DomParams(
        m_heads=m_heads,
        n_samples=n_samples,
        value_proj=[lin(d_v, c_channels) for _ in range(m_heads)],
        qk_weight=[[lin(1, c_channels) for _ in range(n_samples)] for _ in range(m_heads)],
        head_out=lin(c_channels, m_heads * d_v),
        offset_head=offset_head,
        update_hidden=lin(hidden, c_channels),
        update_out=lin(2, hidden, zero=True),
        r_max=float(r_max),
        t_iters=int(t_iters),
    )


def _as_points_tensor(pts, like=None):
    if isinstance(pts, Tensor):
        t = pts
    elif isinstance(pts, BoundaryPoints):
        t = as_tensor(pts.points, like=like)
    else:
        t = as_tensor(np.asarray(pts, dtype=np.float64), like=like)
    if t.ndim == 1:
        t = t.reshape(1, 2)
    if t.ndim != 2 or t.shape[1] != 2:
        raise InvalidInputError("points must have shape (P, 2)")
    if not np.all(np.isfinite(t.data)):
        raise InvalidInputError("points must be finite")
    return t


def _cat_linear(params_list, like) -> LinearParams:
    """Stack a list of LinearParams into one (sum_out, C) map."""
    ws = [as_tensor(lp.weight, like=like) for lp in params_list]
    bs = [as_tensor(lp.bias, like=like) for lp in params_list]
    return LinearParams(ad.concat(ws, axis=0), ad.concat(bs, axis=0))


def _offsets_from_query(q: Tensor, params: DomParams) -> Tensor:
    """(P, C) query features -> (P, M, N, 2) bounded offsets."""
    p = q.shape[0]
    merged = _cat_linear(params.offset_head, q)  # (M * 2N, C)
    raw = ad.linear_apply(merged, q)  # (P, M * 2N)
    bounded = ad.tanh(raw) * float(params.r_max)
    return bounded.reshape(p, params.m_heads, params.n_samples, 2)


def predict_offsets(f_tam, point, params: DomParams) -> Tensor:
    """Sampling offsets for one query point: (m_heads, n_samples, 2).

    Every component is tanh-bounded by r_max.
    """
    f = as_tensor(f_tam)
    pts = _as_points_tensor(point, like=f)
    q = ad.bilinear_sample(f, pts)
    return _offsets_from_query(q, params).reshape(params.m_heads, params.n_samples, 2)


def _attention_batch(f: Tensor, pts: Tensor, params: DomParams) -> Tensor:
    """Deformable attention for a batch of points: (P, 2) -> (P, C)."""
    p = pts.shape[0]
    m, n = params.m_heads, params.n_samples
    c = params.c_channels
    d_v = params.d_v
    q = ad.bilinear_sample(f, pts)  # (P, C)
    offsets = _offsets_from_query(q, params)  # (P, M, N, 2)
    loc = pts.reshape(p, 1, 1, 2) + offsets
    samples = ad.bilinear_sample(f, loc.reshape(p * m * n, 2)).reshape(p, m, n, c)

    qk_flat = _cat_linear(
        [params.qk_weight[mi][ni] for mi in range(m) for ni in range(n)], q
    )
    scores = ad.linear_apply(qk_flat, q).reshape(p, m, n)
    attn = ad.softmax(scores, axis=-1).reshape(p, m, n, 1)

    vw = ad.concat(
        [as_tensor(vp.weight, like=q).reshape(1, d_v, c) for vp in params.value_proj],
        axis=0,
    )
    vb = ad.concat(
        [as_tensor(vp.bias, like=q).reshape(1, d_v) for vp in params.value_proj], axis=0
    )
    vals = ad.grouped_linear(samples, vw, vb)  # (P, M, N, d_v)
    heads = (attn * vals).sum(axis=2)  # (P, M, d_v)
    return ad.linear_apply(params.head_out, heads.reshape(p, m * d_v))


def deformable_attention(f_tam, point, params: DomParams) -> Tensor:
    """Attended feature vector (length C) for one query point."""
    f = as_tensor(f_tam)
    pts = _as_points_tensor(point, like=f)
    out = _attention_batch(f, pts, params)
    if out.shape[0] == 1 and not isinstance(point, (Tensor, BoundaryPoints)) and np.asarray(point).ndim == 1:
        return out.reshape(out.shape[1])
    return out


def _step_batch(f: Tensor, pts: Tensor, params: DomParams) -> Tensor:
    f_da = _attention_batch(f, pts, params)
    h = ad.relu(ad.linear_apply(params.update_hidden, f_da))
    delta = ad.tanh(ad.linear_apply(params.update_out, h)) * float(params.r_max)
    return pts + delta


def dom_step(f_tam, pts, params: DomParams):
    """One synchronous refinement step; every point moves at most r_max
    per coordinate, all updates computed from the same input state."""
    f = as_tensor(f_tam)
    t = _as_points_tensor(pts, like=f)
    out = _step_batch(f, t, params)
    if isinstance(pts, BoundaryPoints):
        return BoundaryPoints(np.asarray(out.data, dtype=np.float64).copy())
    return out


def _params_per_iteration(params, t_iters):
    if isinstance(params, DomParams):
        return [params] * t_iters, params
    seq = list(params)
    if not seq:
        raise InvalidInputError("need at least one DomParams")
    t_iters = seq[0].t_iters
    if len(seq) != t_iters:
        raise InvalidInputError(
            f"per-iteration params require {t_iters} bundles, got {len(seq)}"
        )
    return seq, seq[0]


def refine_rings(f_tam, rings: Tensor, params) -> list:
    """Graph-level refinement of stacked rings.

    ``rings`` is an (n * k, 2) tensor of all proposals' points; returns the
    list of t_iters + 1 point tensors, input state first. This is the
    training entry: gradients flow through every snapshot.
    """
    f = as_tensor(f_tam)
    first = params if isinstance(params, DomParams) else list(params)[0]
    per_iter, _ = _params_per_iteration(params, first.t_iters)
    pts = _as_points_tensor(rings, like=f)
    snaps = [pts]
    for it_params in per_iter:
        pts = _step_batch(f, pts, it_params)
        snaps.append(pts)
    return snaps


def dom_optimize(f_tam, proposals, params):
    """Iteratively refine each proposal; returns one DomTrace per input.

    ``params`` is a single DomParams shared across iterations or a sequence
    of t_iters bundles. Every trace carries t_iters + 1 snapshots including
    the input ring.
    """
    f = as_tensor(f_tam)
    traces = []
    for prop in proposals:
        pts = prop.points if isinstance(prop, BoundaryPoints) else np.asarray(prop)
        snaps = refine_rings(f, as_tensor(pts, like=f), params)
        traces.append(
            DomTrace(
                snapshots=[
                    BoundaryPoints(np.asarray(s.data, dtype=np.float64).copy())
                    for s in snaps
                ]
            )
        )
    return traces


def dom_leaves(params: DomParams):
    """The parameter tensors in a fixed, documented order."""
    out = []
    for m, vp in enumerate(params.value_proj):
        out.append((f"dom.value_proj.{m}.weight", vp.weight))
        out.append((f"dom.value_proj.{m}.bias", vp.bias))
    for m, row in enumerate(params.qk_weight):
        for n, qk in enumerate(row):
            out.append((f"dom.qk_weight.{m}.{n}.weight", qk.weight))
            out.append((f"dom.qk_weight.{m}.{n}.bias", qk.bias))
    out.append(("dom.head_out.weight", params.head_out.weight))
    out.append(("dom.head_out.bias", params.head_out.bias))
    for m, oh in enumerate(params.offset_head):
        out.append((f"dom.offset_head.{m}.weight", oh.weight))
        out.append((f"dom.offset_head.{m}.bias", oh.bias))
    out.append(("dom.update_hidden.weight", params.update_hidden.weight))
    out.append(("dom.update_hidden.bias", params.update_hidden.bias))
    out.append(("dom.update_out.weight", params.update_out.weight))
    out.append(("dom.update_out.bias", params.update_out.bias))
    return out
