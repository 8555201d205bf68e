"""Minimal reverse-mode autodiff over numpy arrays.

The pipeline only needs a small, fixed op set: elementwise arithmetic,
matrix products, the four activations, reductions, concatenation/slicing,
small same-padded 2-d convolutions, and bilinear sampling of a field at
fractional positions. Each op records a vector-Jacobian closure on the
output node; :meth:`Tensor.backward` replays them in reverse topological
order. Nothing here tries to be a general framework.

Dtype discipline: graphs run in whatever float dtype the leaves carry.
Training uses float32 for speed; gradient checking requires float64
(finite differences need the headroom).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError
from .fields import TensorField

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "exp",
    "log",
    "sqrt",
    "clip",
    "matmul",
    "conv2d_same",
    "bilinear_sample",
    "LinearParams",
    "linear_apply",
    "activation",
    "GradCheckReport",
    "grad_check",
]


class Tensor:
    """One node of the computation graph.

    ``data`` is a plain ndarray. ``grad`` is populated by :meth:`backward`
    on nodes created with ``requires_grad=True`` (leaves) or reachable from
    one. Graph bookkeeping is skipped entirely when no input requires
    gradients, so inference pays almost nothing for running through the
    same code paths.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        if type(data) is not np.ndarray:
            if isinstance(data, Tensor):
                data = data.data
            else:
                data = np.asarray(data)
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph mechanics -----------------------------------------------
    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise InvalidInputError("backward() requires a scalar output")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf: accumulate into .grad
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                if parent._vjp is None and parent._parents == ():
                    if parent.grad is None:
                        parent.grad = pg.copy()
                    else:
                        parent.grad = parent.grad + pg
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return _binary(self, other, np.add, lambda a, b, g: (g, g))

    __radd__ = __add__

    def __mul__(self, other):
        return _binary(self, other, np.multiply, lambda a, b, g: (g * b, g * a))

    __rmul__ = __mul__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, lambda a, b, g: (g, -g))

    def __rsub__(self, other):
        return as_tensor(other, like=self) - self

    def __truediv__(self, other):
        return _binary(self, other, np.divide, lambda a, b, g: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return as_tensor(other, like=self) / self

    def __neg__(self):
        return _unary(self, lambda a: -a, lambda a, y, g: -g)

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise InvalidInputError("only scalar exponents are supported")
        return _unary(self, lambda a: a ** n, lambda a, y, g: g * n * a ** (n - 1))

    def __getitem__(self, key):
        data = self.data[key]

        def vjp(g, key=key, shape=self.data.shape, dtype=self.data.dtype):
            out = np.zeros(shape, dtype=dtype)
            out[key] += g
            return (out,)

        return _node(np.array(data, copy=True), (self,), vjp)

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g, axis=axis, keepdims=keepdims, shape=self.data.shape):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _node(np.asarray(data), (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def vjp(g, shape=self.data.shape):
            return (g.reshape(shape),)

        return _node(data, (self,), vjp)

    def detached(self) -> np.ndarray:
        """The raw ndarray, outside the graph."""
        return self.data


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Lift a value into the graph as a constant (unless already a Tensor).

    ``like`` pins the dtype of lifted constants so float32 graphs are not
    silently promoted to float64 by numpy scalar rules.
    """
    if type(value) is Tensor:
        return value
    if isinstance(value, TensorField):
        value = value.data
    arr = np.asarray(value)
    if like is not None and arr.dtype != like.data.dtype:
        arr = arr.astype(like.data.dtype)
    return Tensor(arr)


def _node(data, parents, vjp):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b, fwd, bwd):
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    like = ta if ta is not None else tb
    ta = as_tensor(a, like=like)
    tb = as_tensor(b, like=like)
    data = fwd(ta.data, tb.data)

    def vjp(g, da=ta.data, db=tb.data):
        ga, gb = bwd(da, db, g)
        return (_unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape))

    return _node(data, (ta, tb), vjp)


def _unary(x, fwd, bwd):
    t = as_tensor(x)
    y = fwd(t.data)

    def vjp(g, a=t.data, y=y):
        return (bwd(a, y, g),)

    return _node(y, (t,), vjp)


# -- elementwise nonlinearities ------------------------------------------

def relu(x):
    return _unary(x, lambda a: np.maximum(a, 0), lambda a, y, g: g * (a > 0))


def sigmoid(x):
    return _unary(x, expit, lambda a, y, g: g * y * (1.0 - y))


def tanh(x):
    return _unary(x, np.tanh, lambda a, y, g: g * (1.0 - y * y))


def exp(x):
    return _unary(x, np.exp, lambda a, y, g: g * y)


def log(x):
    return _unary(x, np.log, lambda a, y, g: g / a)


def sqrt(x):
    return _unary(x, np.sqrt, lambda a, y, g: g * 0.5 / y)


def clip(x, lo, hi):
    """Clamp with zero gradient outside [lo, hi]."""
    return _unary(
        x,
        lambda a: np.clip(a, lo, hi),
        lambda a, y, g: g * ((a >= lo) & (a <= hi)),
    )


def softmax(x, axis=-1):
    """Probability-normalized exponentials along ``axis``.

    The max shift is treated as a constant; softmax is invariant to it,
    so the gradient is exact.
    """
    t = as_tensor(x)
    if t.data.size == 0:
        raise InvalidInputError("softmax of an empty input")
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, y=y, axis=axis):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _node(y, (t,), vjp)


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    """2-d matrix product with reverse-mode gradients."""
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.ndim != 2 or tb.ndim != 2:
        raise InvalidInputError("matmul expects 2-d operands")
    data = ta.data @ tb.data

    def vjp(g, da=ta.data, db=tb.data):
        return (g @ db.T, da.T @ g)

    return _node(data, (ta, tb), vjp)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise InvalidInputError("concat of an empty sequence")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def vjp(g, sizes=tuple(sizes), axis=axis):
        out = []
        start = 0
        for s in sizes:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + s)
            out.append(g[tuple(idx)])
            start += s
        return tuple(out)

    return _node(data, tuple(ts), vjp)


def grouped_linear(x, weights, biases):
    """Per-group linear maps in one op: (P, M, N, C) x (M, D, C) -> (P, M, N, D).

    Group m applies its own (D, C) weight and (D,) bias to every (N, C)
    slice of the input. Used to run all attention heads in a single node.
    """
    tx = as_tensor(x)
    tw = as_tensor(weights, like=tx)
    tb = as_tensor(biases, like=tx)
    if tx.ndim != 4 or tw.ndim != 3 or tb.ndim != 2:
        raise InvalidInputError("grouped_linear expects (P,M,N,C), (M,D,C), (M,D)")
    if tx.shape[1] != tw.shape[0] or tx.shape[3] != tw.shape[2]:
        raise InvalidInputError(
            f"grouped_linear shapes disagree: x {tx.shape}, w {tw.shape}"
        )
    p, m, n, c = tx.shape
    d = tw.shape[1]
    xt = np.ascontiguousarray(tx.data.transpose(1, 0, 2, 3)).reshape(m, p * n, c)
    y = np.matmul(xt, tw.data.transpose(0, 2, 1))  # (m, p*n, d)
    data = np.ascontiguousarray(
        y.reshape(m, p, n, d).transpose(1, 0, 2, 3)
    ) + tb.data[None, :, None, :]

    def vjp(g, xt=xt, wd=tw.data, p=p, m=m, n=n, c=c, d=d):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(m, p * n, d)
        gx = np.matmul(gt, wd).reshape(m, p, n, c).transpose(1, 0, 2, 3)
        gw = np.matmul(gt.transpose(0, 2, 1), xt)  # (m, d, c)
        gb = g.sum(axis=(0, 2))
        return (np.ascontiguousarray(gx), gw, gb)

    return _node(data, (tx, tw, tb), vjp)


def conv2d_same(image, kernel, bias=None, flip=False):
    """Same-padded stride-1 2-d convolution of an (H, W) map.

    ``flip=False`` computes cross-correlation (the usual "conv layer");
    ``flip=True`` applies the 180-degree-rotated kernel, which for stride 1
    and same zero padding is exactly the transposed convolution.
    """
    img = as_tensor(image)
    ker = as_tensor(kernel, like=img)
    if img.ndim != 2 or ker.ndim != 2:
        raise InvalidInputError("conv2d_same expects 2-d image and kernel")
    kh, kw = ker.shape
    h, w = img.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidInputError("kernel sides must be odd")
    if kh > h or kw > w:
        raise InvalidInputError(f"kernel {kh}x{kw} larger than field {h}x{w}")

    kdata = ker.data[::-1, ::-1] if flip else ker.data
    ph, pw = kh // 2, kw // 2

    def correlate(image2d, kernel2d):
        hh, ww = image2d.shape
        padded = np.pad(image2d, ((ph, ph), (pw, pw)))
        acc = np.zeros((hh, ww), dtype=image2d.dtype)
        for i in range(kh):
            for j in range(kw):
                acc += kernel2d[i, j] * padded[i : i + hh, j : j + ww]
        return acc

    out = correlate(img.data, kdata)
    parents = [img, ker]

    def vjp(g, idata=img.data, kdata=kdata, flip=flip):
        gimg = correlate(g, kdata[::-1, ::-1])
        hh, ww = g.shape
        padded = np.pad(idata, ((ph, ph), (pw, pw)))
        gker = np.empty((kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gker[i, j] = np.vdot(padded[i : i + hh, j : j + ww], g)
        if flip:
            gker = gker[::-1, ::-1]
        grads = [gimg, gker]
        if bias is not None:
            grads.append(np.asarray(g.sum(), dtype=g.dtype))
        return tuple(grads)

    if bias is not None:
        tb = as_tensor(bias, like=img)
        out = out + tb.data
        parents.append(tb)
    return _node(out, tuple(parents), vjp)


def bilinear_sample(field, points):
    """Sample a (C, H, W) field at fractional (x, y) positions.

    Coordinates follow the package convention: x indexes columns, y rows,
    with the origin at the center of cell (0, 0). Out-of-bounds neighbors
    contribute zero, so gradients stay defined as points cross the border.
    Differentiable with respect to both the field values and the points.

    Args:
        field: Tensor/array/TensorField of shape (C, H, W).
        points: Tensor/array of shape (2,) or (P, 2) holding (x, y) pairs.

    Returns:
        Tensor of shape (C,) or (P, C) matching the points' rank.
    """
    f = as_tensor(field)
    if f.ndim != 3 or f.size == 0:
        raise InvalidInputError("bilinear_sample expects a non-empty (C, H, W) field")
    p = as_tensor(points, like=f)
    single = p.ndim == 1
    if single:
        p = p.reshape(1, 2)
    if p.ndim != 2 or p.shape[1] != 2:
        raise InvalidInputError("points must have shape (P, 2)")

    c, h, w = f.shape
    n = p.shape[0]
    fdata = f.data
    dtype = fdata.dtype
    x = p.data[:, 0].astype(dtype)
    y = p.data[:, 1].astype(dtype)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)

    flat = fdata.reshape(c, h * w)
    corners = []  # (flat_index_clipped, validity, weight, dw/dx, dw/dy)
    for dy, wy, sy in ((0, 1.0 - fy, -1.0), (1, fy, 1.0)):
        for dx, wx, sx in ((0, 1.0 - fx, -1.0), (1, fx, 1.0)):
            yi = y0i + dy
            xi = x0i + dx
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
            corners.append((idx, valid, (wx * wy) * valid, sx * wy * valid, sy * wx * valid))

    vals = [flat[:, idx].T for idx, _v, _w, _dx, _dy in corners]  # (n, c) each
    out = vals[0] * corners[0][2][:, None]
    for (idx, _valid, wgt, _dx, _dy), v in zip(corners[1:], vals[1:]):
        out = out + v * wgt[:, None]

    def vjp(g, corners=corners, vals=vals, c=c, h=h, w=w, n=n, dtype=dtype):
        # field gradient: one flat scatter-add per corner, channel-major so
        # the result reshapes to (c, h, w) without a transpose copy
        ch_base = np.arange(c, dtype=np.int64) * (h * w)
        gfield = np.zeros(c * h * w, dtype=dtype)
        gx = np.zeros(n, dtype=dtype)
        gy = np.zeros(n, dtype=dtype)
        for (idx, valid, wgt, dwx, dwy), v in zip(corners, vals):
            contrib = g * wgt[:, None]
            flat_idx = (ch_base[:, None] + idx[None, :]).ravel()
            np.add.at(gfield, flat_idx, np.ascontiguousarray(contrib.T).ravel())
            gv = (g * v).sum(axis=1)
            gx += gv * dwx
            gy += gv * dwy
        return (gfield.reshape(c, h, w), np.stack([gx, gy], axis=1))

    node = _node(out, (f, p), vjp)
    if single:
        node = node.reshape(c)
    return node


# -- linear layers and activations (the Eq-style building blocks) ----------


@dataclass
class LinearParams:
    """A fully connected map: out = weight @ in + bias.

    ``weight`` has shape (out_dim, in_dim) and ``bias`` (out_dim,). Fields
    may hold plain ndarrays (inference, storage) or Tensors (training /
    gradient checking); every consumer lifts through :func:`as_tensor`.
    """

    weight: object
    bias: object

    def __post_init__(self):
        w = self.weight.data if isinstance(self.weight, Tensor) else np.asarray(self.weight)
        b = self.bias.data if isinstance(self.bias, Tensor) else np.asarray(self.bias)
        if w.ndim != 2:
            raise InvalidInputError("LinearParams.weight must be 2-d")
        if b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise InvalidInputError(
                f"bias length {b.shape} inconsistent with weight {w.shape}"
            )

    @property
    def in_dim(self) -> int:
        w = self.weight.data if isinstance(self.weight, Tensor) else self.weight
        return w.shape[1]

    @property
    def out_dim(self) -> int:
        w = self.weight.data if isinstance(self.weight, Tensor) else self.weight
        return w.shape[0]


def linear_apply(params: LinearParams, x):
    """Apply a LinearParams map to a vector or a stack of vectors.

    Accepts (..., in_dim) input and returns (..., out_dim).
    """
    t = as_tensor(x)
    w = as_tensor(params.weight, like=t)
    b = as_tensor(params.bias, like=t)
    if t.shape[-1] != w.shape[1]:
        raise InvalidInputError(
            f"input dim {t.shape[-1]} does not match weight in_dim {w.shape[1]}"
        )
    lead = t.shape[:-1]
    flat = t.reshape((int(np.prod(lead)) if lead else 1, w.shape[1]))
    out = matmul(flat, _transpose2d(w)) + b
    return out.reshape(lead + (w.shape[0],))


def _transpose2d(t: Tensor) -> Tensor:
    data = t.data.T

    def vjp(g):
        return (g.T,)

    return _node(np.ascontiguousarray(data), (t,), vjp)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(kind: str, x):
    """Dispatch relu/sigmoid/tanh elementwise, or softmax over the last axis."""
    t = as_tensor(x)
    if t.size == 0:
        raise InvalidInputError("activation of an empty input")
    if kind == "softmax":
        return softmax(t, axis=-1)
    try:
        return _ACTIVATIONS[kind](t)
    except KeyError:
        raise InvalidInputError(f"unknown activation kind {kind!r}") from None


# -- finite-difference gradient checking -----------------------------------


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_err: float
    max_abs_err: float
    n_params_checked: int
    passed: bool
    tol: float
    abs_floor: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{self.op_name:<28} rel={self.max_rel_err:.3e} "
            f"abs={self.max_abs_err:.3e} n={self.n_params_checked:<5d} {status}"
        )


def grad_check(fn, params, op_name="fn", tol=1e-4, step=1e-4, abs_floor=1e-8):
    """Compare reverse-mode gradients against central finite differences.

    ``fn`` is a zero-argument callable that rebuilds the graph from the
    given leaf tensors and returns a scalar Tensor. Every leaf must be
    float64: the h=1e-4 central difference has no headroom in float32.

    The relative error uses denominator max(|analytic|, |numeric|, 1e-8);
    the report passes when either the max relative error is within ``tol``
    or the max absolute error is under ``abs_floor``.
    """
    leaves = list(params)
    for leaf in leaves:
        if not isinstance(leaf, Tensor) or not leaf.requires_grad:
            raise InvalidInputError("grad_check params must be requires_grad Tensors")
        if leaf.data.dtype != np.float64:
            raise InvalidInputError("grad_check requires float64 parameters")
        if not np.all(np.isfinite(leaf.data)):
            raise InvalidInputError("grad_check inputs must be finite")

    out = fn()
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise InvalidInputError("grad_check target must evaluate to a scalar Tensor")
    for leaf in leaves:
        leaf.zero_grad()
    out.backward()
    analytic = [
        np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
        for leaf in leaves
    ]

    max_rel = 0.0
    max_abs = 0.0
    n_checked = 0
    for leaf, ana in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().data)
            flat[i] = orig - step
            f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(aflat[i])
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), 1e-8)
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
            n_checked += 1

    passed = (max_rel <= tol) or (max_abs <= abs_floor)
    return GradCheckReport(
        op_name=op_name,
        max_rel_err=max_rel,
        max_abs_err=max_abs,
        n_params_checked=n_checked,
        passed=passed,
        tol=tol,
        abs_floor=abs_floor,
    )
