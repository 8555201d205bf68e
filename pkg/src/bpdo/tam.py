"""Text-aware feature fusion: channel attention, position attention, heads.

The module reweights incoming features along two axes, fuses the modulated
copies with the original through a 1x1 projection, and predicts the four
prior maps from the fused features. Head nonlinearities are sigmoid for the
classification and distance channels and tanh for the two direction
channels.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import autodiff as ad
from .autodiff import LinearParams, Tensor, as_tensor
from .errors import InvalidInputError

PRED_CHANNELS = 4  # cls, dist, dir_x, dir_y


@dataclass
class Conv2dParams:
    """One k x k spatial kernel with a scalar bias."""

    kernel: object
    bias: object

    def __post_init__(self):
        k = self.kernel.data if isinstance(self.kernel, Tensor) else np.asarray(self.kernel)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise InvalidInputError("conv kernel must be square with odd side")

    @property
    def kernel_size(self) -> int:
        k = self.kernel.data if isinstance(self.kernel, Tensor) else self.kernel
        return k.shape[0]


@dataclass
class TamParams:
    """Learnable bundle for the text-aware module.

    ch_conv1/ch_conv2 form the channel-attention bottleneck (C -> hidden ->
    C), pos_conv/pos_deconv the position branch's conv and transposed-conv,
    fuse_conv the 1x1 projection from 3C concatenated channels back to C,
    and head_conv the 1x1 prediction head (C -> 4).
    """

    ch_conv1: LinearParams
    ch_conv2: LinearParams
    pos_conv: Conv2dParams
    pos_deconv: Conv2dParams
    fuse_conv: LinearParams
    head_conv: LinearParams

    def __post_init__(self):
        c = self.ch_conv1.in_dim
        if self.ch_conv2.out_dim != c:
            raise InvalidInputError("channel branch must map C back to C")
        if self.ch_conv1.out_dim != self.ch_conv2.in_dim:
            raise InvalidInputError("channel branch hidden widths disagree")
        if self.fuse_conv.in_dim != 3 * c:
            raise InvalidInputError("fuse_conv must take 3*C input channels")
        if self.fuse_conv.out_dim != c:
            raise InvalidInputError("fuse_conv must emit C channels")
        if self.head_conv.in_dim != c or self.head_conv.out_dim != PRED_CHANNELS:
            raise InvalidInputError("head_conv must map C -> 4 channels")

    @property
    def c_channels(self) -> int:
        return self.ch_conv1.in_dim


def _init_linear(rng, out_dim, in_dim, dtype=np.float32) -> LinearParams:
    scale = 1.0 / np.sqrt(in_dim)
    w = rng.normal(0.0, scale, size=(out_dim, in_dim)).astype(dtype)
    return LinearParams(w, np.zeros(out_dim, dtype=dtype))


def init_tam_params(c_channels, hidden=None, kernel_size=3, rng=None, dtype=np.float32):
    """Seeded initialization; hidden defaults to C // 2."""
    if rng is None:
        rng = np.random.default_rng(0)
    if c_channels < 1:
        raise InvalidInputError("c_channels must be positive")
    if hidden is None:
        hidden = max(c_channels // 2, 1)
    k = kernel_size
    kscale = 1.0 / k
    return TamParams(
        ch_conv1=_init_linear(rng, hidden, c_channels, dtype),
        ch_conv2=_init_linear(rng, c_channels, hidden, dtype),
        pos_conv=Conv2dParams(
            rng.normal(0.0, kscale, size=(k, k)).astype(dtype), np.zeros((), dtype=dtype)
        ),
        pos_deconv=Conv2dParams(
            rng.normal(0.0, kscale, size=(k, k)).astype(dtype), np.zeros((), dtype=dtype)
        ),
        fuse_conv=_init_linear(rng, c_channels, 3 * c_channels, dtype),
        head_conv=_init_linear(rng, PRED_CHANNELS, c_channels, dtype),
    )


def channel_attention(rv, params: TamParams) -> Tensor:
    """Per-channel gates in (0, 1): pool over space, squeeze, excite."""
    t = as_tensor(rv)
    if t.ndim != 3:
        raise InvalidInputError("expected a (C, H, W) field")
    if t.shape[0] != params.c_channels:
        raise InvalidInputError(
            f"field has {t.shape[0]} channels but params expect {params.c_channels}"
        )
    pooled = t.mean(axis=(1, 2))
    h = ad.relu(ad.linear_apply(params.ch_conv1, pooled))
    return ad.sigmoid(ad.linear_apply(params.ch_conv2, h))


def position_attention(rv, params: TamParams) -> Tensor:
    """Per-position gates in (0, 1), same spatial size as the input.

    The channel axis is averaged away first (the transpose-pool step), then
    a conv with relu and a transposed conv with sigmoid produce the map.
    """
    t = as_tensor(rv)
    if t.ndim != 3 or t.size == 0:
        raise InvalidInputError("expected a non-empty (C, H, W) field")
    k = params.pos_conv.kernel_size
    if k > t.shape[1] or k > t.shape[2]:
        raise InvalidInputError(f"kernel size {k} exceeds field {t.shape[1:]}")
    pooled = t.mean(axis=0)
    h = ad.relu(ad.conv2d_same(pooled, params.pos_conv.kernel, params.pos_conv.bias))
    return ad.sigmoid(
        ad.conv2d_same(h, params.pos_deconv.kernel, params.pos_deconv.bias, flip=True)
    )


def fuse_features(rv, w_c, w_p, fuse_conv: LinearParams) -> Tensor:
    """Concat [rv * W_c, rv * W_p, rv] and project 3C -> C with a 1x1 conv."""
    t = as_tensor(rv)
    c, hh, ww = t.shape
    if fuse_conv.in_dim != 3 * c:
        raise InvalidInputError(
            f"fuse_conv expects {fuse_conv.in_dim} input channels, field gives {3 * c}"
        )
    wc = as_tensor(w_c, like=t).reshape(c, 1, 1)
    wp = as_tensor(w_p, like=t).reshape(1, hh, ww)
    cat = ad.concat([t * wc, t * wp, t], axis=0)
    flat = cat.reshape(3 * c, hh * ww)
    out = ad.matmul(as_tensor(fuse_conv.weight, like=t), flat) + as_tensor(
        fuse_conv.bias, like=t
    ).reshape(c, 1)
    return out.reshape(c, hh, ww)


def predict_heads(f_tam, head_conv: LinearParams) -> Tensor:
    """1x1 head over fused features: sigmoid cls/dist, tanh directions."""
    t = as_tensor(f_tam)
    c, hh, ww = t.shape
    flat = t.reshape(c, hh * ww)
    raw = ad.matmul(as_tensor(head_conv.weight, like=t), flat) + as_tensor(
        head_conv.bias, like=t
    ).reshape(PRED_CHANNELS, 1)
    raw = raw.reshape(PRED_CHANNELS, hh, ww)
    return ad.concat([ad.sigmoid(raw[0:2]), ad.tanh(raw[2:4])], axis=0)


def tam_forward(rv, params: TamParams):
    """Full forward pass.

    Returns (f_tam, predicted) where f_tam has the input's C channels and
    spatial size and predicted is the 4-channel prior-map stack.
    """
    w_c = channel_attention(rv, params)
    w_p = position_attention(rv, params)
    f_tam = fuse_features(rv, w_c, w_p, params.fuse_conv)
    predicted = predict_heads(f_tam, params.head_conv)
    return f_tam, predicted


def tam_leaves(params: TamParams):
    """The parameter tensors in a fixed, documented order."""
    out = []
    for f in dc_fields(params):
        bundle = getattr(params, f.name)
        if isinstance(bundle, LinearParams):
            out.append((f"tam.{f.name}.weight", bundle.weight))
            out.append((f"tam.{f.name}.bias", bundle.bias))
        else:
            out.append((f"tam.{f.name}.kernel", bundle.kernel))
            out.append((f"tam.{f.name}.bias", bundle.bias))
    return out
