"""Differentiable operations over :class:`~bptinpaint.engine.tensor.Tensor`.

Image tensors are NCHW. Convolutions are cross-correlations (no kernel flip)
and use an im2col layout; ``conv_transpose2d`` is implemented as the exact
adjoint of ``conv2d``'s input map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, as_tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int | tuple[int, int]
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "stride", "dilation"):
            if getattr(self, field) < 1:
                raise ValueError(f"ConvSpec.{field} must be >= 1")
        if self.padding < 0:
            raise ValueError("ConvSpec.padding must be >= 0")
        if min(self.kernel_hw) < 1:
            raise ValueError("ConvSpec.kernel must be >= 1")

    @property
    def kernel_hw(self) -> tuple[int, int]:
        k = self.kernel
        return (k, k) if isinstance(k, int) else (int(k[0]), int(k[1]))

    def effective_kernel(self) -> tuple[int, int]:
        kh, kw = self.kernel_hw
        d = self.dilation
        return kh + (kh - 1) * (d - 1), kw + (kw - 1) * (d - 1)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        ekh, ekw = self.effective_kernel()
        ho = (h + 2 * self.padding - ekh) // self.stride + 1
        wo = (w + 2 * self.padding - ekw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"convolution output extent < 1 for input {h}x{w} with {self}")
        return ho, wo

    def transpose_output_size(self, h: int, w: int, output_padding: int = 0) -> tuple[int, int]:
        ekh, ekw = self.effective_kernel()
        ho = (h - 1) * self.stride - 2 * self.padding + ekh + output_padding
        wo = (w - 1) * self.stride - 2 * self.padding + ekw + output_padding
        if ho < 1 or wo < 1:
            raise ValueError(f"transposed convolution output extent < 1 for input {h}x{w}")
        return ho, wo


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise and reductions


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._from_op(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return Tensor._from_op(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1 + np.tanh(0.5 * x.data))
    return Tensor._from_op(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return Tensor._from_op(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis, keepdims), 1.0 / n)


def abs_sum(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return Tensor._from_op(np.asarray(np.abs(x.data).sum()), (x,), lambda g: (g * sign,), "abs_sum")


def sq_sum(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._from_op(np.asarray((d * d).sum()), (x,), lambda g: (2 * g * d,), "sq_sum")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial window ``[top:top+height, left:left+width]`` of an NCHW tensor."""
    n, c, h, w = x.shape
    if top < 0 or left < 0 or height < 1 or width < 1 or top + height > h or left + width > w:
        raise ValueError(f"crop window ({top},{left},{height},{width}) outside {h}x{w}")

    def backward(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        out[:, :, top:top + height, left:left + width] = g
        return (out,)

    data = x.data[:, :, top:top + height, left:left + width].copy()
    return Tensor._from_op(data, (x,), backward, "crop")


def take(x: Tensor, index: int) -> Tensor:
    """Item ``index`` of the leading axis, keeping that axis (length 1)."""

    def backward(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        out[index] = g[0]
        return (out,)

    return Tensor._from_op(x.data[index:index + 1].copy(), (x,), backward, "take")


def select(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Where ``mask`` is set take ``a``, elsewhere ``b`` (an exact select)."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), np.broadcast_shapes(a.shape, b.shape))

    def backward(g):
        return _unbroadcast(np.where(m, g, 0), a.shape), _unbroadcast(np.where(m, 0, g), b.shape)

    return Tensor._from_op(np.where(m, a.data, b.data), (a, b), backward, "select")


def channel_normalize(x: Tensor, eps: float = 1e-10) -> Tensor:
    """Scale each spatial position's channel vector to unit length."""
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return Tensor._from_op(y, (x,), backward, "channel_normalize")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-element binary cross-entropy of ``sigmoid(logits)`` against targets.

    Logits are clamped to +-30 first; the clamp passes no gradient outside.
    """
    z_raw = logits.data
    t = np.asarray(targets, dtype=logits.dtype)
    inside = np.abs(z_raw) <= LOGIT_CLAMP
    z = np.clip(z_raw, -LOGIT_CLAMP, LOGIT_CLAMP)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    p = 0.5 * (1 + np.tanh(0.5 * z))

    def backward(g):
        return (g * (p - t) * inside,)

    return Tensor._from_op(loss, (logits,), backward, "bce_with_logits")


# pooling and resampling


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"avg_pool2d factor {factor} does not divide {h}x{w}")
    f = factor
    out = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, f, axis=2), f, axis=3)
        return (g / (f * f),)

    return Tensor._from_op(out, (x,), backward, "avg_pool2d")


def _resize_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * ratio - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def bilinear_resize(x: Tensor, height: int, width: int) -> Tensor:
    if height < 1 or width < 1:
        raise ValueError(f"bilinear_resize to non-positive extent {height}x{width}")
    ry = _resize_matrix(height, x.shape[2], x.dtype)
    rx = _resize_matrix(width, x.shape[3], x.dtype)
    out = ry @ x.data @ rx.T

    def backward(g):
        return (ry.T @ g @ rx,)

    return Tensor._from_op(out, (x,), backward, "bilinear_resize")


# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh * dilation, sw * dilation),
        writeable=False,
    )
    return view.reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, padded_shape, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    n, c = padded_shape[:2]
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r, q = i * dilation, j * dilation
            out[:, :, r:r + h_span:stride, q:q + w_span:stride] += blocks[i, j]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def _check_conv_shapes(x: Tensor, w: Tensor, spec: ConvSpec, in_ch: int, out_ch: int) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected NCHW input, got shape {x.shape}")
    kh, kw = spec.kernel_hw
    expected = (spec.out_channels, spec.in_channels, kh, kw)
    if w.shape != expected:
        raise ValueError(f"weight shape {w.shape} does not match {expected}")
    if x.shape[1] != in_ch:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {in_ch}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Cross-correlation with stride, zero padding and dilation.

    ``weight`` is ``(out, in, kh, kw)``. Output extent follows
    ``floor((H + 2p - d(k-1) - 1) / s) + 1``.
    """
    _check_conv_shapes(x, weight, spec, spec.in_channels, spec.out_channels)
    n, c, h, w = x.shape
    kh, kw = spec.kernel_hw
    s, p, d = spec.stride, spec.padding, spec.dilation
    ho, wo = spec.output_size(h, w)
    xp = _pad(x.data, p)
    cols = _im2col(xp, kh, kw, s, d, ho, wo)
    wm = weight.data.reshape(spec.out_channels, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _unpad(_col2im(gm @ wm, xp.shape, kh, kw, s, d, ho, wo), p)
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec, output_padding: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d` with the same ``weight`` and ``spec``.

    Maps ``spec.out_channels`` channels back to ``spec.in_channels``; ``bias``
    has length ``spec.in_channels``.
    """
    _check_conv_shapes(x, weight, spec, spec.out_channels, spec.in_channels)
    n, c, h, w = x.shape
    kh, kw = spec.kernel_hw
    s, p, d = spec.stride, spec.padding, spec.dilation
    ho, wo = spec.transpose_output_size(h, w, output_padding)
    padded_shape = (n, spec.in_channels, ho + 2 * p, wo + 2 * p)
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
    wm = weight.data.reshape(spec.out_channels, -1)
    out = _unpad(_col2im(xm @ wm, padded_shape, kh, kw, s, d, h, w), p)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        cols = _im2col(_pad(g, p), kh, kw, s, d, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((cols @ wm.T).reshape(n, h, w, -1).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = (xm.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv_transpose2d")


# normalization


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, as is customary).
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm expects gamma/beta of length {c}")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = centered * invstd
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        invstd = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(1, c, 1, 1)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(1, c, 1, 1)) * invstd
    out = xhat * g4 + b4

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g4
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = invstd / m * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * invstd
        return dx, dgamma, dbeta

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")
