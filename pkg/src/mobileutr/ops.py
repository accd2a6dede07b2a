"""Differentiable operators on :class:`~mobileutr.tensor.Tensor`.

Each op computes its forward result with numpy and registers a closure that
maps the output gradient to input gradients. Convolutions use the
cross-correlation convention and zero padding.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, InputError, NumericError, StateError
from .tensor import Tensor, _tally, check_axis, record


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _lift(a, b):
    """Promote python/numpy operands so both sides are Tensors of one dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return record(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return record(out, (x,), lambda g: (g * out * (1 - out),))


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))
    out = (xd * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype),)

    return record(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(check_axis(a, x.ndim) for a in axes)
    inv = tuple(np.argsort(axes))
    return record(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    axis = check_axis(axis, tensors[0].ndim)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def subsample(x: Tensor, stride: int) -> Tensor:
    """Pick every ``stride``-th row and column of an N,C,H,W map."""
    if stride == 1:
        return x
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, :, ::stride, ::stride] = g
        return (gx,)

    return record(np.ascontiguousarray(x.data[:, :, ::stride, ::stride]), (x,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    _tally("matmul", out.size * ad.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record(out, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = check_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), backward)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise over one axis, then apply a per-feature affine transform."""
    axis = check_axis(axis, x.ndim)
    n = x.shape[axis]
    if weight.shape != (n,) or bias.shape != (n,):
        raise ConfigurationError(f"layer_norm affine must have shape ({n},)")
    bshape = [1] * x.ndim
    bshape[axis] = n
    w = weight.data.reshape(bshape)
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * w + bias.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gw = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gh = g * w
        gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        return gx, gw, gb

    return record(out.astype(x.dtype), (x, weight, bias), backward)


# ---------------------------------------------------------------- convolutions

def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NumericError(f"{op} produced non-finite values")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation of an N,C,H,W input with zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigurationError(f"conv2d expects rank-4 input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigurationError(f"channels ({cin}->{cout}) not divisible by groups={groups}")
    if cpg != cin // groups:
        raise ConfigurationError(f"weight expects {cpg * groups} input channels, input has {cin}")
    if b is not None and b.shape != (cout,):
        raise ConfigurationError(f"bias shape {b.shape} != ({cout},)")
    hp, wp = h + 2 * ph, wd + 2 * pw
    if hp < kh or wp < kw:
        raise ConfigurationError(f"padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    _tally("conv2d", n * cout * ho * wo * cpg * kh * kw)

    xd = x.data
    if ph or pw:
        xp = np.zeros((n, cin, hp, wp), dtype=xd.dtype)
        xp[:, :, ph:ph + h, pw:pw + wd] = xd
    else:
        xp = xd

    def tap(arr, i, j):
        return arr[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]

    wd_ = w.data
    if groups == 1 and kh == 1 and kw == 1 and sh == 1 and sw == 1 and not (ph or pw):
        out, backward = _pointwise(xd, wd_)
    elif groups == cin and cpg == 1 and cout == cin:
        out = np.zeros((n, cout, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += tap(xp, i, j) * wd_[None, :, 0, i, j, None, None]

        def backward(g):
            gxp = np.zeros_like(xp)
            gw = np.empty_like(wd_)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (g * tap(xp, i, j)).sum(axis=(0, 2, 3))
                    tap(gxp, i, j)[...] += g * wd_[None, :, 0, i, j, None, None]
            return gxp, gw
    else:
        cols = np.empty((n, groups, cpg, kh, kw, ho, wo), dtype=xd.dtype)
        xg = xp.reshape(n, groups, cpg, hp, wp)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j] = xg[:, :, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
        cols = cols.reshape(n, groups, cpg * kh * kw, ho * wo)
        wmat = wd_.reshape(groups, cout // groups, cpg * kh * kw)
        out = np.matmul(wmat[None], cols).reshape(n, cout, ho, wo)

        def backward(g):
            gg = g.reshape(n, groups, cout // groups, ho * wo)
            gw = np.einsum("ngop,ngkp->gok", gg, cols, optimize=True).reshape(wd_.shape)
            gcols = np.matmul(np.swapaxes(wmat, 1, 2)[None], gg).reshape(n, groups, cpg, kh, kw, ho, wo)
            gxp = np.zeros((n, groups, cpg, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += gcols[:, :, :, i, j]
            return gxp.reshape(n, cin, hp, wp), gw

    if b is not None:
        out = out + b.data[None, :, None, None]
    _check_finite(out, "conv2d")

    def full_backward(g):
        gxp, gw = backward(g)
        gx = gxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return record(out, inputs, full_backward)


def _pointwise(xd: np.ndarray, wd: np.ndarray):
    n, cin, h, w = xd.shape
    cout = wd.shape[0]
    wmat = wd.reshape(cout, cin)
    xr = xd.reshape(n, cin, h * w)
    out = np.matmul(wmat, xr).reshape(n, cout, h, w)

    def backward(g):
        gr = g.reshape(n, cout, h * w)
        gw = np.einsum("nop,nip->oi", gr, xr, optimize=True).reshape(wd.shape)
        gx = np.matmul(wmat.T, gr).reshape(xd.shape)
        return gx, gw

    return out, backward


def conv2d_transpose(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=2) -> Tensor:
    """Transposed convolution with kernel == stride (non-overlapping taps).

    ``w`` has shape (Cin, Cout, k, k), the same array a strided conv2d going
    the other way would use, so this op is that conv's exact adjoint.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigurationError("conv2d_transpose expects rank-4 input and weight")
    n, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    sh, sw = _pair(stride)
    if (kh, kw) != (sh, sw):
        raise ConfigurationError(f"conv2d_transpose requires kernel == stride, got {kh}x{kw} vs {sh}x{sw}")
    if wcin != cin:
        raise ConfigurationError(f"weight expects {wcin} input channels, input has {cin}")
    if b is not None and b.shape != (cout,):
        raise ConfigurationError(f"bias shape {b.shape} != ({cout},)")
    _tally("conv2d_transpose", n * cin * h * wd * cout * kh * kw)
    xd, wd_ = x.data, w.data
    # (n, h, w, cin) @ (cin, cout*kh*kw)
    xr = xd.transpose(0, 2, 3, 1).reshape(n * h * wd, cin)
    wmat = wd_.reshape(cin, cout * kh * kw)
    y = (xr @ wmat).reshape(n, h, wd, cout, kh, kw)
    out = np.ascontiguousarray(y.transpose(0, 3, 1, 4, 2, 5)).reshape(n, cout, h * kh, wd * kw)
    if b is not None:
        out = out + b.data[None, :, None, None]
    _check_finite(out, "conv2d_transpose")

    def backward(g):
        gy = g.reshape(n, cout, h, kh, wd, kw).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * wd, cout * kh * kw)
        gx = (gy @ wmat.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
        gw = (xr.T @ gy).reshape(wd_.shape)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(gx), gw, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return record(out, inputs, backward)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first element in row-major order."""
    if window != stride:
        raise ConfigurationError("maxpool2d supports window == stride only")
    n, c, h, w = x.shape
    k = window
    if h % k or w % k:
        raise ConfigurationError(f"spatial dims {h}x{w} not divisible by pooling window {k}")
    win = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record(np.ascontiguousarray(out), (x,), backward)


def _up1d(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up1d_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    gx = 0.75 * (ge + go)
    gx[..., :-1] += 0.25 * ge[..., 1:]
    gx[..., 0] += 0.25 * ge[..., 0]
    gx[..., 1:] += 0.25 * go[..., :-1]
    gx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(gx, -1, axis)


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """2x bilinear upsampling, half-pixel centres, edge-clamped."""
    if x.ndim != 4:
        raise ConfigurationError(f"bilinear_upsample2x expects N,C,H,W input, got {x.shape}")
    out = _up1d(_up1d(x.data, 2), 3)

    def backward(g):
        return (np.ascontiguousarray(_up1d_adjoint(_up1d_adjoint(g, 3), 2)),)

    return record(np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------- normalisation

def batchnorm2d(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Batch normalisation over (N, H, W) per channel.

    In training mode the running statistics are updated in place (unbiased
    variance, exponential moving average with ``momentum``).
    """
    n, c, h, w = x.shape
    if weight.shape != (c,) or running_mean.shape != (c,):
        raise ConfigurationError(f"batchnorm state has {weight.shape[0]} channels, input has {c}")
    if np.any(running_var < 0):
        raise StateError("negative running variance in batchnorm state")
    xd = x.data
    if training:
        m = n * h * w
        if m < 2:
            raise InputError("batchnorm2d in train mode needs N*H*W >= 2")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]
    gam = weight.data[None, :, None, None]
    out = xhat * gam + bias.data[None, :, None, None]

    def backward(g):
        gw = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gh = g * gam
        if training:
            gx = inv[None, :, None, None] * (
                gh - gh.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (gh * xhat).mean(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gh * inv[None, :, None, None]
        return gx, gw, gb

    return record(out, (x, weight, bias), backward)


# ---------------------------------------------------------------- losses

def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy evaluated stably from logits."""
    z = logits.data
    y = np.asarray(target, dtype=z.dtype)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.mean(), dtype=z.dtype)
    count = z.size

    def backward(g):
        e = np.exp(-np.abs(z))
        sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return ((g * (sig - y) / count).astype(z.dtype),)

    return record(out, (logits,), backward)
