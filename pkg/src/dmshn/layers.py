"""Convolutional building blocks and bilinear resampling.

conv2d / conv_transpose2d are computed as one small matmul per kernel tap
(k*k GEMMs over the channel axis), which keeps peak memory near the input
size even at full image resolution; the two directions are exact linear
adjoints of each other. All resamplers use the half-pixel-center convention
(sample position (i + 0.5) * scale - 0.5, clamped) and are written in lerp
form, which maps constant images to the same constant bitwise.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import BadTarget, OddDimension, ShapeMismatch
from .tensor import Tensor, _record


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def kaiming_uniform(rng: T.Rng, shape, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, shape)


class Conv2dLayer:
    """3x3 convolution (cross-correlation); stride 1 preserves h, w."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1, kernel: int = 3,
                 padding: int = 1, rng: T.Rng | None = None):
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        self.kernel = kernel
        self.padding = padding
        fan_in = c_in * kernel * kernel
        w = (kaiming_uniform(rng, (c_out, c_in, kernel, kernel), fan_in)
             if rng is not None else np.zeros((c_out, c_in, kernel, kernel), np.float32))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, c_out, 1, 1), np.float32), requires_grad=True)

    def named_params(self, prefix: str):
        yield prefix + ".weight", self.weight
        yield prefix + ".bias", self.bias


class ConvT2dLayer:
    """Transposed convolution for exact 2x upsampling (stride 2).

    Weight layout is (c_in, c_out, k, k). Default kernel 4 / padding 1 covers
    the output uniformly; kernel 3 is supported with the implied one-pixel
    output padding so the result is still exactly 2h x 2w.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int = 4, rng: T.Rng | None = None):
        if kernel not in (3, 4):
            raise ValueError("convt kernel must be 3 or 4")
        self.c_in = c_in
        self.c_out = c_out
        self.stride = 2
        self.kernel = kernel
        self.padding = 1
        fan_in = c_in * kernel * kernel
        w = (kaiming_uniform(rng, (c_in, c_out, kernel, kernel), fan_in)
             if rng is not None else np.zeros((c_in, c_out, kernel, kernel), np.float32))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, c_out, 1, 1), np.float32), requires_grad=True)

    def named_params(self, prefix: str):
        yield prefix + ".weight", self.weight
        yield prefix + ".bias", self.bias


class ResidualBlock:
    """conv -> ReLU -> conv with identity skip; no activation after the add."""

    def __init__(self, channels: int, rng: T.Rng | None = None):
        self.conv1 = Conv2dLayer(channels, channels, rng=rng)
        self.conv2 = Conv2dLayer(channels, channels, rng=rng)

    def named_params(self, prefix: str):
        yield from self.conv1.named_params(prefix + ".conv1")
        yield from self.conv2.named_params(prefix + ".conv2")


# ---------------------------------------------------------------------------
# Convolution kernels
# ---------------------------------------------------------------------------


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, layer: Conv2dLayer) -> Tensor:
    n, c, h, w = x.shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    if c != layer.c_in:
        raise ShapeMismatch(f"conv2d: input has {c} channels, layer expects {layer.c_in}")
    if h < k or w < k:
        raise ShapeMismatch(f"conv2d: spatial dims {h}x{w} smaller than kernel {k}")
    weight, bias = layer.weight, layer.bias
    wd = weight.data.astype(x.dtype, copy=False)
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    xp = _pad_hw(x.data, p)
    acc = np.zeros((n, layer.c_out, oh * ow), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            xs = xp[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s].reshape(n, c, -1)
            acc += np.matmul(wd[:, :, ki, kj], xs)
    out = acc.reshape(n, layer.c_out, oh, ow)
    out += bias.data.astype(x.dtype, copy=False)

    def backward(g):
        gmat = g.reshape(n, layer.c_out, oh * ow)
        gw = np.empty_like(wd)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                xs = xp[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s].reshape(n, c, -1)
                gw[:, :, ki, kj] = np.matmul(gmat, xs.transpose(0, 2, 1)).sum(axis=0)
                gtap = np.matmul(wd[:, :, ki, kj].T, gmat).reshape(n, c, oh, ow)
                gxp[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s] += gtap
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        gb = g.sum(axis=(0, 2, 3)).reshape(bias.data.shape)
        return np.ascontiguousarray(gx), gw.astype(weight.dtype, copy=False), gb
    return _record(out, (x, weight, bias), backward, "conv2d")


def conv_transpose2d(x: Tensor, layer: ConvT2dLayer) -> Tensor:
    n, c, h, w = x.shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    if c != layer.c_in:
        raise ShapeMismatch(
            f"conv_transpose2d: input has {c} channels, layer expects {layer.c_in}")
    weight, bias = layer.weight, layer.bias
    wd = weight.data.astype(x.dtype, copy=False)
    oh, ow = 2 * h, 2 * w
    xmat = x.data.reshape(n, c, h * w)
    canvas = np.zeros((n, layer.c_out, oh + 2 * p, ow + 2 * p), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            tap = np.matmul(wd[:, :, ki, kj].T, xmat).reshape(n, layer.c_out, h, w)
            canvas[:, :, ki:ki + s * h:s, kj:kj + s * w:s] += tap
    out = canvas[:, :, p:p + oh, p:p + ow] if p else canvas
    out = np.ascontiguousarray(out)
    out += bias.data.astype(x.dtype, copy=False)

    def backward(g):
        gp = _pad_hw(g, p)
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        gweight = np.empty_like(wd)
        for ki in range(k):
            for kj in range(k):
                gs = gp[:, :, ki:ki + s * h:s, kj:kj + s * w:s].reshape(n, layer.c_out, -1)
                gx += np.matmul(wd[:, :, ki, kj], gs)
                gweight[:, :, ki, kj] = np.matmul(xmat, gs.transpose(0, 2, 1)).sum(axis=0)
        gbias = g.sum(axis=(0, 2, 3)).reshape(bias.data.shape)
        return (gx.reshape(n, c, h, w),
                gweight.astype(weight.dtype, copy=False), gbias)

    return _record(out, (x, weight, bias), backward, "conv_transpose2d")


def residual_block(x: Tensor, block: ResidualBlock) -> Tensor:
    if x.shape[1] != block.conv1.c_in:
        raise ShapeMismatch(
            f"residual_block: input has {x.shape[1]} channels, block expects {block.conv1.c_in}")
    y = conv2d(x, block.conv1)
    y = T.relu(y)
    y = conv2d(y, block.conv2)
    return T.add(x, y)


# ---------------------------------------------------------------------------
# Bilinear resampling (half-pixel centers)
# ---------------------------------------------------------------------------


def _axis_weights(src: int, dst: int):
    """Source gather indices and lerp fractions for one axis."""
    scale = src / dst
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    return i0, i1, frac


def _resize_axis(x: np.ndarray, dst: int, axis: int) -> np.ndarray:
    src = x.shape[axis]
    if dst == src:
        return x
    i0, i1, frac = _axis_weights(src, dst)
    x0 = np.take(x, i0, axis=axis)
    x1 = np.take(x, i1, axis=axis)
    fshape = [1] * x.ndim
    fshape[axis] = dst
    f = frac.astype(x.dtype).reshape(fshape)
    # lerp form keeps constants exactly constant
    return x0 + f * (x1 - x0)


def resize_bilinear_array(x: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Numpy-level arbitrary resize (rows then columns); forward only."""
    if h2 < 1 or w2 < 1:
        raise BadTarget(f"resize target {h2}x{w2}")
    out = _resize_axis(x, h2, axis=2)
    out = _resize_axis(out, w2, axis=3)
    return np.ascontiguousarray(out)


def resize_bilinear(x: Tensor, h2: int, w2: int) -> Tensor:
    """Arbitrary-size resample; identity (bitwise) when dims already match.

    Lives outside the training graph: no backward rule is recorded.
    """
    if (h2, w2) == x.shape[2:]:
        return Tensor(x.data.copy())
    return Tensor(resize_bilinear_array(x.data, h2, w2))


def _down2_axis(x: np.ndarray, axis: int) -> np.ndarray:
    # factor-2 half-pixel downsample degenerates to pairwise means
    a = x.take(np.arange(0, x.shape[axis], 2), axis=axis)
    b = x.take(np.arange(1, x.shape[axis], 2), axis=axis)
    return x.dtype.type(0.5) * (a + b)


def downsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x downsample; requires even spatial dims."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise OddDimension(f"downsample2x on {h}x{w}")
    out = _down2_axis(_down2_axis(x.data, 2), 3)

    def backward(g):
        half = g.dtype.type(0.5)
        gr = np.empty((n, c, h, w // 2), dtype=g.dtype)
        gr[:, :, 0::2], gr[:, :, 1::2] = half * g, half * g
        gx = np.empty((n, c, h, w), dtype=g.dtype)
        gx[:, :, :, 0::2], gx[:, :, :, 1::2] = half * gr, half * gr
        return (gx,)

    return _record(out, (x,), backward, "downsample2x")


def _up2_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """One-axis 2x upsample, half-pixel centers, lerp form."""
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    out = np.empty(x.shape[:-1] + (2 * n,), dtype=x.dtype)
    q = x.dtype.type(0.25)
    # out[2m]   = lerp(x[m-1], x[m], 0.75), clamped at the left edge
    # out[2m+1] = lerp(x[m], x[m+1], 0.25), clamped at the right edge
    out[..., 0] = x[..., 0]
    out[..., 2::2] = x[..., 1:] - q * (x[..., 1:] - x[..., :-1])
    out[..., 1:-1:2] = x[..., :-1] + q * (x[..., 1:] - x[..., :-1])
    out[..., -1] = x[..., -1]
    return np.ascontiguousarray(np.moveaxis(out, -1, axis))


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    n = g.shape[-1] // 2
    gx = np.zeros(g.shape[:-1] + (n,), dtype=g.dtype)
    e, o = g[..., 0::2], g[..., 1::2]
    # even outputs: weight 0.25 on x[m-1], 0.75 on x[m] (m >= 1); out[0] -> x[0]
    gx[..., 0] += e[..., 0]
    gx[..., 1:] += 0.75 * e[..., 1:]
    gx[..., :-1] += 0.25 * e[..., 1:]
    # odd outputs: weight 0.75 on x[m], 0.25 on x[m+1] (m < n-1); out[-1] -> x[-1]
    gx[..., :-1] += 0.75 * o[..., :-1]
    gx[..., 1:] += 0.25 * o[..., :-1]
    gx[..., -1] += o[..., -1]
    return np.ascontiguousarray(np.moveaxis(gx, -1, axis))


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsample, differentiable."""
    out = _up2_axis(_up2_axis(x.data, 2), 3)

    def backward(g):
        return (_up2_axis_adjoint(_up2_axis_adjoint(g, 3), 2),)

    return _record(out, (x,), backward, "upsample2x")


def avg_pool2x(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; odd trailing row/col is dropped."""
    n, c, h, w = x.shape
    he, we = h - h % 2, w - w % 2
    xd = x.data[:, :, :he, :we]
    out = 0.25 * (xd[:, :, 0::2, 0::2] + xd[:, :, 0::2, 1::2]
                  + xd[:, :, 1::2, 0::2] + xd[:, :, 1::2, 1::2])

    def backward(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        q = 0.25 * g
        gx[:, :, 0:he:2, 0:we:2] = q
        gx[:, :, 0:he:2, 1:we:2] = q
        gx[:, :, 1:he:2, 0:we:2] = q
        gx[:, :, 1:he:2, 1:we:2] = q
        return (gx,)

    return _record(np.ascontiguousarray(out), (x,), backward, "avg_pool2x")
