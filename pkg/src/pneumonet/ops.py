"""Structured neural-net ops on 4-D (N, C, H, W) tensors.

Convolution is im2col plus one GEMM per call; its backward is two GEMMs and a
kernel-offset scatter loop, so everything heavy runs inside BLAS. Max pooling
routes gradients to the first row-major argmax of each window. Batch norm
carries its running statistics in a small mutable holder that the autodiff
graph never sees.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, _accumulate


def _require_4d(t: Tensor, name: str):
    if t.data.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N,C,H,W), got {t.shape}")


# -- convolution -----------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """(N,C,Hp,Wp) -> (N*Ho*Wo, C*kh*kw) patch matrix plus (Ho, Wo)."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]          # (N, C, Ho, Wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate x (N,Cin,H,W) with weight (Cout,Cin,kh,kw)."""
    _require_4d(x, "conv2d input")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T                          # (N*Ho*Wo, Cout)
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        if bias is not None:
            _accumulate(bias, gmat.sum(axis=0))
        if weight.requires_grad:
            # patch matrix is rebuilt here instead of captured: it is kh*kw
            # times larger than the input and would dominate memory
            cols_b, _, _ = _im2col(xp, kh, kw, stride)
            _accumulate(weight, (gmat.T @ cols_b).reshape(weight.shape))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
            dcols = dcols.transpose(0, 3, 1, 2, 4, 5)   # (N,C,Ho,Wo,kh,kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho * stride:stride,
                        j:j + wo * stride:stride] += dcols[:, :, :, :, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            _accumulate(x, dx)

    return Tensor.from_op(out, parents, bwd, "conv2d")


# -- pooling and resampling -------------------------------------------------------


def maxpool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pool (size == stride); ties go to the first
    window element in row-major order."""
    _require_4d(x, "maxpool2d input")
    if size != stride:
        raise ShapeError("maxpool2d supports size == stride only")
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise ShapeError(
            f"maxpool2d needs H,W divisible by {stride}, got {h}x{w}")
    ho, wo = h // stride, w // stride
    # (N,C,Ho,Wo,size*size) with the last axis in row-major window order
    xr = x.data.reshape(n, c, ho, stride, wo, stride)
    xr = np.ascontiguousarray(xr.transpose(0, 1, 2, 4, 3, 5)).reshape(
        n, c, ho, wo, stride * stride)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dxr = np.zeros((n, c, ho, wo, stride * stride), dtype=g.dtype)
        np.put_along_axis(dxr, idx[..., None], g[..., None], axis=-1)
        dx = dxr.reshape(n, c, ho, wo, stride, stride).transpose(0, 1, 2, 4, 3, 5)
        _accumulate(x, dx.reshape(n, c, h, w))

    return Tensor.from_op(out, (x,), bwd, "maxpool2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    _require_4d(x, "upsample input")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        _accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor.from_op(out, (x,), bwd, "upsample_nearest2x")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two feature maps along the channel axis, a first."""
    _require_4d(a, "concat input a")
    _require_4d(b, "concat input b")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(
            f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        _accumulate(a, g[:, :ca])
        _accumulate(b, g[:, ca:])

    return Tensor.from_op(out, (a, b), bwd, "concat_channels")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    _require_4d(x, "global_avg_pool input")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        _accumulate(x, np.broadcast_to(
            g[:, :, None, None] / (h * w), x.shape).astype(g.dtype))

    return Tensor.from_op(out, (x,), bwd, "global_avg_pool")


# -- dense ----------------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: (N,F) @ (F,K) + (K,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(
            f"dense expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"dense inner dims differ: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(
                f"dense bias must have shape ({weight.shape[1]},), got {bias.shape}")
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        _accumulate(x, g @ weight.data.T)
        _accumulate(weight, x.data.T @ g)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    return Tensor.from_op(out, parents, bwd, "dense")


def flatten2d(x: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(rest)) view-preserving reshape."""
    n = x.shape[0]
    rest = int(np.prod(x.shape[1:])) if x.data.ndim > 1 else 1
    out = x.data.reshape(n, rest)

    def bwd(g):
        _accumulate(x, g.reshape(x.shape))

    return Tensor.from_op(out, (x,), bwd, "flatten2d")


# -- batch normalization -----------------------------------------------------------


class RunningStats:
    """Exponential running mean/variance for one batch-norm layer.

    Not part of the autodiff graph; updated in place during train-mode
    forward passes. `initialized` stays False until the first update, and
    eval mode refuses to run before then.
    """

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.initialized = False

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray,
               momentum: float):
        self.mean = momentum * self.mean + (1.0 - momentum) * batch_mean.astype(self.mean.dtype)
        self.var = momentum * self.var + (1.0 - momentum) * batch_var.astype(self.var.dtype)
        self.initialized = True


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
                training: bool, eps: float = 1e-5,
                momentum: float = 0.9) -> Tensor:
    """Per-channel normalization over (N,H,W), then affine gamma/beta.

    Train mode uses biased batch variance and folds it into `stats`; eval
    mode normalizes with the stored running statistics.
    """
    _require_4d(x, "batchnorm input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm gamma/beta must have shape ({c},), "
            f"got {gamma.shape} and {beta.shape}")

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))     # biased, matches normalization
        stats.update(mean, var, momentum)
    else:
        if not stats.initialized:
            raise ShapeError(
                "batchnorm eval mode before any training update; "
                "running statistics are uninitialized")
        mean = stats.mean.astype(x.data.dtype)
        var = stats.var.astype(x.data.dtype)

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * ivar[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            # batch statistics depend on x, so their gradients feed back
            m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = ivar[None, :, None, None] * (dxhat - m1 - xhat * m2)
        else:
            dx = dxhat * ivar[None, :, None, None]
        _accumulate(x, dx)

    return Tensor.from_op(out, (x, gamma, beta), bwd, "batchnorm2d")
