"""Differentiable NN primitives built on :mod:`bnrobust.tensor`.

Convolution uses im2col (cross-correlation, zero padding). Batch norm is a
fused op with a closed-form backward so the tape stays short.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, make_result


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns in (C, kH, kW, N, H', W') order: each slice copy is contiguous along width."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p))) if p else a


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``weight[F,C,kH,kW]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if c != wc:
        raise ShapeError(f"input has {c} channels but kernel expects {wc}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    cols = _im2col(_pad(x.data, padding), kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(f, -1)
    out = np.ascontiguousarray((wmat @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3))
    keep_cols = cols if weight.requires_grad else None

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gw = (gm @ keep_cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and padding <= kh - 1 and padding <= kw - 1 and kh == kw:
                # full correlation with the flipped kernel
                flipped = weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1].reshape(c, -1)
                gcols = _im2col(_pad(g, kh - 1 - padding), kh, kw, 1, h, w)
                gx = np.ascontiguousarray((flipped @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3))
            else:
                dcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
                dxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
                gx = np.ascontiguousarray(
                    dxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
                )
        return gx, gw

    return make_result(out, (x, weight), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight[out, in]``."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        return (
            g @ wd if x.requires_grad else None,
            g.T @ xd if weight.requires_grad else None,
            g.sum(axis=0) if bias is not None and bias.requires_grad else None,
        )

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"pool size {size} larger than input {h}x{w}")
    xs = x.data[:, :, : ho * size, : wo * size]
    out = xs.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        gx[:, :, : ho * size, : wo * size] = spread
        return (gx,)

    return make_result(out.astype(x.dtype), (x,), backward)


def subsample_ceil(x: Tensor) -> Tensor:
    """Stride-2 average pooling that keeps a partial last window (matches a stride-2 conv's output size)."""
    n, c, h, w = x.shape
    if h % 2 == 0 and w % 2 == 0:
        return avg_pool2d(x, 2)
    padded = pad2d(x, 0, h % 2, 0, w % 2)
    n, c, hh, ww = padded.shape
    ones = np.zeros((1, 1, hh, ww), dtype=x.dtype)
    ones[:, :, :h, :w] = 1
    counts = ones.reshape(1, 1, hh // 2, 2, ww // 2, 2).sum(axis=(3, 5))
    pooled = avg_pool2d(padded, 2)
    return pooled * (4.0 / counts).astype(x.dtype)


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    n, c, h, w = x.shape
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(g[:, :, top : top + h, left : left + w]),))


def pad_channels(x: Tensor, out_channels: int) -> Tensor:
    """Zero-extend the channel dimension (parameter-free shortcut expansion)."""
    n, c, h, w = x.shape
    if out_channels < c:
        raise ShapeError(f"cannot shrink {c} channels to {out_channels}")
    lo = (out_channels - c) // 2
    out = np.zeros((n, out_channels, h, w), dtype=x.dtype)
    out[:, lo : lo + c] = x.data
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(g[:, lo : lo + c]),))


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return make_result(out.astype(x.dtype), (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalize the input and, when
    ``update_stats`` is set, the running buffers are updated in place with
    ``running = (1 - momentum) * running + momentum * batch`` (biased
    variance). In eval mode the output is the affine map ``m * x + b`` with
    ``m = gamma / sqrt(var + eps)`` and ``b = beta - m * mean``.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects [N,C] or [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError(f"batch_norm: {c} input channels vs layer width {gamma.shape[0]}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    g_ = gamma.data.reshape(bshape)

    if training:
        count = xd.size // c
        if count < 2:
            raise ShapeError("batch_norm in train mode needs N*H*W >= 2 per channel")
        mean = xd.mean(axis=axes)
        centered = xd - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.reshape(bshape).astype(xd.dtype)
        out = xhat * g_ + beta.data.reshape(bshape)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var

        def backward(g):
            ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gbeta = g.sum(axis=axes) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                dxhat = g * g_
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (dxhat - s1 / count - xhat * (s2 / count)) * inv_std.reshape(bshape).astype(xd.dtype)
            return gx, ggamma, gbeta

        return make_result(out.astype(xd.dtype), (x, gamma, beta), backward)

    inv_std = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype)
    m = gamma.data * inv_std
    b = beta.data - m * running_mean.astype(xd.dtype)
    out = xd * m.reshape(bshape) + b.reshape(bshape)

    def backward_eval(g):
        gx = g * m.reshape(bshape) if x.requires_grad else None
        ggamma = None
        if gamma.requires_grad:
            xn = (xd - running_mean.astype(xd.dtype).reshape(bshape)) * inv_std.reshape(bshape)
            ggamma = (g * xn).sum(axis=axes)
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_result(out.astype(xd.dtype), (x, gamma, beta), backward_eval)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy, stabilized by max-subtraction.

    ``reduction`` is ``"mean"`` (batch average) or ``"sum"``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N,K] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}); got range [{labels.min()}, {labels.max()}]")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    logp = log_softmax_np(logits.data)
    rows = np.arange(n)
    total = -logp[rows, labels].sum()
    scale = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(total * scale, dtype=logits.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return ((d * (g * scale)).astype(logits.dtype),)

    return make_result(out, (logits,), backward)


def per_example_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    """Non-differentiable per-example loss, used for bookkeeping."""
    logp = log_softmax_np(np.asarray(logits, dtype=np.float64))
    return -logp[np.arange(len(labels)), np.asarray(labels)]
