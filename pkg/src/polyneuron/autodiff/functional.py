"""Differentiable primitives for convolutional networks (NCHW layout)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from polyneuron.autodiff.tensor import Tensor
from polyneuron.exceptions import ShapeError


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped ``(out, in)``."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor.from_op(out, parents, backward, "linear")


def _im2col(xp, kh, kw, stride):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation; ``weight`` is ``(out, in, kh, kw)``."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    return Tensor.from_op(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor, size=2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d: spatial shape {(h, w)} not divisible by {size}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return Tensor.from_op(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, size=2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool2d: spatial shape {(h, w)} not divisible by {size}")
    ho, wo = h // size, w // size
    out = x.data.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (g / (size * size),)

    return Tensor.from_op(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return Tensor.from_op(out, (x,), backward, "global_avg_pool")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, mean=None, var=None, eps=1e-5):
    """Normalise per channel.

    With ``mean``/``var`` given (evaluation mode) they are treated as constants;
    otherwise batch statistics are used.  Returns ``(out, batch_mean, batch_var)``.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm2d: input {x.shape} incompatible with scale {gamma.shape}")
    axes = (0, 2, 3)
    training = mean is None
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    shape = (1, -1, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    m = x.shape[0] * x.shape[2] * x.shape[3]

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        scale = (gamma.data * inv).reshape(shape)
        if training:
            gx = scale * (g - gb.reshape(shape) / m - xhat * gg.reshape(shape) / m)
        else:
            gx = scale * g
        return gx.astype(x.dtype, copy=False), gg, gb

    return Tensor.from_op(out, (x, gamma, beta), backward, "batch_norm2d"), mean, var


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((g / n) * p,)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "xent")

