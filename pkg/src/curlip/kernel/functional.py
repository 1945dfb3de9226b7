"""Forward/backward primitives used by the encoder, CLMSA and BMMC layers."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import erf

from ..errors import DegenerateVector, ShapeMismatch
from .tensor import Tensor, record_kink

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


# -- activations --------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    """max(x, 0); the derivative at exactly 0 is taken as 0."""
    mask = x.data > 0
    record_kink(mask)
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))
    out = (x.data * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return Tensor.from_op(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        gz = np.where(np.isfinite(out), g, 0.0).astype(x.dtype)
        return (gz - np.exp(out) * gz.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p) so inference is identity."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,))


# -- normalisation ------------------------------------------------------------

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    d = x.shape[-1]
    _check(gamma.shape == (d,) and beta.shape == (d,),
           f"layernorm affine shapes {gamma.shape}/{beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor.from_op(out, (x, gamma, beta), backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over every axis except axis 1 (channels).

    Works for (B, C) and (B, C, H, W) inputs.  In training mode batch
    statistics are used and the running buffers are updated in place.
    """
    _check(x.ndim >= 2, f"batchnorm needs (B, C, ...) input, got {x.shape}")
    c = x.shape[1]
    _check(gamma.shape == (c,), f"batchnorm gamma {gamma.shape} vs channels {c}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    g_b = gamma.data.reshape(bshape)
    b_b = beta.data.reshape(bshape)

    if not training:
        inv_std = 1.0 / np.sqrt(running_var.data.reshape(bshape) + eps)
        xhat = (x.data - running_mean.data.reshape(bshape)) * inv_std
        out = xhat * g_b + b_b

        def backward_eval(g):
            return g * g_b * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return Tensor.from_op(out.astype(x.dtype), (x, gamma, beta), backward_eval)

    n = x.data.size // c
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * g_b + b_b

    unbiased = var.reshape(c) * (n / max(n - 1, 1))
    running_mean.data *= 1.0 - momentum
    running_mean.data += momentum * mu.reshape(c)
    running_var.data *= 1.0 - momentum
    running_var.data += momentum * unbiased

    def backward(g):
        dxhat = g * g_b
        dx = inv_std * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor.from_op(out, (x, gamma, beta), backward)


def l2_normalize(x: Tensor, axis: int = -1, where: np.ndarray | None = None) -> Tensor:
    """Scale vectors along ``axis`` to unit norm.

    ``where`` (broadcastable boolean, the reduced axis dropped) limits the
    zero-norm check to the vectors that matter; other zero vectors map to 0.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    zero = norm == 0
    relevant = zero if where is None else zero & np.expand_dims(where, axis)
    if np.any(relevant):
        raise DegenerateVector("cannot normalise a zero-norm vector")
    safe = np.where(zero, 1.0, norm).astype(x.dtype)
    y = x.data / safe

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / safe,)

    return Tensor.from_op(y, (x,), backward)


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """u.v / (|u| |v|) for two equal-length vectors, as a scalar tensor."""
    _check(u.shape == v.shape, f"cosine_sim shapes differ: {u.shape} vs {v.shape}")
    return (l2_normalize(u) * l2_normalize(v)).sum()


# -- structure ----------------------------------------------------------------

def masked_fill(x: Tensor, keep: np.ndarray, value: float = -np.inf) -> Tensor:
    """Replace entries where ``keep`` is False by a constant."""
    keep = np.broadcast_to(keep, x.shape)
    out = np.where(keep, x.data, np.asarray(value, dtype=x.dtype))
    return Tensor.from_op(out, (x,), lambda g: (np.where(keep, g, 0).astype(g.dtype),))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return Tensor.from_op(weight.data[ids], (weight,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat along {axis}: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return Tensor.from_op(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    _check(len(shapes) == 1, f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(out, tensors, backward)


def pad_axis(x: Tensor, axis: int, after: int) -> Tensor:
    """Zero-pad ``after`` entries at the end of ``axis``."""
    if after == 0:
        return x
    widths = [(0, 0)] * x.ndim
    widths[axis] = (0, after)
    n = x.shape[axis]
    return Tensor.from_op(np.pad(x.data, widths), (x,),
                          lambda g: (np.take(g, np.arange(n), axis=axis),))


# -- convolution and pooling ------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""
    _check(x.ndim == 4, f"conv2d input must be (B, C, H, W), got {x.shape}")
    _check(weight.ndim == 4 and weight.shape[2:] == (3, 3),
           f"conv2d weight must be (C_out, C_in, 3, 3), got {weight.shape}")
    _check(weight.shape[1] == x.shape[1],
           f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    b, cin, h, w = x.shape
    cout = weight.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # per-example im2col: rows ordered (C_in, ky, kx) to match weight.reshape(C_out, -1)
    cols = np.empty((b, cin, 3, 3, h, w), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + h, kx:kx + w]
    cols = cols.reshape(b, cin * 9, h * w)
    wmat = weight.data.reshape(cout, cin * 9)
    acc = np.matmul(wmat, cols)
    if bias is not None:
        acc += bias.data[:, None]
    out = acc.reshape(b, cout, h, w)

    def backward(g):
        gm = g.reshape(b, cout, h * w)
        gw = np.einsum("bop,bkp->ok", gm, cols, optimize=True).reshape(weight.shape)
        gcols = np.matmul(wmat.T, gm).reshape(b, cin, 3, 3, h, w)
        gxp = np.zeros((b, cin, h + 2, w + 2), dtype=g.dtype)
        for ky in range(3):
            for kx in range(3):
                gxp[:, :, ky:ky + h, kx:kx + w] += gcols[:, :, ky, kx]
        grads = [gxp[:, :, 1:-1, 1:-1].copy(), gw]
        if bias is not None:
            grads.append(gm.sum(axis=(0, 2)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def adaptive_pool_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Averaging matrix for adaptive pooling along one axis.

    Row i averages inputs in [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out)).
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -((-(i + 1) * n_in) // n_out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def adaptive_avg_pool2d(x: Tensor, out_size: tuple[int, int]) -> Tensor:
    """Adaptive average pooling of the last two axes to ``out_size``.

    The bins are separable, so pooling is ``R @ x @ C.T`` with fixed
    row/column averaging matrices.
    """
    _check(x.ndim == 4, f"adaptive_avg_pool2d input must be 4-d, got {x.shape}")
    p, q = out_size
    h, w = x.shape[2:]
    _check(p <= h and q <= w, f"pool target {out_size} exceeds input spatial dims {(h, w)}")
    rows = adaptive_pool_matrix(h, p, x.dtype)
    cols = adaptive_pool_matrix(w, q, x.dtype)
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return Tensor.from_op(out, (x,), lambda g: (np.matmul(np.matmul(rows.T, g), cols),))


# -- losses -------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    _check(logits.ndim == 2, f"cross_entropy expects (N, K) logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    _check(targets.shape == (n,), f"targets {targets.shape} vs logits {logits.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    lsm = shifted - lse
    rows = np.arange(n)
    loss = -lsm[rows, targets].mean()

    def backward(g):
        grad = np.exp(lsm)
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
