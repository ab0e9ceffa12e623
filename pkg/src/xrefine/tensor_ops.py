"""Differentiable numpy primitives used by the refinement network.

Every forward function returns ``(output, cache)``; the matching ``*_backward``
function takes that cache and the upstream gradient. There is no graph engine:
the model module chains these calls explicitly in both directions.

Batched inputs carry a leading batch axis. All matrix products are done as
stacked (per-sample) matmuls so that results for one sample do not depend on
how many other samples share the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _promote(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ValueError(f"expected {ndim - 1}-d or {ndim}-d input, got shape {x.shape}")
    return x, False


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def conv2d_nhwc(x, kernel, bias, padded):
    """3x3 cross-correlation on channels-last input (N,H,W,C_in).

    ``kernel`` is (C_out, C_in, 3, 3). ``padded=True`` zero-pads by one pixel
    and keeps the spatial size, otherwise each spatial dimension shrinks by two.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected (N,H,W,C) input, got shape {x.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise ValueError(f"kernel must be 3x3, got {kh}x{kw}")
    if x.shape[3] != c_in:
        raise ValueError(f"input has {x.shape[3]} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")
    if padded:
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    else:
        if x.shape[1] < 3 or x.shape[2] < 3:
            raise ValueError(f"input {x.shape[1]}x{x.shape[2]} smaller than 3x3 kernel")
        xp = x
    n = x.shape[0]
    h_out, w_out = xp.shape[1] - 2, xp.shape[2] - 2
    # columns ordered (ki, kj, c_in) along the last axis
    cols = np.concatenate(
        [xp[:, i:i + h_out, j:j + w_out, :] for i in range(3) for j in range(3)], axis=-1
    ).reshape(n, h_out * w_out, 9 * c_in)
    wmat = np.ascontiguousarray(kernel.transpose(2, 3, 1, 0)).reshape(9 * c_in, c_out)
    out = (cols @ wmat + bias).reshape(n, h_out, w_out, c_out)
    return out, (cols, wmat, kernel.shape, x.shape, padded)


def conv2d_nhwc_backward(cache, grad_out):
    cols, wmat, k_shape, x_shape, padded = cache
    n, h, w, c_in = x_shape
    c_out = k_shape[0]
    h_out, w_out = grad_out.shape[1], grad_out.shape[2]
    g = np.ascontiguousarray(grad_out).reshape(n, h_out * w_out, c_out)

    grad_bias = g.sum(axis=(0, 1))
    gw = cols.reshape(-1, 9 * c_in).T @ g.reshape(-1, c_out)
    grad_kernel = gw.reshape(3, 3, c_in, c_out).transpose(3, 2, 0, 1)

    gcols = (g @ wmat.T).reshape(n, h_out, w_out, 9 * c_in)
    hp, wp = (h + 2, w + 2) if padded else (h, w)
    gxp = np.zeros((n, hp, wp, c_in), dtype=gcols.dtype)
    k = 0
    for i in range(3):
        for j in range(3):
            gxp[:, i:i + h_out, j:j + w_out, :] += gcols[..., k * c_in:(k + 1) * c_in]
            k += 1
    grad_x = gxp[:, 1:-1, 1:-1, :] if padded else gxp
    return grad_x, np.ascontiguousarray(grad_kernel), grad_bias


def conv2d(x, kernel, bias, padded):
    """3x3 cross-correlation of ``x`` shaped (C,H,W) or (N,C,H,W).

    Output is (C_out,H',W') or (N,C_out,H',W'); H' = H when padded, else H-2.
    """
    x, squeeze = _promote(np.asarray(x), 4)
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    out, cache = conv2d_nhwc(x.transpose(0, 2, 3, 1), kernel, bias, padded)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return (out[0] if squeeze else out), (cache, squeeze)


def conv2d_backward(cache, grad_out):
    """Returns ``(grad_input, grad_kernel, grad_bias)`` for :func:`conv2d`."""
    inner, squeeze = cache
    grad_out, _ = _promote(np.asarray(grad_out), 4)
    gx, gk, gb = conv2d_nhwc_backward(inner, grad_out.transpose(0, 2, 3, 1))
    gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
    return (gx[0] if squeeze else gx), gk, gb


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def relu(x):
    x = np.asarray(x)
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(mask, grad_out):
    # subgradient at 0 is 0
    return np.where(mask, grad_out, 0).astype(np.asarray(grad_out).dtype, copy=False)


def tanh_map(x):
    y = np.tanh(np.asarray(x))
    return y, y


def tanh_backward(y, grad_out):
    return grad_out * (1 - y * y)


def softmax(x, temperature=1.0, axis=-1):
    """Numerically stable softmax of ``x / temperature`` along ``axis``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(x) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return p, (p, temperature, axis)


def softmax_backward(cache, grad_out):
    p, temperature, axis = cache
    inner = (grad_out * p).sum(axis=axis, keepdims=True)
    return p * (grad_out - inner) / temperature


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------

ATTENTION_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def multi_head_cross_attention(query_seq, kv_seq, weights, heads):
    """One cross-attention block with residual connection.

    ``query_seq`` and ``kv_seq`` are (N, T, D) (or (T, D)); ``weights`` maps
    ``wq, bq, wk, bk, wv, bv, wo, bo`` to (D, D) matrices and (D,) biases,
    applied as ``x @ w + b``. Returns ``query_seq + proj(attention)``.
    """
    xq, squeeze = _promote(np.asarray(query_seq), 3)
    xkv, _ = _promote(np.asarray(kv_seq), 3)
    if xq.shape != xkv.shape:
        raise ValueError(f"query {xq.shape} and key/value {xkv.shape} shapes differ")
    n, t, d = xq.shape
    if d % heads:
        raise ValueError(f"embedding dim {d} not divisible by {heads} heads")
    for k in ATTENTION_KEYS:
        want = (d, d) if k.startswith("w") else (d,)
        if weights[k].shape != want:
            raise ValueError(f"attention weight {k} has shape {weights[k].shape}, expected {want}")
    dh = d // heads
    scale = 1.0 / float(np.sqrt(dh))

    def split(z):
        return z.reshape(n, t, heads, dh).transpose(0, 2, 1, 3)

    q = split(xq @ weights["wq"] + weights["bq"])
    k = split(xkv @ weights["wk"] + weights["bk"])
    v = split(xkv @ weights["wv"] + weights["bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    attn, sm_cache = softmax(scores, 1.0, axis=-1)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
    out = xq + ctx @ weights["wo"] + weights["bo"]
    cache = (xq, xkv, q, k, v, attn, sm_cache, ctx, weights, heads, scale, squeeze)
    return (out[0] if squeeze else out), cache


def attention_weights_of(cache):
    """Attention probabilities (N, heads, T, T) of a forward call."""
    return cache[5]


def multi_head_cross_attention_backward(cache, grad_out):
    """Returns ``(grad_query, grad_kv, grads)`` with ``grads`` keyed like the weights."""
    xq, xkv, q, k, v, attn, sm_cache, ctx, weights, heads, scale, squeeze = cache
    g, _ = _promote(np.asarray(grad_out), 3)
    n, t, d = xq.shape
    dh = d // heads
    grads = {}

    def flat(z):
        return z.reshape(-1, z.shape[-1])

    def merge(z):
        return z.transpose(0, 2, 1, 3).reshape(n, t, d)

    grads["wo"] = flat(ctx).T @ flat(g)
    grads["bo"] = flat(g).sum(axis=0)
    gctx = (g @ weights["wo"].T).reshape(n, t, heads, dh).transpose(0, 2, 1, 3)

    gattn = gctx @ v.transpose(0, 1, 3, 2)
    gv = attn.transpose(0, 1, 3, 2) @ gctx
    gscores = softmax_backward(sm_cache, gattn) * scale
    gq = gscores @ k
    gk = gscores.transpose(0, 1, 3, 2) @ q

    gq, gk, gv = merge(gq), merge(gk), merge(gv)
    grads["wq"] = flat(xq).T @ flat(gq)
    grads["bq"] = flat(gq).sum(axis=0)
    grads["wk"] = flat(xkv).T @ flat(gk)
    grads["bk"] = flat(gk).sum(axis=0)
    grads["wv"] = flat(xkv).T @ flat(gv)
    grads["bv"] = flat(gv).sum(axis=0)

    grad_q = g + gq @ weights["wq"].T
    grad_kv = gk @ weights["wk"].T + gv @ weights["wv"].T
    if squeeze:
        grad_q, grad_kv = grad_q[0], grad_kv[0]
    return grad_q, grad_kv, grads


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if set(grads) != set(params):
        raise ValueError("parameter and gradient names differ")
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    state.step += 1
    bc1 = 1 - beta1**state.step
    bc2 = 1 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        if not (g.shape == p.shape == m.shape == v.shape):
            raise ValueError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        g = g.astype(p.dtype, copy=False)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    return params
