"""Transformer encoder building blocks with explicit backward passes.

Activations carry arbitrary leading batch axes: ``(..., L, D)``. Parameters
may carry one extra leading axis (one slice per parallel sub-network), in
which case the first activation axis indexes that sub-network. Every
``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
takes ``(grad_output, cache)``.
"""

from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5


def _expand(p: np.ndarray, ndim: int, core: int) -> np.ndarray:
    """Insert broadcast axes after a stacked parameter's sub-network axis."""
    extra = p.ndim - core
    if extra <= 0:
        return p
    return p.reshape(p.shape[:extra] + (1,) * (ndim - core - extra) + p.shape[extra:])


def _matmul(X, W):
    if W.ndim == 3 and X.ndim > 3:
        # fold batch axes into rows so each sub-network is one GEMM
        return (X.reshape(X.shape[0], -1, X.shape[-1]) @ W).reshape(X.shape[:-1] + (W.shape[-1],))
    return X @ _expand(W, X.ndim, 2)


def linear(X, W, b=None):
    out = _matmul(X, W)
    if b is not None:
        out = out + _expand(b, X.ndim, 1)
    return out


def weight_grad(A, G, stacked: bool):
    """Sum of outer products A^T G over every non-parameter axis."""
    if stacked:
        S = A.shape[0]
        return np.matmul(A.reshape(S, -1, A.shape[-1]).swapaxes(1, 2), G.reshape(S, -1, G.shape[-1]))
    return A.reshape(-1, A.shape[-1]).T @ G.reshape(-1, G.shape[-1])


def bias_grad(G, stacked: bool):
    if stacked:
        return G.reshape(G.shape[0], -1, G.shape[-1]).sum(axis=1)
    return G.reshape(-1, G.shape[-1]).sum(axis=0)


def key_mask_bias(mask, dtype=np.float64):
    """Additive mask: 0 for valid keys, -inf for padding. ``mask`` is (..., L) bool."""
    bias = np.zeros(mask.shape, dtype=dtype)
    bias[~mask] = -np.inf
    return bias


def softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def attention_forward(Q, K, V, mask=None):
    """softmax(Q K^T / sqrt(d_k) + mask) V.

    ``mask`` is a boolean (..., L_k) array of valid key positions,
    broadcastable against the leading axes of ``Q``.
    """
    if np.isnan(Q).any() or np.isnan(K).any() or np.isnan(V).any():
        raise ValueError("NaN in attention inputs")
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ValueError("attention shape mismatch")
    scale = 1.0 / math.sqrt(Q.shape[-1])
    scores = (Q @ K.swapaxes(-1, -2)) * scale
    if mask is not None:
        if not mask.any(axis=-1).all():
            raise ValueError("attention row without any valid key")
        scores = scores + key_mask_bias(mask, scores.dtype)[..., None, :]
    A = softmax(scores)
    return A @ V, (Q, K, V, A, scale)


def attention_backward(dout, cache):
    Q, K, V, A, scale = cache
    dA = dout @ V.swapaxes(-1, -2)
    dV = A.swapaxes(-1, -2) @ dout
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
    dQ = dS @ K
    dK = dS.swapaxes(-1, -2) @ Q
    return dQ, dK, dV


def attention(Q, K, V, mask=None, return_weights=False):
    out, cache = attention_forward(Q, K, V, mask)
    return (out, cache[3]) if return_weights else out


def split_heads(X, n_heads):
    *lead, L, D = X.shape
    if D % n_heads:
        raise ValueError(f"model width {D} not divisible by {n_heads} heads")
    return X.reshape(*lead, L, n_heads, D // n_heads).swapaxes(-3, -2)


def merge_heads(X):
    *lead, h, L, dk = X.shape
    return X.swapaxes(-3, -2).reshape(*lead, L, h * dk)


def multi_head_forward(X, wq, wk, wv, wo, n_heads, mask=None):
    """Concat(head_1..head_h) W^o with head_i = Attention(X Wq_i, X Wk_i, X Wv_i)."""
    if X.shape[-1] != wq.shape[-2]:
        raise ValueError(f"input width {X.shape[-1]} does not match projection {wq.shape[-2]}")
    Q = split_heads(linear(X, wq), n_heads)
    K = split_heads(linear(X, wk), n_heads)
    V = split_heads(linear(X, wv), n_heads)
    hmask = None if mask is None else mask[..., None, :]
    O, att_cache = attention_forward(Q, K, V, hmask)
    Oc = merge_heads(O)
    return linear(Oc, wo), (X, Oc, att_cache, n_heads)


def multi_head_backward(dout, cache, wq, wk, wv, wo):
    X, Oc, att_cache, n_heads = cache
    stacked = wq.ndim == 3
    g = {"wo": weight_grad(Oc, dout, stacked)}
    dOc = _matmul(dout, wo.swapaxes(-1, -2))
    dQ, dK, dV = attention_backward(split_heads(dOc, n_heads), att_cache)
    dX = 0
    for name, W, dH in (("wq", wq, dQ), ("wk", wk, dK), ("wv", wv, dV)):
        dH = merge_heads(dH)
        g[name] = weight_grad(X, dH, stacked)
        dX = dX + _matmul(dH, W.swapaxes(-1, -2))
    return dX, g


def multi_head(X, params, n_heads, mask=None):
    return multi_head_forward(X, params["wq"], params["wk"], params["wv"], params["wo"],
                              n_heads, mask)[0]


def layer_norm_forward(X, g, b):
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * _expand(g, X.ndim, 1) + _expand(b, X.ndim, 1), (xhat, inv, g)


def layer_norm_backward(dout, cache):
    xhat, inv, g = cache
    stacked = g.ndim == 2
    dg = bias_grad(dout * xhat, stacked)
    db = bias_grad(dout, stacked)
    dxhat = dout * _expand(g, dout.ndim, 1)
    dX = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dX, dg, db


BLOCK_KEYS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")


def encoder_block_forward(X, p, n_heads, mask=None):
    """Post-norm block: LN(X + MHA(X)) then LN(H + FFN(H)), FFN with ReLU."""
    M, mh_cache = multi_head_forward(X, p["wq"], p["wk"], p["wv"], p["wo"], n_heads, mask)
    H1, ln1_cache = layer_norm_forward(X + M, p["ln1_g"], p["ln1_b"])
    Z = linear(H1, p["w1"], p["b1"])
    R = np.maximum(Z, 0)
    F = linear(R, p["w2"], p["b2"])
    H2, ln2_cache = layer_norm_forward(H1 + F, p["ln2_g"], p["ln2_b"])
    return H2, (mh_cache, ln1_cache, H1, Z, R, ln2_cache)


def encoder_block_backward(dout, cache, p):
    mh_cache, ln1_cache, H1, Z, R, ln2_cache = cache
    stacked = p["wq"].ndim == 3
    dR2, g_ln2, b_ln2 = layer_norm_backward(dout, ln2_cache)
    grads = {"ln2_g": g_ln2, "ln2_b": b_ln2}
    grads["w2"] = weight_grad(R, dR2, stacked)
    grads["b2"] = bias_grad(dR2, stacked)
    dZ = _matmul(dR2, p["w2"].swapaxes(-1, -2)) * (Z > 0)
    grads["w1"] = weight_grad(H1, dZ, stacked)
    grads["b1"] = bias_grad(dZ, stacked)
    dH1 = dR2 + _matmul(dZ, p["w1"].swapaxes(-1, -2))
    dR1, g_ln1, b_ln1 = layer_norm_backward(dH1, ln1_cache)
    grads["ln1_g"], grads["ln1_b"] = g_ln1, b_ln1
    dX_att, g_att = multi_head_backward(dR1, mh_cache, p["wq"], p["wk"], p["wv"], p["wo"])
    grads.update(g_att)
    return dR1 + dX_att, grads


def encoder_block(X, p, n_heads, mask=None):
    return encoder_block_forward(X, p, n_heads, mask)[0]


def sinusoidal_encoding(length: int, d_model: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)
