import math

import numpy as np
import pytest

from cbseq.msformer import layers as L


def naive_attention(Q, K, V, valid=None):
    n, m = Q.shape[0], K.shape[0]
    out = np.zeros((n, V.shape[1]))
    for i in range(n):
        s = [sum(Q[i, d] * K[j, d] for d in range(Q.shape[1])) / math.sqrt(Q.shape[1]) for j in range(m)]
        keep = [j for j in range(m) if valid is None or valid[j]]
        mx = max(s[j] for j in keep)
        w = {j: math.exp(s[j] - mx) for j in keep}
        z = sum(w.values())
        for j in keep:
            out[i] += w[j] / z * V[j]
    return out


def naive_layer_norm(x, g, b):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + L.LN_EPS) * g + b


def naive_multi_head(X, wq, wk, wv, wo, h, valid=None):
    dk = X.shape[1] // h
    heads = []
    for i in range(h):
        sl = slice(i * dk, (i + 1) * dk)
        heads.append(naive_attention(X @ wq[:, sl], X @ wk[:, sl], X @ wv[:, sl], valid))
    return np.concatenate(heads, axis=1) @ wo


def naive_block(X, p, h, valid=None):
    M = naive_multi_head(X, p["wq"], p["wk"], p["wv"], p["wo"], h, valid)
    H1 = np.array([naive_layer_norm(r, p["ln1_g"], p["ln1_b"]) for r in X + M])
    F = np.maximum(H1 @ p["w1"] + p["b1"], 0) @ p["w2"] + p["b2"]
    return np.array([naive_layer_norm(r, p["ln2_g"], p["ln2_b"]) for r in H1 + F])


def block_params(rng, D, F):
    p = {k: rng.normal(scale=0.3, size=(D, D)) for k in ("wq", "wk", "wv", "wo")}
    p.update(w1=rng.normal(scale=0.3, size=(D, F)), b1=rng.normal(size=F),
             w2=rng.normal(scale=0.3, size=(F, D)), b2=rng.normal(size=D),
             ln1_g=rng.normal(1, 0.1, D), ln1_b=rng.normal(0, 0.1, D),
             ln2_g=rng.normal(1, 0.1, D), ln2_b=rng.normal(0, 0.1, D))
    return p


def test_single_position_returns_value(rng):
    Q, K, V = rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 3))
    assert np.array_equal(L.attention(Q, K, V), V)


def test_identical_keys_uniform(rng):
    Q = rng.normal(size=(2, 4))
    K = np.tile(rng.normal(size=(1, 4)), (2, 1))
    _, A = L.attention(Q, K, rng.normal(size=(2, 4)), return_weights=True)
    assert np.allclose(A, 0.5)


def test_attention_matches_naive(rng):
    for _ in range(10):
        Q, K, V = (rng.normal(size=(4, 16)) for _ in range(3))
        assert np.allclose(L.attention(Q, K, V), naive_attention(Q, K, V), atol=1e-6)
        valid = np.array([True, True, False, True])
        assert np.allclose(L.attention(Q, K, V, valid), naive_attention(Q, K, V, valid), atol=1e-6)


def test_masked_weights(rng):
    Q, K, V = (rng.normal(size=(5, 8)) for _ in range(3))
    valid = np.array([1, 1, 1, 0, 0], bool)
    _, A = L.attention(Q, K, V, valid, return_weights=True)
    assert np.allclose(A.sum(-1), 1, atol=1e-6)
    assert np.all(A[:, ~valid] == 0)


def test_attention_errors(rng):
    Q = rng.normal(size=(2, 4))
    bad = Q.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        L.attention(bad, Q, Q)
    with pytest.raises(ValueError):
        L.attention(Q, rng.normal(size=(2, 3)), Q)
    with pytest.raises(ValueError):
        L.attention(Q, Q, Q, np.zeros(2, bool))


def test_multi_head_matches_per_head_loop(rng):
    X = rng.normal(size=(6, 16))
    p = block_params(rng, 16, 64)
    for h in (1, 2, 4, 8):
        got = L.multi_head(X, p, h)
        want = naive_multi_head(X, p["wq"], p["wk"], p["wv"], p["wo"], h)
        assert np.allclose(got, want, atol=1e-6)


def test_single_head_is_attention_plus_projection(rng):
    X = rng.normal(size=(3, 8))
    p = block_params(rng, 8, 8)
    want = L.attention(X @ p["wq"], X @ p["wk"], X @ p["wv"]) @ p["wo"]
    assert np.allclose(L.multi_head(X, p, 1), want)


@pytest.mark.parametrize("n", [1, 5, 16])
def test_multi_head_shape(rng, n):
    p = block_params(rng, 128, 8)
    assert L.multi_head(rng.normal(size=(n, 128)), p, 8).shape == (n, 128)


def test_multi_head_shape_mismatch(rng):
    p = block_params(rng, 8, 8)
    with pytest.raises(ValueError):
        L.multi_head(rng.normal(size=(3, 6)), p, 2)
    with pytest.raises(ValueError):
        L.split_heads(rng.normal(size=(3, 6)), 4)


def test_block_matches_naive(rng):
    X = rng.normal(size=(5, 16))
    p = block_params(rng, 16, 64)
    valid = np.array([1, 1, 1, 1, 0], bool)
    assert np.allclose(L.encoder_block(X, p, 4), naive_block(X, p, 4), atol=1e-6)
    assert np.allclose(L.encoder_block(X, p, 4, valid), naive_block(X, p, 4, valid), atol=1e-6)


def test_block_zero_input_finite():
    D = 16
    p = {k: np.zeros((D, D)) for k in ("wq", "wk", "wv", "wo")}
    p.update(w1=np.zeros((D, 4 * D)), b1=np.zeros(4 * D), w2=np.zeros((4 * D, D)), b2=np.zeros(D),
             ln1_g=np.ones(D), ln1_b=np.zeros(D), ln2_g=np.ones(D), ln2_b=np.zeros(D))
    out = L.encoder_block(np.zeros((4, D)), p, 2)
    assert out.shape == (4, D) and np.all(np.isfinite(out))


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def test_block_backward_matches_finite_differences(rng):
    X = rng.normal(size=(4, 8))
    p = block_params(rng, 8, 16)
    valid = np.array([1, 1, 1, 0], bool)
    R = rng.normal(size=(4, 8))

    def f():
        return float((L.encoder_block(X, p, 2, valid) * R).sum())

    _, cache = L.encoder_block_forward(X, p, 2, valid)
    dX, grads = L.encoder_block_backward(R, cache, p)
    assert np.allclose(dX, numeric_grad(f, X), rtol=1e-5, atol=1e-7)
    for k in L.BLOCK_KEYS:
        assert np.allclose(grads[k], numeric_grad(f, p[k]), rtol=1e-5, atol=1e-7), k


def test_stacked_parameters_match_loop(rng):
    S, B, Lq, D = 3, 2, 5, 8
    X = rng.normal(size=(S, B, Lq, D))
    ps = [block_params(rng, D, 16) for _ in range(S)]
    stacked = {k: np.stack([p[k] for p in ps]) for k in L.BLOCK_KEYS}
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 0, 0, 0]], bool)
    out = L.encoder_block(X, stacked, 2, mask)
    for s in range(S):
        for b in range(B):
            assert np.allclose(out[s, b], L.encoder_block(X[s, b], ps[s], 2, mask[b]), atol=1e-12)


def test_sinusoidal_encoding():
    pe = L.sinusoidal_encoding(16, 8)
    assert pe.shape == (16, 8)
    assert np.allclose(pe[0, 0::2], 0) and np.allclose(pe[0, 1::2], 1)
    assert np.isclose(pe[3, 2], math.sin(3 / 10000 ** (2 / 8)))


def test_softmax_rows(rng):
    x = rng.normal(size=(10, 7)) * 50
    assert np.allclose(L.softmax(x).sum(-1), 1, atol=1e-12)
