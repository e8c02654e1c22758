import numpy as np
import pytest

from cbseq.msformer.model import Adam, MSFormer, MSFormerConfig, pad_batch

TINY = dict(embed_dim=6, d_model=8, n_blocks=1, n_heads=2, max_len=4, dtype="float64")


def tiny(**kw):
    return MSFormer(MSFormerConfig(**{**TINY, **kw}))


def batch(rng, B=3, Lp=4, E=6, lengths=None):
    lengths = np.array(lengths if lengths is not None else rng.integers(1, Lp + 1, B))
    X = rng.normal(size=(B, 4, Lp, E))
    for b, n in enumerate(lengths):
        X[b, :, n:] = 0
    return X, lengths


def test_gradient_check(rng):
    m = tiny()
    # nonzero biases and gains so every gradient path is exercised
    for k, v in m.params.items():
        v += rng.normal(scale=0.1, size=v.shape)
    X, lengths = batch(rng, lengths=[4, 2, 3])
    y = np.array([1, 0, 1])
    _, grads = m.loss_and_grads(X, lengths, y)
    h = 1e-4
    worst = 0.0
    for k, p in m.params.items():
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = m.loss(X, lengths, y)
            flat[i] = old - h
            lm = m.loss(X, lengths, y)
            flat[i] = old
            num = (lp - lm) / (2 * h)
            ana = grads[k].reshape(-1)[i]
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
            if max(abs(num), abs(ana)) > 1e-7:
                worst = max(worst, rel)
    assert worst < 1e-3


def test_probabilities_sum_to_one(rng):
    m = tiny()
    for _ in range(20):
        X, lengths = batch(rng)
        p = m.predict_proba(X, lengths)
        assert np.allclose(p.sum(1), 1, atol=1e-12)
        assert np.all((p >= 0) & (p <= 1))


def test_logits_are_summed_over_subnets(rng):
    m = tiny()
    X, lengths = batch(rng)
    probs, logits = m.forward(X, lengths)
    z = logits.sum(1)
    want = np.exp(z - z.max(1, keepdims=True))
    assert np.allclose(probs, want / want.sum(1, keepdims=True))


def test_padding_invariance(rng):
    m = tiny(max_len=8)
    X, lengths = batch(rng, Lp=3, lengths=[3, 1, 2])
    p_short = m.predict_proba(X, lengths)
    Xp = np.zeros((3, 4, 8, 6))
    Xp[:, :, :3] = X
    assert np.allclose(m.predict_proba(Xp, lengths), p_short, atol=1e-12)
    # garbage in the padded slots must not leak through the mask
    Xp[:, :, 3:] = rng.normal(size=(3, 4, 5, 6))
    Xp[1, :, 1:3] = 99.0
    assert np.allclose(m.predict_proba(Xp, lengths), p_short, atol=1e-12)


def test_zero_classifier_weights_give_half(rng):
    m = tiny()
    m.params["cls_w"][:] = 0
    m.params["cls_b"][:] = 0
    X, lengths = batch(rng)
    assert np.all(m.predict_proba(X, lengths) == 0.5)


def test_truncation_keeps_first_tokens(rng):
    m = tiny(max_len=4)
    X, _ = batch(rng, Lp=7, lengths=[7, 7, 7])
    want = m.predict_proba(X[:, :, :4], [4, 4, 4])
    assert np.allclose(m.predict_proba(X, [7, 7, 7]), want)
    Xp, lengths = pad_batch(list(X), max_len=4, dtype="float64")
    assert list(lengths) == [4, 4, 4] and np.array_equal(Xp, X[:, :, :4])


def test_permutation_equivariance(rng):
    X, lengths = batch(rng, lengths=[4, 4, 4])
    perm = [2, 0, 3, 1]
    m = tiny(positional_encoding=False)
    assert np.allclose(m.predict_proba(X, lengths), m.predict_proba(X[:, :, perm], lengths))
    m = tiny(positional_encoding=True)
    assert not np.allclose(m.predict_proba(X, lengths), m.predict_proba(X[:, :, perm], lengths))


def test_all_padding_raises(rng):
    m = tiny()
    X, _ = batch(rng)
    with pytest.raises(ValueError, match="all-padding"):
        m.predict_proba(X, [2, 0, 1])


def test_input_shape_mismatch(rng):
    with pytest.raises(ValueError):
        tiny().predict_proba(rng.normal(size=(1, 4, 4, 5)), [4])
    with pytest.raises(ValueError):
        MSFormerConfig(d_model=10, n_heads=3)


def test_save_load_bit_identical(tmp_path, rng):
    m = MSFormer(MSFormerConfig(**{**TINY, "dtype": "float32"}), meta={"note": "x"})
    path = tmp_path / "m.msf"
    m.save(path)
    m2 = MSFormer.load(path)
    X, lengths = batch(rng)
    assert np.array_equal(m.predict_proba(X, lengths), m2.predict_proba(X, lengths))
    assert m2.meta == {"note": "x"} and m2.config == m.config
    m2.save(tmp_path / "again.msf")
    assert (tmp_path / "again.msf").read_bytes() == path.read_bytes()


def test_load_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.msf"
    bad.write_bytes(b"NOTAMODEL" + b"\0" * 20)
    with pytest.raises(ValueError, match="not an MSFormer"):
        MSFormer.load(bad)
    m = tiny(dtype="float32")
    good = tmp_path / "good.msf"
    m.save(good)
    bad.write_bytes(good.read_bytes() + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        MSFormer.load(bad)


def test_adam_first_steps_closed_form():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    opt = Adam(p, lr=0.1)
    g1 = np.array([0.3, -1.0, 0.0])
    opt.step({"w": g1})
    # first step moves each nonzero coordinate by lr * sign(g)
    want = np.array([1.0, -2.0, 0.5]) - 0.1 * g1 / (np.abs(g1) + 1e-8)
    assert np.allclose(p["w"], want)
    g2 = np.array([0.1, 2.0, -0.4])
    opt.step({"w": g2})
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    mh, vh = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    assert np.allclose(p["w"], want - 0.1 * mh / (np.sqrt(vh) + 1e-8))


def test_pad_batch(rng):
    seqs = [rng.normal(size=(4, n, 3)) for n in (1, 5, 3)]
    X, lengths = pad_batch(seqs, max_len=4)
    assert X.shape == (3, 4, 4, 3) and list(lengths) == [1, 4, 3]
    assert np.all(X[0, :, 1:] == 0)
    with pytest.raises(ValueError):
        pad_batch([rng.normal(size=(3, 2, 3))], 4)
    with pytest.raises(ValueError):
        pad_batch([], 4)


def test_init_deterministic():
    a, b = tiny(seed=3), tiny(seed=3)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = tiny(seed=4)
    assert not np.array_equal(a.params["in_w"], c.params["in_w"])
