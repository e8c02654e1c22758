"""Multi-sequence fusion transformer: four parallel encoders, summed logits."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import layers as L

N_SUBNETS = 4
N_CLASSES = 2
MAGIC = b"CBSEQMSF"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MSFormerConfig:
    embed_dim: int = 100
    d_model: int = 128
    n_blocks: int = 6
    n_heads: int = 8
    d_ff: int | None = None
    max_len: int = 16
    positional_encoding: bool = True
    seed: int = 42
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.embed_dim, self.d_model, self.n_blocks, self.n_heads, self.max_len) < 1:
            raise ValueError("model dimensions must be positive")


def _xavier(rng, shape, dtype):
    fan_in, fan_out = shape[-2], shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def init_params(cfg: MSFormerConfig) -> dict[str, np.ndarray]:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    dt = np.dtype(cfg.dtype)
    S, E, D, F = N_SUBNETS, cfg.embed_dim, cfg.d_model, cfg.d_ff
    p = {"in_w": _xavier(rng, (S, E, D), dt), "in_b": np.zeros((S, D), dt)}
    for l in range(cfg.n_blocks):
        for name in ("wq", "wk", "wv", "wo"):
            p[f"blocks.{l}.{name}"] = _xavier(rng, (S, D, D), dt)
        p[f"blocks.{l}.w1"] = _xavier(rng, (S, D, F), dt)
        p[f"blocks.{l}.b1"] = np.zeros((S, F), dt)
        p[f"blocks.{l}.w2"] = _xavier(rng, (S, F, D), dt)
        p[f"blocks.{l}.b2"] = np.zeros((S, D), dt)
        for ln in ("ln1", "ln2"):
            p[f"blocks.{l}.{ln}_g"] = np.ones((S, D), dt)
            p[f"blocks.{l}.{ln}_b"] = np.zeros((S, D), dt)
    p["cls_w"] = _xavier(rng, (S, D, N_CLASSES), dt)
    p["cls_b"] = np.zeros((S, N_CLASSES), dt)
    return p


def pad_batch(sequences, max_len: int, pad_to: int | None = None, dtype="float32"):
    """Stack (4, n_i, E) arrays into a zero-padded (B, 4, pad_to, E) batch.

    Sequences longer than ``max_len`` keep their first ``max_len`` rows.
    Returns the batch and the true (truncated) lengths.
    """
    pad_to = max_len if pad_to is None else pad_to
    if pad_to < 1:
        raise ValueError("pad_to must be positive")
    arrs = [np.asarray(s.stacked() if hasattr(s, "stacked") else s) for s in sequences]
    if not arrs:
        raise ValueError("empty batch")
    E = arrs[0].shape[-1]
    X = np.zeros((len(arrs), N_SUBNETS, pad_to, E), dtype=dtype)
    lengths = np.empty(len(arrs), dtype=int)
    for i, a in enumerate(arrs):
        if a.ndim != 3 or a.shape[0] != N_SUBNETS or a.shape[2] != E:
            raise ValueError(f"sequence {i} has shape {a.shape}, expected (4, n, {E})")
        n = min(a.shape[1], max_len, pad_to)
        X[i, :, :n] = a[:, :n]
        lengths[i] = n
    return X, lengths


class MSFormer:
    """Parameters plus forward/backward passes of the detector network."""

    def __init__(self, config: MSFormerConfig | None = None, params: dict | None = None,
                 meta: dict | None = None):
        self.config = config or MSFormerConfig()
        self.meta = dict(meta or {})
        self.params = params if params is not None else init_params(self.config)
        self._pe = L.sinusoidal_encoding(self.config.max_len, self.config.d_model,
                                         np.dtype(self.config.dtype))

    def block_params(self, l: int) -> dict[str, np.ndarray]:
        return {k: self.params[f"blocks.{l}.{k}"] for k in L.BLOCK_KEYS}

    def forward(self, X, lengths, return_cache=False):
        """Class probabilities (B, 2) and per-subnet logits (B, 4, 2).

        ``X`` is (B, 4, L, E) with zero padding past each ``lengths[b]``.
        """
        cfg = self.config
        X = np.asarray(X, dtype=cfg.dtype)
        lengths = np.asarray(lengths)
        B, S, Lp, E = X.shape
        if S != N_SUBNETS or E != cfg.embed_dim:
            raise ValueError(f"input shape {X.shape} does not match model")
        if Lp > cfg.max_len:
            X = X[:, :, :cfg.max_len]
            Lp = cfg.max_len
        lengths = np.minimum(lengths, Lp)
        if (lengths < 1).any():
            raise ValueError("all-padding input")
        mask = np.arange(Lp)[None, :] < lengths[:, None]
        Xs = X.transpose(1, 0, 2, 3)

        H = L.linear(Xs, self.params["in_w"], self.params["in_b"])
        if cfg.positional_encoding:
            H = H + self._pe[:Lp]
        caches = []
        for l in range(cfg.n_blocks):
            H, c = L.encoder_block_forward(H, self.block_params(l), cfg.n_heads, mask)
            caches.append(c)
        w = (mask / lengths[:, None]).astype(H.dtype)
        pooled = np.einsum("bl,sbld->sbd", w, H)
        logits = L.linear(pooled, self.params["cls_w"], self.params["cls_b"])
        z = logits.sum(axis=0)
        probs = L.softmax(z)
        if return_cache:
            return probs, logits.transpose(1, 0, 2), (Xs, w, pooled, caches)
        return probs, logits.transpose(1, 0, 2)

    def predict_proba(self, X, lengths):
        return self.forward(X, lengths)[0]

    def loss_and_grads(self, X, lengths, y):
        """Mean cross-entropy and its gradient for every parameter."""
        y = np.asarray(y, dtype=int)
        probs, _, (Xs, w, pooled, caches) = self.forward(X, lengths, return_cache=True)
        B = len(y)
        eps = np.finfo(probs.dtype).tiny
        loss = float(-np.log(np.maximum(probs[np.arange(B), y], eps)).mean())
        dz = probs.copy()
        dz[np.arange(B), y] -= 1
        dz /= B
        grads = {}
        dlogits = np.broadcast_to(dz, (N_SUBNETS,) + dz.shape)
        grads["cls_w"] = L.weight_grad(pooled, dlogits, True)
        grads["cls_b"] = L.bias_grad(dlogits, True)
        dpooled = dlogits @ self.params["cls_w"].swapaxes(-1, -2)
        dH = w[None, :, :, None] * dpooled[:, :, None, :]
        for l in reversed(range(self.config.n_blocks)):
            dH, g = L.encoder_block_backward(dH, caches[l], self.block_params(l))
            for k, v in g.items():
                grads[f"blocks.{l}.{k}"] = v
        grads["in_w"] = L.weight_grad(Xs, dH, True)
        grads["in_b"] = L.bias_grad(dH, True)
        return loss, grads

    def loss(self, X, lengths, y) -> float:
        probs = self.forward(X, lengths)[0]
        y = np.asarray(y, dtype=int)
        return float(-np.log(probs[np.arange(len(y)), y]).mean())

    # serialization

    def save(self, path) -> None:
        """Versioned container: magic, JSON header, little-endian float32 tensors."""
        names = list(self.params)
        header = {
            "format": "cbseq-msformer",
            "version": FORMAT_VERSION,
            "config": asdict(self.config),
            "meta": self.meta,
            "tensors": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes)
            for n in names:
                fh.write(np.ascontiguousarray(self.params[n], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "MSFormer":
        data = Path(path).read_bytes()
        if data[:len(MAGIC)] != MAGIC:
            raise ValueError(f"{path}: not an MSFormer model file")
        off = len(MAGIC)
        version, hlen = struct.unpack_from("<IQ", data, off)
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported model version {version}")
        off += 12
        header = json.loads(data[off:off + hlen])
        off += hlen
        cfg = MSFormerConfig(**header["config"])
        params = {}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"]))
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(t["shape"])
            params[t["name"]] = arr.astype(cfg.dtype)
            off += 4 * n
        if off != len(data):
            raise ValueError(f"{path}: trailing bytes after tensor payload")
        return cls(cfg, params, header.get("meta"))


class Adam:
    """Adam with bias correction over a dict of parameter arrays (in place)."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            self.params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(m.dtype)
