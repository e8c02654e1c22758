"""scikit-learn style estimator around :class:`MSFormer`."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .model import Adam, MSFormer, MSFormerConfig, N_SUBNETS, pad_batch

log = logging.getLogger(__name__)


def check_sequences(X, embed_dim: int | None = None) -> list[np.ndarray]:
    """Validate a collection of behavior embeddings.

    Accepts :class:`~cbseq.embedding.BehaviorEmbedding` objects or
    ``(4, n, dim)`` arrays; returns the arrays.
    """
    out = []
    for i, s in enumerate(X):
        a = np.asarray(s.stacked() if hasattr(s, "stacked") else s, dtype=float)
        if a.ndim != 3 or a.shape[0] != N_SUBNETS:
            raise ValueError(f"sample {i}: expected shape (4, n, dim), got {a.shape}")
        if a.shape[1] == 0:
            raise ValueError(f"sample {i}: empty sequence")
        if embed_dim is not None and a.shape[2] != embed_dim:
            raise ValueError(f"sample {i}: embedding dim {a.shape[2]} != {embed_dim}")
        if not np.isfinite(a).all():
            raise ValueError(f"sample {i}: non-finite values")
        out.append(a)
    if not out:
        raise ValueError("no samples")
    return out


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (benign) or 1 (malware)")
    return y.astype(int)


def _batch(seqs, idx, max_len, dtype):
    width = min(max_len, max(seqs[i].shape[1] for i in idx))
    return pad_batch([seqs[i] for i in idx], max_len, width, dtype)


class MSFormerClassifier(ClassifierMixin, BaseEstimator):
    """Binary malware/benign classifier over behavior embeddings.

    Class 1 is malware. Batches are padded only to their longest member;
    masking makes the result identical to padding every sample to
    ``max_len``.
    """

    def __init__(self, d_model=128, n_blocks=6, n_heads=8, d_ff=None, max_len=16,
                 positional_encoding=True, lr=1e-5, batch_size=8, epochs=20, seed=42,
                 dtype="float32"):
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.max_len = max_len
        self.positional_encoding = positional_encoding
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.dtype = dtype

    def _config(self, embed_dim):
        return MSFormerConfig(embed_dim, self.d_model, self.n_blocks, self.n_heads, self.d_ff,
                              self.max_len, self.positional_encoding, self.seed, self.dtype)

    def fit(self, X, y):
        seqs = check_sequences(X)
        y = check_labels(y, len(seqs))
        if len(np.unique(y)) < 2:
            raise ValueError("training data must contain both classes")
        self.classes_ = np.array([0, 1])
        self.model_ = MSFormer(self._config(seqs[0].shape[2]))
        opt = Adam(self.model_.params, lr=self.lr)
        rng = np.random.Generator(np.random.PCG64(self.seed))
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(seqs))
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                Xb, lb = _batch(seqs, idx, self.max_len, self.dtype)
                loss, grads = self.model_.loss_and_grads(Xb, lb, y[idx])
                opt.step(grads)
                total += loss * len(idx)
            self.loss_curve_.append(total / len(seqs))
            log.debug("epoch %d loss %.6f", epoch + 1, self.loss_curve_[-1])
        return self

    @classmethod
    def from_model(cls, model: MSFormer) -> "MSFormerClassifier":
        c = model.config
        clf = cls(c.d_model, c.n_blocks, c.n_heads, c.d_ff, c.max_len, c.positional_encoding,
                  seed=c.seed, dtype=c.dtype)
        clf.model_ = model
        clf.classes_ = np.array([0, 1])
        return clf

    def predict_proba(self, X, batch_size: int = 64) -> np.ndarray:
        check_is_fitted(self, "model_")
        seqs = check_sequences(X, self.model_.config.embed_dim)
        out = np.empty((len(seqs), 2))
        for start in range(0, len(seqs), batch_size):
            idx = np.arange(start, min(start + batch_size, len(seqs)))
            Xb, lb = _batch(seqs, idx, self.max_len, self.dtype)
            out[idx] = self.model_.predict_proba(Xb, lb)
        return out

    def decision_function(self, X) -> np.ndarray:
        return self.predict_proba(X)[:, 1]

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= threshold).astype(int)


@dataclass(frozen=True)
class DetectionResult:
    cluster_id: int
    probability_malware: float
    channel_ids: tuple[str, ...] = ()
    threshold: float = 0.5

    @property
    def probability_benign(self) -> float:
        return 1.0 - self.probability_malware

    @property
    def is_malware(self) -> bool:
        return self.probability_malware >= self.threshold

    @property
    def verdict(self) -> str:
        return "malware" if self.is_malware else "benign"
