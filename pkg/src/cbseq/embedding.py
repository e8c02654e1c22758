"""CBOW word2vec (negative sampling) over behavior-sequence tokens.

One model per sequence type. Training follows the classic word2vec update
order (sequential SGD, linearly decayed learning rate); the inner loop is
compiled with numba, all randomness is drawn up front from a seeded numpy
generator so results depend only on the seed.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .sequences import SEQUENCE_TYPES, BehaviorSequence

NUMERIC_TYPES = ("pn", "iat")
PORT_TYPES = ("sp", "dp")


@numba.njit(cache=True)
def _sigmoid(x):
    if x > 30.0:
        return 1.0
    if x < -30.0:
        return 0.0
    return 1.0 / (1.0 + np.exp(-x))


@numba.njit(cache=True)
def _cbow_epoch(win, wout, tokens, offsets, reduced, negs, window,
                lr, done, total, min_frac):
    dim = win.shape[1]
    k = negs.shape[1]
    h = np.empty(dim)
    neu1e = np.empty(dim)
    loss = 0.0
    n_examples = 0
    for s in range(offsets.shape[0] - 1):
        lo = offsets[s]
        hi = offsets[s + 1]
        for i in range(lo, hi):
            alpha = lr * max(1.0 - done / total, min_frac)
            done += 1
            w = window - reduced[i]
            a = max(lo, i - w)
            b = min(hi, i + w + 1)
            cnt = 0
            for d in range(dim):
                h[d] = 0.0
                neu1e[d] = 0.0
            for j in range(a, b):
                if j != i:
                    cnt += 1
                    for d in range(dim):
                        h[d] += win[tokens[j], d]
            if cnt == 0:
                continue
            for d in range(dim):
                h[d] /= cnt
            target = tokens[i]
            for t in range(k + 1):
                if t == 0:
                    word = target
                    label = 1.0
                else:
                    word = negs[i, t - 1]
                    if word == target:
                        continue
                    label = 0.0
                f = 0.0
                for d in range(dim):
                    f += h[d] * wout[word, d]
                sig = _sigmoid(f)
                if label > 0.5:
                    loss -= np.log(max(sig, 1e-12))
                else:
                    loss -= np.log(max(1.0 - sig, 1e-12))
                g = (label - sig) * alpha
                for d in range(dim):
                    neu1e[d] += g * wout[word, d]
                    wout[word, d] += g * h[d]
            n_examples += 1
            for j in range(a, b):
                if j != i:
                    for d in range(dim):
                        win[tokens[j], d] += neu1e[d] / cnt
    return loss, n_examples, done


@dataclass
class EmbeddingModel:
    """Token -> vector table for one sequence type."""

    sequence_type: str
    tokens: np.ndarray
    input_vectors: np.ndarray
    output_vectors: np.ndarray | None = None
    loss_curve: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.sequence_type not in SEQUENCE_TYPES:
            raise ValueError(f"unknown sequence type {self.sequence_type!r}")
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        order = np.argsort(self.tokens, kind="stable")
        self._sorted = self.tokens[order].tolist()
        self._sorted_rows = order
        self.vocab = {int(t): i for i, t in enumerate(self.tokens)}
        self.unk_vector = self.input_vectors.mean(axis=0)

    @property
    def dim(self) -> int:
        return self.input_vectors.shape[1]

    def __len__(self):
        return len(self.tokens)

    def row_for(self, token: int) -> int:
        """Vocabulary row used for ``token``; -1 means the UNK vector."""
        token = int(token)
        row = self.vocab.get(token)
        if row is not None:
            return row
        if self.sequence_type in PORT_TYPES:
            return -1
        pos = bisect.bisect_left(self._sorted, token)
        if pos == 0:
            return int(self._sorted_rows[0])
        if pos == len(self._sorted):
            return int(self._sorted_rows[-1])
        lo, hi = self._sorted[pos - 1], self._sorted[pos]
        # ties go to the smaller token
        return int(self._sorted_rows[pos - 1] if token - lo <= hi - token else self._sorted_rows[pos])

    def embed_token(self, token: int) -> np.ndarray:
        row = self.row_for(token)
        return self.unk_vector if row < 0 else self.input_vectors[row]

    def embed(self, tokens: Sequence[int]) -> np.ndarray:
        rows = [self.row_for(t) for t in tokens]
        out = np.empty((len(rows), self.dim))
        for i, r in enumerate(rows):
            out[i] = self.unk_vector if r < 0 else self.input_vectors[r]
        return out

    def similarity(self, a: int, b: int) -> float:
        va, vb = self.embed_token(a), self.embed_token(b)
        return float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))

    def save(self, path) -> None:
        """Text vectors: ``<vocab> <dim>`` header then ``<token> <floats>`` rows.

        Output (negative-sampling) vectors go to ``<path>.out`` in the same format.
        """
        _write_vectors(path, self.tokens, self.input_vectors)
        if self.output_vectors is not None:
            _write_vectors(str(path) + ".out", self.tokens, self.output_vectors)

    @classmethod
    def load(cls, path, sequence_type: str) -> "EmbeddingModel":
        tokens, vecs = _read_vectors(path)
        out_path = Path(str(path) + ".out")
        out = _read_vectors(out_path)[1] if out_path.exists() else None
        return cls(sequence_type, tokens, vecs, out)


def _write_vectors(path, tokens, vectors) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(tokens)} {vectors.shape[1]}\n")
        for tok, vec in zip(tokens, vectors):
            fh.write(str(int(tok)) + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def _read_vectors(path):
    with open(path, encoding="utf-8") as fh:
        n, dim = (int(x) for x in fh.readline().split())
        tokens = np.empty(n, dtype=np.int64)
        vecs = np.empty((n, dim))
        for i in range(n):
            parts = fh.readline().split()
            if len(parts) != dim + 1:
                raise ValueError(f"{path}: row {i + 1} has {len(parts) - 1} values, expected {dim}")
            tokens[i] = int(parts[0])
            vecs[i] = [float(x) for x in parts[1:]]
    return tokens, vecs


def train_cbow(corpus: Iterable[Sequence[int]], sequence_type: str = "pn", dim: int = 100,
               window: int = 5, negatives: int = 5, epochs: int = 5, lr: float = 0.025,
               min_count: int = 1, seed: int = 42) -> EmbeddingModel:
    """Train a CBOW model where each token list is one sentence."""
    corpus = [list(map(int, s)) for s in corpus]
    if not corpus or not any(corpus):
        raise ValueError("empty corpus")
    if dim <= 0:
        raise ValueError("dim must be positive")
    if window < 1 or negatives < 0 or epochs < 1 or min_count < 1:
        raise ValueError("invalid training parameters")

    counts: dict[int, int] = {}
    for sent in corpus:
        for tok in sent:
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    if not kept:
        raise ValueError("no token reaches min_count")
    vocab = {t: i for i, t in enumerate(kept)}
    sents = [np.array([vocab[t] for t in s if t in vocab], dtype=np.int64) for s in corpus]
    sents = [s for s in sents if len(s)]
    tokens = np.concatenate(sents)
    offsets = np.zeros(len(sents) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(s) for s in sents])

    rng = np.random.Generator(np.random.PCG64(seed))
    V = len(kept)
    win = (rng.random((V, dim)) - 0.5) / dim
    wout = np.zeros((V, dim))
    freq = np.array([counts[t] for t in kept], dtype=float) ** 0.75
    cdf = np.cumsum(freq / freq.sum())
    cdf[-1] = 1.0

    total = float(epochs * len(tokens))
    done = 0.0
    curve = []
    for _ in range(epochs):
        reduced = rng.integers(0, window, size=len(tokens))
        negs = np.searchsorted(cdf, rng.random((len(tokens), max(negatives, 1))), side="right")
        negs = negs[:, :negatives] if negatives else np.empty((len(tokens), 0), dtype=np.int64)
        loss, n_ex, done = _cbow_epoch(win, wout, tokens, offsets, reduced, negs.astype(np.int64),
                                       window, lr, done, total, 1e-4)
        curve.append(loss / n_ex if n_ex else 0.0)
    return EmbeddingModel(sequence_type, np.array(kept, dtype=np.int64), win, wout, curve)


@dataclass
class BehaviorEmbedding:
    """Four (length x dim) matrices, row i aligned with token i."""

    pn: np.ndarray
    iat: np.ndarray
    sp: np.ndarray
    dp: np.ndarray

    def __post_init__(self):
        n = len(self.pn)
        if not (len(self.iat) == len(self.sp) == len(self.dp) == n):
            raise ValueError("embedding matrices differ in length")

    def __len__(self):
        return len(self.pn)

    def stacked(self) -> np.ndarray:
        """(4, length, dim) array in pn, iat, sp, dp order."""
        return np.stack([self.pn, self.iat, self.sp, self.dp])


def embed_sequence(models: dict[str, EmbeddingModel], seq: BehaviorSequence) -> BehaviorEmbedding:
    missing = [t for t in SEQUENCE_TYPES if t not in models]
    if missing:
        raise KeyError(f"missing embedding model(s): {', '.join(missing)}")
    if len(seq) == 0:
        raise ValueError("cannot embed an empty behavior sequence")
    return BehaviorEmbedding(*(models[t].embed(seq.tokens(t)) for t in SEQUENCE_TYPES))


class BehaviorEmbedder(TransformerMixin, BaseEstimator):
    """Fit four CBOW models on behavior sequences; transform to embeddings."""

    def __init__(self, dim: int = 100, window: int = 5, negatives: int = 5, epochs: int = 5,
                 lr: float = 0.025, min_count: int = 1, seed: int = 42):
        self.dim = dim
        self.window = window
        self.negatives = negatives
        self.epochs = epochs
        self.lr = lr
        self.min_count = min_count
        self.seed = seed

    def fit(self, X: Sequence[BehaviorSequence], y=None):
        self.models_ = {}
        for i, t in enumerate(SEQUENCE_TYPES):
            self.models_[t] = train_cbow(
                [s.tokens(t) for s in X], t, self.dim, self.window, self.negatives,
                self.epochs, self.lr, self.min_count, self.seed + i)
        return self

    def transform(self, X: Sequence[BehaviorSequence]) -> list[BehaviorEmbedding]:
        check_is_fitted(self, "models_")
        return [embed_sequence(self.models_, s) for s in X]

    @classmethod
    def from_models(cls, models: dict[str, EmbeddingModel]) -> "BehaviorEmbedder":
        dims = {m.dim for m in models.values()}
        if len(dims) != 1:
            raise ValueError("embedding models disagree on dimension")
        emb = cls(dim=dims.pop())
        emb.models_ = dict(models)
        return emb
