"""End-to-end detector: behavior sequences in, cluster verdicts out."""

from __future__ import annotations

import csv
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .embedding import BehaviorEmbedder, EmbeddingModel
from .msformer.classifier import DetectionResult, MSFormerClassifier
from .msformer.model import MSFormer
from .sequences import SEQUENCE_TYPES, BehaviorSequence


def sequence_labels(seqs: Sequence[BehaviorSequence]) -> np.ndarray:
    y = [s.y for s in seqs]
    if any(v is None for v in y):
        raise ValueError("every training sequence needs a benign or malware label")
    return np.array(y, dtype=int)


class CBSeqDetector(ClassifierMixin, BaseEstimator):
    """Word2vec embedding of the four token streams followed by MSFormer.

    ``fit(X, y=None)`` takes behavior sequences; labels default to the
    sequences' own. ``embedding_corpus`` optionally supplies extra unlabeled
    sequences for the (unsupervised) embedding models.
    """

    def __init__(self, dim=100, w2v_window=5, w2v_negatives=5, w2v_epochs=5, w2v_lr=0.025,
                 min_count=1, d_model=128, n_blocks=6, n_heads=8, max_len=16,
                 positional_encoding=True, lr=1e-5, batch_size=8, epochs=20, seed=42):
        self.dim = dim
        self.w2v_window = w2v_window
        self.w2v_negatives = w2v_negatives
        self.w2v_epochs = w2v_epochs
        self.w2v_lr = w2v_lr
        self.min_count = min_count
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.max_len = max_len
        self.positional_encoding = positional_encoding
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def _embedder(self):
        return BehaviorEmbedder(self.dim, self.w2v_window, self.w2v_negatives, self.w2v_epochs,
                                self.w2v_lr, self.min_count, self.seed)

    def _classifier(self):
        return MSFormerClassifier(self.d_model, self.n_blocks, self.n_heads, None, self.max_len,
                                  self.positional_encoding, self.lr, self.batch_size,
                                  self.epochs, self.seed)

    def fit(self, X: Sequence[BehaviorSequence], y=None, embedding_corpus=None, embedder=None):
        X = list(X)
        y = sequence_labels(X) if y is None else np.asarray(y, dtype=int)
        if embedder is not None:
            self.embedder_ = embedder
        else:
            corpus = list(embedding_corpus) if embedding_corpus is not None else X
            self.embedder_ = self._embedder().fit(corpus)
        self.classifier_ = self._classifier().fit(self.embedder_.transform(X), y)
        self.classes_ = self.classifier_.classes_
        return self

    @classmethod
    def from_parts(cls, models: dict[str, EmbeddingModel], model: MSFormer) -> "CBSeqDetector":
        det = cls(dim=model.config.embed_dim, d_model=model.config.d_model,
                  n_blocks=model.config.n_blocks, n_heads=model.config.n_heads,
                  max_len=model.config.max_len,
                  positional_encoding=model.config.positional_encoding, seed=model.config.seed)
        det.embedder_ = BehaviorEmbedder.from_models(models)
        det.classifier_ = MSFormerClassifier.from_model(model)
        det.classes_ = det.classifier_.classes_
        return det

    def predict_proba(self, X: Sequence[BehaviorSequence]) -> np.ndarray:
        check_is_fitted(self, "classifier_")
        return self.classifier_.predict_proba(self.embedder_.transform(list(X)))

    def decision_function(self, X) -> np.ndarray:
        return self.predict_proba(X)[:, 1]

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.decision_function(X) >= threshold).astype(int)

    def detect(self, X: Sequence[BehaviorSequence], threshold: float = 0.5) -> list[DetectionResult]:
        X = list(X)
        if not X:
            return []
        p = self.decision_function(X)
        return [DetectionResult(s.cluster_id, float(pm), tuple(s.channel_ids), threshold)
                for s, pm in zip(X, p)]


def detect(models: dict[str, EmbeddingModel], model: MSFormer,
           seqs: Sequence[BehaviorSequence], threshold: float = 0.5) -> list[DetectionResult]:
    missing = [t for t in SEQUENCE_TYPES if t not in models]
    if missing:
        raise KeyError(f"missing embedding model(s): {', '.join(missing)}")
    return CBSeqDetector.from_parts(models, model).detect(seqs, threshold)


def expand_to_channels(results: Sequence[DetectionResult]) -> list[tuple[str, int, float, str]]:
    """Every member channel inherits its cluster's verdict."""
    return [(ch, r.cluster_id, r.probability_malware, r.verdict)
            for r in results for ch in r.channel_ids]


def write_results_csv(results: Sequence[DetectionResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "channel_ids", "p_malware", "verdict"])
        for r in results:
            w.writerow([r.cluster_id, ";".join(r.channel_ids), repr(r.probability_malware), r.verdict])
