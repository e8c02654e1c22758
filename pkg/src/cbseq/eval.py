"""Detection metrics and the evaluation protocols.

Samples are behavior sequences (one per channel cluster). Each channel
belongs to exactly one cluster, so any split of sequences keeps a channel's
traffic entirely on one side.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .sequences import BehaviorSequence


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ConfusionCounts":
        t = np.asarray(y_true, dtype=bool)
        p = np.asarray(y_pred, dtype=bool)
        return cls(int((t & p).sum()), int((~t & p).sum()), int((~t & ~p).sum()), int((t & ~p).sum()))


def tpr_fpr(counts: ConfusionCounts) -> tuple[float, float]:
    """TPR = TP/(TP+FN), FPR = FP/(FP+TN)."""
    if counts.tp + counts.fn == 0:
        raise ValueError("no positive (malware) samples: TPR undefined")
    if counts.fp + counts.tn == 0:
        raise ValueError("no negative (benign) samples: FPR undefined")
    return counts.tp / (counts.tp + counts.fn), counts.fp / (counts.fp + counts.tn)


def _check_scores(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and the same length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValueError("AUC needs both classes")
    return s, y


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    s, y = _check_scores(scores, labels)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    @property
    def auc(self) -> float:
        """Trapezoidal area under the curve."""
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(scores, labels) -> RocCurve:
    """ROC over thresholds +inf, every distinct score (descending), -inf.

    A sample is flagged positive when ``score >= threshold``.
    """
    s, y = _check_scores(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    n_pos, n_neg = y.sum(), len(y) - y.sum()
    thr = np.r_[np.inf, s[distinct], -np.inf]
    tpr = np.r_[0.0, tps / n_pos, 1.0]
    fpr = np.r_[0.0, fps / n_neg, 1.0]
    return RocCurve(thr, fpr, tpr)


def undersample(labels, seed: int = 0) -> np.ndarray:
    """Indices of a class-balanced subset (majority drawn without replacement)."""
    y = np.asarray(labels).astype(int)
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("undersampling needs both classes")
    rng = np.random.Generator(np.random.PCG64(seed))
    if len(pos) > len(neg):
        pos = np.sort(rng.choice(pos, size=len(neg), replace=False))
    elif len(neg) > len(pos):
        neg = np.sort(rng.choice(neg, size=len(pos), replace=False))
    return np.sort(np.r_[pos, neg])


def kfold_indices(labels, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Stratified test folds: a partition with sizes differing by at most one."""
    if k < 2:
        raise ValueError("k must be at least 2")
    y = np.asarray(labels).astype(int)
    if len(y) < k:
        raise ValueError(f"cannot split {len(y)} samples into {k} folds")
    rng = np.random.Generator(np.random.PCG64(seed))
    dealt = np.r_[rng.permutation(np.flatnonzero(y == 0)), rng.permutation(np.flatnonzero(y == 1))]
    folds = [np.sort(dealt[i::k]) for i in range(k)]
    for i, f in enumerate(folds):
        if len(np.unique(y[f])) < 2:
            raise ValueError(f"fold {i} lacks one of the classes")
    return folds


@dataclass
class FoldResult:
    run: int
    fold: int
    tpr: float
    fpr: float
    auc: float
    scores: np.ndarray = field(repr=False, default=None)
    labels: np.ndarray = field(repr=False, default=None)


def evaluate_scores(scores, labels, threshold: float = 0.5, run: int = 0, fold: int = 0) -> FoldResult:
    labels = np.asarray(labels).astype(int)
    scores = np.asarray(scores, dtype=float)
    counts = ConfusionCounts.from_predictions(labels, scores >= threshold)
    t, f = tpr_fpr(counts)
    return FoldResult(run, fold, t, f, auc(scores, labels), scores, labels)


def mean_metrics(results: Sequence[FoldResult]) -> dict[str, float]:
    return {m: float(np.mean([getattr(r, m) for r in results])) for m in ("tpr", "fpr", "auc")}


DetectorFactory = Callable[[int], object]


def kfold_eval(seqs: Sequence[BehaviorSequence], make_detector: DetectorFactory, k: int = 5,
               seed: int = 0, run: int = 0, balance: bool = True,
               embedding_corpus: Sequence[BehaviorSequence] | None = None) -> list[FoldResult]:
    """Undersample, split into k stratified folds, train/test each fold.

    ``make_detector(seed)`` returns an unfitted detector exposing
    ``fit(X, y, embedding_corpus=...)`` and ``decision_function(X)``.
    """
    seqs = list(seqs)
    y = np.array([s.y if s.y is not None else -1 for s in seqs])
    keep = np.flatnonzero(y >= 0)
    if balance:
        keep = keep[undersample(y[keep], seed)]
    seqs = [seqs[i] for i in keep]
    y = y[keep]
    results = []
    for i, test in enumerate(kfold_indices(y, k, seed)):
        train = np.setdiff1d(np.arange(len(y)), test)
        det = make_detector(seed)
        corpus = embedding_corpus if embedding_corpus is not None else [seqs[j] for j in train]
        det.fit([seqs[j] for j in train], y[train], embedding_corpus=corpus)
        scores = det.decision_function([seqs[j] for j in test])
        results.append(evaluate_scores(scores, y[test], run=run, fold=i))
    return results


@dataclass
class RepeatSummary:
    runs: list[FoldResult]
    mean: dict[str, float]
    std: dict[str, float]


def repeat_eval(experiment: Callable[[int, int], list[FoldResult]], repeats: int = 10,
                seeds: Sequence[int] | None = None) -> RepeatSummary:
    """Run ``experiment(run, seed)`` per seed; mean/std over per-run means."""
    seeds = list(seeds) if seeds is not None else list(range(repeats))
    if len(seeds) != repeats:
        raise ValueError("need exactly one seed per repeat")
    if len(set(seeds)) != len(seeds):
        raise ValueError("repeat seeds must be distinct")
    rows, per_run = [], []
    for run, seed in enumerate(seeds):
        res = experiment(run, seed)
        rows.extend(res)
        per_run.append(mean_metrics(res))
    mean = {m: float(np.mean([r[m] for r in per_run])) for m in ("tpr", "fpr", "auc")}
    std = {m: (statistics.pstdev([r[m] for r in per_run]) if len(per_run) > 1 else 0.0)
           for m in ("tpr", "fpr", "auc")}
    return RepeatSummary(rows, mean, std)


def check_family_disjoint(train: Sequence[BehaviorSequence], test: Sequence[BehaviorSequence]) -> None:
    fam_train = {f for s in train if s.y == 1 for f in s.families}
    fam_test = {f for s in test if s.y == 1 for f in s.families}
    overlap = fam_train & fam_test
    if overlap:
        raise ValueError(f"test malware families also present in training: {sorted(overlap)}")


def check_channel_disjoint(a: Sequence[BehaviorSequence], b: Sequence[BehaviorSequence]) -> None:
    ca = {c for s in a for c in s.channel_ids}
    shared = ca.intersection(c for s in b for c in s.channel_ids)
    if shared:
        raise ValueError(f"{len(shared)} channel(s) appear in both splits")


def split_benign(benign: Sequence[BehaviorSequence], seed: int = 0):
    """Two disjoint halves of the benign sequences."""
    idx = np.random.Generator(np.random.PCG64(seed)).permutation(len(benign))
    half = len(idx) // 2
    return [benign[i] for i in sorted(idx[:half])], [benign[i] for i in sorted(idx[half:])]


def unknown_protocol(train_malware, train_benign, test_malware, test_benign,
                     make_detector: DetectorFactory, seed: int = 0, run: int = 0,
                     balance: bool = True, embedding_corpus=None) -> FoldResult:
    """Train on known families, test on unseen families plus held-out benign.

    Only the training side is balanced; AUC is insensitive to the test ratio.
    """
    train_malware, test_malware = list(train_malware), list(test_malware)
    train_benign, test_benign = list(train_benign), list(test_benign)
    check_family_disjoint(train_malware, test_malware)
    check_channel_disjoint(train_benign, test_benign)
    check_channel_disjoint(train_malware + train_benign, test_malware + test_benign)
    train = train_malware + train_benign
    test = test_malware + test_benign
    y_train = np.array([1] * len(train_malware) + [0] * len(train_benign))
    y_test = np.array([1] * len(test_malware) + [0] * len(test_benign))
    if balance:
        keep = undersample(y_train, seed)
        train, y_train = [train[i] for i in keep], y_train[keep]
    det = make_detector(seed)
    corpus = embedding_corpus if embedding_corpus is not None else train
    det.fit(train, y_train, embedding_corpus=corpus)
    return evaluate_scores(det.decision_function(test), y_test, run=run)


def write_metrics_csv(results: Sequence[FoldResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "fold", "tpr", "fpr", "auc"])
        for r in results:
            w.writerow([r.run, r.fold, repr(float(r.tpr)), repr(float(r.fpr)), repr(float(r.auc))])


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
