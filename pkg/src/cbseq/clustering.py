"""DBSCAN channel clustering over scaled abstract features, per time slice."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .channeling import abstract_features, channel_from_dict, channel_to_dict
from .core import Channel, Label, merge_labels

SLICE = 14400.0


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, u: int) -> int:
        root = u
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[u] != root:
            self.parent[u], u = root, self.parent[u]
        return root

    def union(self, u: int, v: int) -> None:
        ru, rv = self.find(u), self.find(v)
        if ru == rv:
            return
        if self.rank[ru] < self.rank[rv]:
            ru, rv = rv, ru
        self.parent[rv] = ru
        if self.rank[ru] == self.rank[rv]:
            self.rank[ru] += 1


def _relabel(roots: Sequence[int]) -> np.ndarray:
    """Number groups 0.. in order of their first member; -1 stays -1."""
    mapping: dict[int, int] = {}
    out = np.empty(len(roots), dtype=int)
    for i, r in enumerate(roots):
        if r < 0:
            out[i] = -1
            continue
        if r not in mapping:
            mapping[r] = len(mapping)
        out[i] = mapping[r]
    return out


def dbscan(points, eps: float = 1.0, min_pts: int = 1) -> np.ndarray:
    """Euclidean DBSCAN; returns a cluster label per point (-1 for noise).

    Core points are linked when within ``eps`` (inclusive). A border point
    joins the cluster of its nearest core neighbour (ties to the smaller
    label), which keeps the partition independent of input order. With
    ``min_pts=1`` every point is core and clusters are exactly the connected
    components of the eps-neighbourhood graph.
    """
    X = check_array(points, dtype=float, ensure_min_samples=0)
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    n = len(X)
    if n == 0:
        return np.empty(0, dtype=int)
    tree = cKDTree(X)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    degree = np.ones(n, dtype=int)
    np.add.at(degree, pairs[:, 0], 1)
    np.add.at(degree, pairs[:, 1], 1)
    core = degree >= min_pts

    uf = UnionFind(n)
    for i, j in pairs:
        if core[i] and core[j]:
            uf.union(int(i), int(j))
    roots = [uf.find(i) if core[i] else -1 for i in range(n)]

    if min_pts > 1:
        core_labels = _relabel(roots)
        best: dict[int, tuple[float, int]] = {}
        for i, j in pairs:
            for b, c in ((i, j), (j, i)):
                if not core[b] and core[c]:
                    cand = (float(np.linalg.norm(X[b] - X[c])), int(core_labels[c]))
                    if b not in best or cand < best[b]:
                        best[b] = cand
        labels = core_labels.copy()
        for b, (_, lab) in best.items():
            labels[b] = lab
        return _canonical_order(labels)
    return _relabel(roots)


def _canonical_order(labels: np.ndarray) -> np.ndarray:
    return _relabel([int(x) for x in labels])


class DBSCAN(ClusterMixin, BaseEstimator):
    def __init__(self, eps: float = 1.0, min_pts: int = 1):
        self.eps = eps
        self.min_pts = min_pts

    def fit(self, X, y=None):
        self.labels_ = dbscan(X, self.eps, self.min_pts)
        return self


class FeatureScaler(TransformerMixin, BaseEstimator):
    """log1p, optionally followed by a z-score (constant features map to 0).

    Without standardization the fit is a no-op and eps is measured in
    log-units: two channels are neighbours when their features agree to
    within roughly a factor of e.
    """

    def __init__(self, standardize: bool = True):
        self.standardize = standardize

    def fit(self, X, y=None):
        Z = np.log1p(self._check(X))
        if self.standardize:
            self.mean_ = Z.mean(axis=0)
            std = Z.std(axis=0)
            self.scale_ = np.where(std > 0, std, 1.0)
        else:
            self.mean_ = np.zeros(Z.shape[1])
            self.scale_ = np.ones(Z.shape[1])
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        return (np.log1p(self._check(X)) - self.mean_) / self.scale_

    @staticmethod
    def _check(X):
        X = check_array(X, dtype=float)
        if (X < 0).any():
            raise ValueError("abstract features must be non-negative")
        return X

    def to_dict(self) -> dict:
        check_is_fitted(self, "mean_")
        return {"standardize": self.standardize, "mean": self.mean_.tolist(),
                "scale": self.scale_.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        sc = cls(d.get("standardize", True))
        sc.mean_ = np.asarray(d["mean"], dtype=float)
        sc.scale_ = np.asarray(d["scale"], dtype=float)
        return sc


@dataclass(frozen=True)
class ChannelCluster:
    cluster_id: int
    time_slice: int
    members: tuple[Channel, ...]

    @property
    def label(self) -> Label:
        return merge_labels(ch.label for ch in self.members)

    @property
    def families(self) -> tuple[str, ...]:
        return tuple(sorted({ch.family for ch in self.members if ch.family}))

    @property
    def channel_ids(self) -> list[str]:
        return [ch.channel_id for ch in self.members]


def _channel_order(ch: Channel):
    return ch.start_time, ch.window, ch.ip_pair


class ChannelClusterer(BaseEstimator):
    """Slice channels into fixed time slices and DBSCAN each slice.

    After ``fit``: ``clusters_`` (list of :class:`ChannelCluster`, ids unique
    across slices) and ``scalers_`` (slice index -> fitted scaler).
    ``standardize`` switches the per-slice z-score on top of log1p.
    """

    def __init__(self, eps: float = 1.0, min_pts: int = 1, slice_seconds: float = SLICE,
                 standardize: bool = False):
        self.eps = eps
        self.min_pts = min_pts
        self.slice_seconds = slice_seconds
        self.standardize = standardize

    def fit(self, channels: Iterable[Channel], y=None):
        channels = sorted(channels, key=_channel_order)
        by_slice: dict[int, list[Channel]] = defaultdict(list)
        for ch in channels:
            by_slice[int(math.floor(ch.start_time / self.slice_seconds))].append(ch)
        self.scalers_: dict[int, FeatureScaler] = {}
        self.clusters_: list[ChannelCluster] = []
        for sl in sorted(by_slice):
            members = by_slice[sl]
            feats = np.array([abstract_features(ch).as_vector() for ch in members])
            scaler = FeatureScaler(self.standardize).fit(feats)
            self.scalers_[sl] = scaler
            labels = dbscan(scaler.transform(feats), self.eps, self.min_pts)
            groups: dict[int, list[Channel]] = defaultdict(list)
            noise = []
            for ch, lab in zip(members, labels):
                (noise.append(ch) if lab < 0 else groups[int(lab)].append(ch))
            # noise points (min_pts > 1 only) become singleton clusters
            ordered = [groups[k] for k in sorted(groups)] + [[ch] for ch in noise]
            for group in ordered:
                self.clusters_.append(ChannelCluster(len(self.clusters_), sl, tuple(group)))
        return self

    def fit_predict(self, channels, y=None) -> list[ChannelCluster]:
        return self.fit(channels).clusters_


def cluster_channels(channels: Iterable[Channel], eps: float = 1.0, min_pts: int = 1,
                     slice_seconds: float = SLICE, standardize: bool = False) -> list[ChannelCluster]:
    return ChannelClusterer(eps, min_pts, slice_seconds, standardize).fit_predict(channels)


def cluster_to_dict(cluster: ChannelCluster) -> dict:
    return {
        "cluster_id": cluster.cluster_id,
        "time_slice": cluster.time_slice,
        "label": cluster.label.value,
        "members": [channel_to_dict(ch) for ch in cluster.members],
    }


def cluster_from_dict(d: dict) -> ChannelCluster:
    return ChannelCluster(int(d["cluster_id"]), int(d["time_slice"]),
                          tuple(channel_from_dict(m) for m in d["members"]))


def write_clusters_jsonl(clusters: Iterable[ChannelCluster], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in clusters:
            fh.write(json.dumps(cluster_to_dict(c), separators=(",", ":")) + "\n")


def read_clusters_jsonl(path) -> list[ChannelCluster]:
    with open(path, encoding="utf-8") as fh:
        return [cluster_from_dict(json.loads(line)) for line in fh if line.strip()]


def write_scalers(scalers: dict[int, FeatureScaler], path) -> None:
    payload = {str(k): v.to_dict() for k, v in sorted(scalers.items())}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
