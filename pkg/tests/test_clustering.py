import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from cbseq.channeling import build_channels
from cbseq.clustering import (DBSCAN, ChannelClusterer, FeatureScaler, UnionFind, cluster_channels,
                              dbscan, read_clusters_jsonl, write_clusters_jsonl, write_scalers)
from cbseq.core import Label
from cbseq.synthgen import ScenarioSpec, generate


def partition(labels):
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, set()).add(i)
    return {frozenset(g) for g in groups.values()}


def components(points, eps):
    """Brute force: connected components of the full pairwise <= eps graph."""
    adj = cdist(points, points) <= eps
    return connected_components(adj, directed=False)[1]


def test_simple_geometry():
    pts = np.array([[0, 0, 0, 0, 0], [0.5, 0, 0, 0, 0], [10, 0, 0, 0, 0]], float)
    assert list(dbscan(pts, eps=1)) == [0, 0, 1]


def test_identical_points_one_cluster():
    assert set(dbscan(np.ones((7, 5)), eps=0)) == {0}


def test_eps_is_inclusive():
    assert list(dbscan(np.array([[0.0], [1.0]]), eps=1.0)) == [0, 0]


def test_empty_input():
    assert len(dbscan(np.empty((0, 5)))) == 0


def test_invalid_parameters():
    with pytest.raises(ValueError):
        dbscan(np.zeros((2, 2)), eps=-1)
    with pytest.raises(ValueError):
        dbscan(np.zeros((2, 2)), min_pts=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.floats(0.05, 3.0), st.integers(0, 2**32 - 1))
def test_matches_connected_components(n, eps, seed):
    pts = np.random.default_rng(seed).normal(size=(n, 5))
    assert partition(dbscan(pts, eps)) == partition(components(pts, eps))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2**32 - 1))
def test_order_invariance_and_nesting(n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 5))
    perm = rng.permutation(n)
    a = dbscan(pts, 1.0)
    b = dbscan(pts[perm], 1.0)
    assert partition(a) == partition(_unpermute(b, perm))
    # shrinking eps never merges separate clusters
    small = dbscan(pts, 0.5)
    for grp in partition(small):
        assert len({a[i] for i in grp}) == 1


def _unpermute(labels, perm):
    out = np.empty_like(labels)
    out[perm] = labels
    return out


def test_min_pts_noise_and_border():
    pts = np.array([[0.0], [0.5], [1.0], [1.8], [10.0]])
    labels = dbscan(pts, eps=0.6, min_pts=3)
    # 0.5 is the only core point (neighbours 0.0 and 1.0); 1.8 and 10 are noise
    assert list(labels) == [0, 0, 0, -1, -1]


def test_estimator_api():
    est = DBSCAN(eps=2.0)
    assert est.get_params() == {"eps": 2.0, "min_pts": 1}
    labels = est.fit_predict(np.array([[0.0, 0], [1, 0], [9, 9]]))
    assert list(labels) == [0, 0, 1] and list(est.labels_) == [0, 0, 1]


def test_union_find():
    uf = UnionFind(5)
    uf.union(0, 3)
    uf.union(3, 4)
    assert uf.find(4) == uf.find(0) != uf.find(1)


def test_scaler_log_and_zscore():
    X = np.array([[0, 1, 10], [9, 1, 100.0]])
    sc = FeatureScaler(standardize=False).fit(X)
    assert np.allclose(sc.transform(X), np.log1p(X))
    z = FeatureScaler().fit(X)
    out = z.transform(X)
    assert np.allclose(out.mean(axis=0), 0) and np.allclose(out[:, 1], 0)
    back = FeatureScaler.from_dict(z.to_dict())
    assert np.array_equal(back.transform(X), out)
    with pytest.raises(ValueError):
        FeatureScaler().fit(np.array([[-1.0, 0, 0]]))


def test_slicing_separates_identical_channels(flow_factory):
    a = flow_factory(src="10.0.0.1", start=100.0)
    b = flow_factory(src="10.0.0.5", start=100.0 + 14400)
    clusters = cluster_channels(build_channels([a, b]))
    assert len(clusters) == 2
    assert [c.time_slice for c in clusters] == [0, 1]


def test_fifty_identical_victims_one_cluster():
    spec = ScenarioSpec("multi_node_transient", "worm", n_hosts=1, n_peers=50, flows_per_channel=2,
                        period=4.0, flow_gap=3.0, client_pkts=20, server_pkts=8, bytes_up=30000,
                        bytes_down=600, flow_duration=2.0, sport_strategy="sequential",
                        dst_ports=(25,), start=1_700_006_400.0, seed=3)
    flows, meta = generate(spec)
    channels = build_channels(flows)
    assert len(channels) == 50
    feats = {tuple(c["features"]) for c in meta["channels"]}
    assert len(feats) == 1
    clusters = cluster_channels(channels, eps=1.0)
    assert [len(c.members) for c in clusters] == [50]


def test_reference_corpus_purity(ref_day):
    clusters = cluster_channels(build_channels(ref_day[0]), eps=1.0)
    assert all(c.label is not Label.UNLABELED for c in clusters)
    ids = [c.cluster_id for c in clusters]
    assert ids == list(range(len(ids)))


def test_clusterer_permutation_invariant(ref_day, rng):
    channels = build_channels(ref_day[0][:3000])
    shuffled = [channels[i] for i in rng.permutation(len(channels))]
    a = {frozenset(c.channel_ids) for c in cluster_channels(channels)}
    b = {frozenset(c.channel_ids) for c in cluster_channels(shuffled)}
    assert a == b


def test_clusters_io(tmp_path, ref_day):
    est = ChannelClusterer().fit(build_channels(ref_day[0][:2000]))
    p = tmp_path / "k.jsonl"
    write_clusters_jsonl(est.clusters_, p)
    assert read_clusters_jsonl(p) == est.clusters_
    write_scalers(est.scalers_, tmp_path / "s.json")
    assert (tmp_path / "s.json").stat().st_size > 0
