import numpy as np
import pytest

from netclus.cluster import (
    Cluster,
    MergeParams,
    assign_pseudo_labels,
    cluster,
    merge_metric,
    write_merge_log,
)
from netclus.cluster import kernels
from netclus.core import make_rng
from oracles import brute_force_cluster


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def mk_cluster(cid, members, centroid, size=None):
    return Cluster(id=cid, members=members, centroid=unit(centroid),
                   size=size if size is not None else len(members))


def test_merge_metric_identical_centroids_zero():
    a = mk_cluster(0, [0], [1.0, 0.0], size=5)
    b = mk_cluster(1, [1], [2.0, 0.0], size=9)
    assert merge_metric(a, b) == pytest.approx(0.0, abs=1e-12)


def test_merge_metric_hand_value():
    # sizes 2 and 3, cosine distance 0.5 -> 6 * 0.25 = 1.5
    a = mk_cluster(0, [0, 1], [1.0, 0.0], size=2)
    b = mk_cluster(1, [2, 3, 4], [0.5, np.sqrt(3) / 2], size=3)
    assert merge_metric(a, b) == pytest.approx(1.5)


def test_merge_metric_linear_in_size():
    a = mk_cluster(0, [0], [1.0, 0.0], size=2)
    b = mk_cluster(1, [1], [0.0, 1.0], size=3)
    d1 = merge_metric(a, b)
    a.size = 4
    assert merge_metric(a, b) == pytest.approx(2 * d1)


def test_single_point_is_singleton():
    res = cluster(np.array([[1.0, 2.0]]), MergeParams(stop_cluster_count=1))
    assert len(res.clusters) == 1
    assert res.clusters[0].members == [0]
    assert res.merge_log == []


def test_two_identical_pairs_merge_first():
    emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    res = cluster(emb, MergeParams(stop_cluster_count=2))
    assert res.partition() == [frozenset({0, 1}), frozenset({2, 3})]


def test_separated_directions_recovered():
    rng = make_rng(0)
    dirs = np.eye(3)
    emb = np.vstack([dirs[i] + 0.02 * rng.standard_normal((20, 3)) for i in range(3)])
    res = cluster(emb, MergeParams(stop_cluster_count=3), seed=1)
    expected = [frozenset(range(0, 20)), frozenset(range(20, 40)), frozenset(range(40, 60))]
    assert res.partition() == expected


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force_oracle(seed):
    rng = make_rng(seed)
    n = int(rng.integers(5, 80))
    emb = rng.standard_normal((n, 6))
    stop = int(rng.integers(1, max(n // 3, 2)))
    got = cluster(emb, MergeParams(stop_cluster_count=stop), seed=seed).partition()
    want = brute_force_cluster(emb, stop)
    assert got == want


def test_merge_log_respects_size_rule():
    rng = make_rng(3)
    emb = rng.standard_normal((120, 5))
    res = cluster(emb, MergeParams(stop_cluster_count=10), seed=2)
    sizes = {i: 1 for i in range(120)}
    for e in res.merge_log:
        assert sizes[e.source] <= sizes[e.target]
        sizes[e.target] += sizes.pop(e.source)
    assert len(res.clusters) == 10


def test_equal_size_merge_uses_lower_id_source():
    emb = np.array([[1.0, 0.0], [1.0, 0.001]])
    res = cluster(emb, MergeParams(stop_cluster_count=1))
    assert len(res.merge_log) == 1
    assert res.merge_log[0].source == 0
    assert res.merge_log[0].target == 1


def test_deterministic_partitions():
    rng = make_rng(5)
    emb = rng.standard_normal((200, 8))
    a = cluster(emb, MergeParams(stop_cluster_count=12), seed=9)
    b = cluster(emb, MergeParams(stop_cluster_count=12), seed=9)
    assert a.partition() == b.partition()
    assert [(e.round, e.source, e.target) for e in a.merge_log] == [
        (e.round, e.source, e.target) for e in b.merge_log
    ]


def test_doubling_merge_count_bounded_by_log2():
    # merges that at least double the containing cluster are <= ceil(log2 n) + 2
    rng = make_rng(6)
    n = 256
    emb = rng.standard_normal((n, 4))
    res = cluster(emb, MergeParams(stop_cluster_count=1, max_rounds=256), seed=0)
    assert len(res.clusters) == 1

    sizes = {i: 1 for i in range(n)}
    holder = {i: i for i in range(n)}  # item -> current cluster id
    doubling = {i: 0 for i in range(n)}
    members = {i: [i] for i in range(n)}
    for e in res.merge_log:
        grew_double = sizes[e.target] <= sizes[e.source]
        for item in members[e.source]:
            holder[item] = e.target
            doubling[item] += 1  # source side always at least doubles
        if grew_double:
            for item in members[e.target]:
                doubling[item] += 1
        members[e.target].extend(members.pop(e.source))
        sizes[e.target] += sizes.pop(e.source)
    bound = int(np.ceil(np.log2(n))) + 2
    assert max(doubling.values()) <= bound


def test_stop_count_reached_exactly_when_possible():
    rng = make_rng(7)
    emb = rng.standard_normal((50, 4))
    res = cluster(emb, MergeParams(stop_cluster_count=7), seed=0)
    assert len(res.clusters) == 7


def test_zero_norm_embedding_rejected():
    emb = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(Exception, match="degenerate"):
        cluster(emb, MergeParams(stop_cluster_count=1))


def test_bucketed_path_used_above_threshold():
    rng = make_rng(8)
    emb = rng.standard_normal((300, 4))
    params = MergeParams(stop_cluster_count=5, exact_threshold=64)
    res = cluster(emb, params, seed=3)
    covered = sorted(i for c in res.clusters for i in c.members)
    assert covered == list(range(300))
    sizes = {i: 1 for i in range(300)}
    for e in res.merge_log:
        assert sizes[e.source] <= sizes[e.target]
        sizes[e.target] += sizes.pop(e.source)


def test_bucketed_path_deterministic():
    rng = make_rng(9)
    emb = rng.standard_normal((300, 4))
    params = MergeParams(stop_cluster_count=5, exact_threshold=64)
    assert (
        cluster(emb, params, seed=4).partition()
        == cluster(emb, params, seed=4).partition()
    )


def test_cluster_centroids_unit_norm():
    rng = make_rng(10)
    emb = 5.0 * rng.standard_normal((40, 3))
    res = cluster(emb, MergeParams(stop_cluster_count=4), seed=0)
    for c in res.clusters:
        assert np.linalg.norm(c.centroid) == pytest.approx(1.0, abs=1e-9)
        mean = emb[c.members].mean(axis=0)
        assert c.centroid == pytest.approx(mean / np.linalg.norm(mean))


def test_merge_log_jsonl(tmp_path):
    rng = make_rng(11)
    emb = rng.standard_normal((20, 3))
    res = cluster(emb, MergeParams(stop_cluster_count=4), seed=0)
    path = tmp_path / "log.jsonl"
    write_merge_log(path, res.merge_log)
    import json

    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert len(lines) == len(res.merge_log)
    assert set(lines[0]) == {"round", "source", "target", "metric"}


# ---------------------------------------------------------------------------
# pseudo-labels


def logits_for(probs_rows):
    return np.log(np.asarray(probs_rows, dtype=np.float64))


def test_pseudo_label_unanimous():
    clusters = [mk_cluster(0, [0, 1, 2], [1.0, 0.0])]
    logits = logits_for([[0.05, 0.05, 0.9]] * 3)
    assign_pseudo_labels(clusters, logits)
    assert clusters[0].pseudo_label == 2
    assert clusters[0].confidence == pytest.approx(0.9)


def test_pseudo_label_tie_breaks_low_index():
    clusters = [mk_cluster(0, [0, 1], [1.0, 0.0])]
    logits = logits_for([[0.1, 0.4, 0.1, 0.4], [0.1, 0.4, 0.1, 0.4]])
    assign_pseudo_labels(clusters, logits)
    assert clusters[0].pseudo_label == 1


def test_pseudo_label_majority_mean_softmax():
    clusters = [mk_cluster(0, list(range(10)), [1.0, 0.0])]
    rows = [[0.8, 0.2]] * 6 + [[0.2, 0.8]] * 4
    assign_pseudo_labels(clusters, logits_for(rows))
    assert clusters[0].pseudo_label == 0
    assert clusters[0].confidence == pytest.approx(0.8 * 0.6 + 0.2 * 0.4)


# ---------------------------------------------------------------------------
# kernels


def _random_problem(seed, n=200, dim=6):
    rng = make_rng(seed)
    cent = rng.standard_normal((n, dim))
    cent /= np.linalg.norm(cent, axis=1, keepdims=True)
    sizes = rng.integers(1, 50, n).astype(np.float64)
    return cent, sizes


@pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba unavailable")
@pytest.mark.parametrize("seed", [0, 1])
def test_kernel_backends_agree_exact(seed):
    cent, sizes = _random_problem(seed)
    order = np.arange(cent.shape[0], dtype=np.int64)
    starts = np.array([0, cent.shape[0]], dtype=np.int64)
    a = kernels.nearest_in_groups_numpy(cent, sizes, order, starts)
    b = kernels.nearest_in_groups_numba(cent, sizes, order, starts)
    assert np.array_equal(a[0], b[0])
    assert a[1] == pytest.approx(b[1], rel=1e-12)


@pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba unavailable")
def test_kernel_backends_agree_grouped():
    cent, sizes = _random_problem(2, n=300)
    order = np.arange(300, dtype=np.int64)
    starts = np.array([0, 3, 80, 81, 200, 300], dtype=np.int64)  # incl. tiny groups
    a = kernels.nearest_in_groups_numpy(cent, sizes, order, starts)
    b = kernels.nearest_in_groups_numba(cent, sizes, order, starts)
    assert np.array_equal(a[0], b[0])
    assert a[1] == pytest.approx(b[1], rel=1e-12)
    # singleton group members get no candidate
    assert a[0][order[3]] != -1
    assert a[0][80] == -1


def test_env_flag_selects_backend():
    import os
    import subprocess
    import sys

    code = (
        "from netclus.cluster import kernels; print(kernels.BACKEND)"
    )
    env = dict(os.environ, NETCLUS_NUMBA="0")
    out = subprocess.run(
        [sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True
    )
    assert out.stdout.strip() == "numpy"
