"""Size-constrained hierarchical merging with a near-linear schedule.

Merging runs in rounds. Each round every active cluster proposes its
nearest neighbor under the size-weighted metric; only proposals where
the source is no larger than the target are legal. Legal proposals are
applied in ascending metric order, skipping clusters already touched
this round. Above ``exact_threshold`` active clusters, candidates come
from random-projection buckets instead of a full scan, which keeps total
work near-linear in the input size.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core.rng import make_rng, split_seed
from ..core.types import AsiValue
from ..core.vectors import DegenerateVectorError, cosine_similarity, softmax, unit_rows
from . import kernels

_MIN_BUCKET = 2


@dataclass
class Cluster:
    id: int
    members: list[int]
    centroid: np.ndarray
    size: int
    pseudo_label: int | None = None
    confidence: float | None = None
    asi: AsiValue | None = None


@dataclass
class MergeParams:
    stop_cluster_count: int
    max_rounds: int = 64
    neighbor_k: int = 64
    exact_threshold: int = 1024

    def __post_init__(self) -> None:
        if self.stop_cluster_count < 1:
            raise ValueError("stop_cluster_count must be >= 1")


@dataclass
class MergeEvent:
    round: int
    source: int
    target: int
    metric: float

    def to_json(self) -> str:
        return json.dumps(
            {"round": self.round, "source": self.source,
             "target": self.target, "metric": self.metric}
        )


@dataclass
class ClusterResult:
    clusters: list[Cluster]
    merge_log: list[MergeEvent]
    rounds: int = 0
    assignment: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def partition(self) -> list[frozenset[int]]:
        return sorted(
            (frozenset(c.members) for c in self.clusters), key=lambda s: min(s)
        )


def merge_metric(a: Cluster, b: Cluster) -> float:
    """size(a) * size(b) * squared cosine distance between centroids."""
    cd = 1.0 - cosine_similarity(a.centroid, b.centroid)
    return float(a.size * b.size * cd * cd)


def _bucket_groups(
    cent: np.ndarray, act_ids: np.ndarray, neighbor_k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Candidate groups from random hyperplane sign codes.

    Bucket count targets ~neighbor_k members each. Extra bits compensate
    for sign cells left empty by concentrated data (empty cells cost
    nothing; oversized mixed cells cost quadratically). Buckets smaller
    than the minimum are coalesced with the following one so every
    cluster sees at least one candidate.
    """
    m = act_ids.shape[0]
    dim = cent.shape[1]
    bits = max(1, math.ceil(math.log2(max(m / max(neighbor_k, 2), 2.0))) + 3)
    planes = rng.standard_normal((bits, dim))
    signs = (cent[act_ids] @ planes.T) > 0.0
    codes = signs @ (1 << np.arange(bits, dtype=np.uint64))
    # stable sort keeps ascending id inside each bucket (ties -> lowest id)
    local = np.argsort(codes, kind="stable")
    order = act_ids[local]
    sorted_codes = codes[local]
    boundaries = np.flatnonzero(np.diff(sorted_codes)) + 1
    starts = np.concatenate(([0], boundaries, [m])).astype(np.int64)

    # coalesce undersized buckets into the next (last one into previous)
    keep = [0]
    for s in starts[1:-1]:
        if s - keep[-1] >= _MIN_BUCKET:
            keep.append(int(s))
    if len(keep) > 1 and m - keep[-1] < _MIN_BUCKET:
        keep.pop()
    keep.append(m)
    return order, np.asarray(keep, dtype=np.int64)


def cluster(
    embeddings: np.ndarray, params: MergeParams, seed: int = 0
) -> ClusterResult:
    """Partition rows of ``embeddings`` by iterative size-constrained merging.

    Stops as soon as the active count reaches ``stop_cluster_count``, a
    round applies no merge, or ``max_rounds`` elapse.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise ValueError("embeddings must be a non-empty 2-D array")
    unit_rows(emb)  # reject zero-norm rows up front
    n = emb.shape[0]

    sums = emb.copy()
    sizes = np.ones(n, dtype=np.int64)
    sizes_f = np.ones(n, dtype=np.float64)  # float view for the kernel
    active = np.ones(n, dtype=bool)
    parent = np.arange(n, dtype=np.int64)
    norms = np.linalg.norm(sums, axis=1)
    cent = sums / norms[:, None]

    log: list[MergeEvent] = []
    count = n
    rounds_run = 0
    for rnd in range(params.max_rounds):
        if count <= params.stop_cluster_count:
            break
        rounds_run = rnd + 1
        act_ids = np.flatnonzero(active)
        m = act_ids.shape[0]

        # order/starts index into the full id space; ascending id within a
        # group keeps the smallest-id tie-break
        if m <= params.exact_threshold:
            order = act_ids
            starts = np.array([0, m], dtype=np.int64)
        else:
            rng = make_rng(split_seed(seed, "cluster-proj", rnd))
            order, starts = _bucket_groups(cent, act_ids, params.neighbor_k, rng)

        best_idx, best_d = kernels.nearest_in_groups(cent, sizes_f, order, starts)

        # orient proposals: the smaller cluster is the source; on equal
        # sizes the lower id is. Sort by (metric, source, target).
        id_i = act_ids[best_idx[act_ids] >= 0]
        id_j = best_idx[id_i]
        si, sj = sizes[id_i], sizes[id_j]
        legal = si <= sj
        smaller = si < sj
        src_arr = np.where(smaller, id_i, np.minimum(id_i, id_j))[legal]
        tgt_arr = np.where(smaller, id_j, np.maximum(id_i, id_j))[legal]
        d_arr = best_d[id_i][legal]
        ordering = np.lexsort((tgt_arr, src_arr, d_arr))
        src_list = src_arr[ordering].tolist()
        tgt_list = tgt_arr[ordering].tolist()
        d_list = d_arr[ordering].tolist()

        # greedy selection: accept a proposal when neither end was touched
        # this round. Duplicate (src, tgt) pairs from equal-size twins need
        # no dedupe: after the first acceptance both ends are consumed.
        consumed: set[int] = set()
        acc_src: list[int] = []
        acc_tgt: list[int] = []
        for src, tgt, d in zip(src_list, tgt_list, d_list):
            if src in consumed or tgt in consumed:
                continue
            consumed.add(src)
            consumed.add(tgt)
            acc_src.append(src)
            acc_tgt.append(tgt)
            log.append(MergeEvent(round=rnd, source=src, target=tgt, metric=d))
            count -= 1
            if count <= params.stop_cluster_count:
                break
        if not acc_src:
            break

        # accepted pairs are endpoint-disjoint, so application vectorizes
        s_idx = np.asarray(acc_src, dtype=np.int64)
        t_idx = np.asarray(acc_tgt, dtype=np.int64)
        sums[t_idx] += sums[s_idx]
        sizes[t_idx] += sizes[s_idx]
        sizes_f[t_idx] = sizes[t_idx]
        active[s_idx] = False
        parent[s_idx] = t_idx
        norms_t = np.linalg.norm(sums[t_idx], axis=1)
        if np.any(norms_t <= 0.0):
            bad = int(t_idx[int(np.argmin(norms_t))])
            raise DegenerateVectorError(
                f"merges into cluster {bad} produced a zero-norm centroid"
            )
        cent[t_idx] = sums[t_idx] / norms_t[:, None]

    # resolve each item's root cluster
    assignment = np.arange(n, dtype=np.int64)
    for i in range(n):
        r = i
        while parent[r] != r:
            r = parent[r]
        assignment[i] = r

    clusters: list[Cluster] = []
    for root in np.flatnonzero(active):
        members = np.flatnonzero(assignment == root)
        clusters.append(
            Cluster(
                id=int(root),
                members=[int(v) for v in members],
                centroid=cent[root].copy(),
                size=int(members.shape[0]),
            )
        )
    return ClusterResult(
        clusters=clusters, merge_log=log, rounds=rounds_run, assignment=assignment
    )


def assign_pseudo_labels(clusters: list[Cluster], logits: np.ndarray) -> list[Cluster]:
    """Label each cluster with the argmax of its members' mean softmax.

    Ties break toward the lowest class index; the winning mean
    probability is kept as a confidence diagnostic.
    """
    probs = softmax(np.asarray(logits, dtype=np.float64), axis=1)
    for c in clusters:
        mean = probs[c.members].mean(axis=0)
        c.pseudo_label = int(np.argmax(mean))
        c.confidence = float(mean[c.pseudo_label])
    return clusters


def write_merge_log(path: str | Path, log: list[MergeEvent]) -> None:
    with Path(path).open("w") as fh:
        for event in log:
            fh.write(event.to_json() + "\n")
