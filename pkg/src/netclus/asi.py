"""Affiliation Strength Index: per-flow and per-cluster validation scores.

For a flow, ``ratio`` is the fraction of its k nearest clusters (by
centroid cosine distance, nearest included) sharing the nearest
cluster's pseudo-label, and ``strength`` contrasts mean member distance
of the nearest cluster against the second-nearest:
``|d_inter - d_intra| / max(d_inter, d_intra)``.

A flow that is itself a member of the cluster being measured is excluded
from that cluster's member-distance average.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .cluster.merge import Cluster
from .core.types import AsiValue
from .core.vectors import unit_rows


class Route(enum.Enum):
    FAST_PATH = "fast_path"
    FALLBACK = "fallback"


@dataclass
class Discriminant:
    """Thresholds: fast path needs ratio > gamma and strength > eta."""

    gamma: float = 0.5
    eta: float = 0.5
    k: int = 5
    gamma_nov: float = 0.9
    eta_nov: float = 0.6

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class ClusterGeometry:
    """Precomputed arrays for batch ASI evaluation over a frozen clustering."""

    centroids: np.ndarray  # K x d, unit rows
    mean_units: np.ndarray  # K x d, mean of unit member embeddings
    sizes: np.ndarray  # K
    labels: np.ndarray  # K pseudo-labels
    member_pos: np.ndarray  # n -> cluster position (or -1)
    clusters: list[Cluster]

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]


def cluster_geometry(clusters: list[Cluster], embeddings: np.ndarray) -> ClusterGeometry:
    emb_unit = unit_rows(embeddings)
    k = len(clusters)
    dim = emb_unit.shape[1]
    centroids = np.empty((k, dim))
    mean_units = np.empty((k, dim))
    sizes = np.empty(k, dtype=np.int64)
    labels = np.empty(k, dtype=np.int64)
    member_pos = np.full(emb_unit.shape[0], -1, dtype=np.int64)
    for pos, c in enumerate(clusters):
        if c.pseudo_label is None:
            raise ValueError(f"cluster {c.id} has no pseudo-label; assign labels first")
        centroids[pos] = c.centroid
        mean_units[pos] = emb_unit[c.members].mean(axis=0)
        sizes[pos] = c.size
        labels[pos] = c.pseudo_label
        member_pos[c.members] = pos
    return ClusterGeometry(
        centroids=centroids,
        mean_units=mean_units,
        sizes=sizes,
        labels=labels,
        member_pos=member_pos,
        clusters=clusters,
    )


def _member_mean_distance(
    geo: ClusterGeometry,
    probe_units: np.ndarray,
    cluster_pos: np.ndarray,
    probe_member_pos: np.ndarray,
) -> np.ndarray:
    """Mean cosine distance from each probe to members of ``cluster_pos``.

    The probe itself is excluded when it belongs to that cluster; a probe
    that is its cluster's only member gets distance 0.
    """
    base = 1.0 - np.einsum("ij,ij->i", probe_units, geo.mean_units[cluster_pos])
    base = np.maximum(base, 0.0)
    sz = geo.sizes[cluster_pos].astype(np.float64)
    is_member = probe_member_pos == cluster_pos
    out = base.copy()
    solo = is_member & (sz <= 1)
    adjust = is_member & (sz > 1)
    out[solo] = 0.0
    out[adjust] = base[adjust] * sz[adjust] / (sz[adjust] - 1.0)
    return out


def batch_sample_asi(
    geo: ClusterGeometry,
    probe_units: np.ndarray,
    probe_member_pos: np.ndarray,
    disc: Discriminant,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    """Vectorized ASI over probe rows.

    Returns (ratio, strength, nearest cluster position, k-truncation flag).
    """
    k_total = geo.num_clusters
    if k_total < 2:
        raise ValueError("ASI needs at least 2 clusters")
    dist = 1.0 - probe_units @ geo.centroids.T
    order = np.argsort(dist, axis=1, kind="stable")
    nearest = order[:, 0]
    second = order[:, 1]

    k_eff = min(disc.k, k_total)
    truncated = k_eff < disc.k
    near_labels = geo.labels[order[:, :k_eff]]
    ratio = np.mean(near_labels == geo.labels[nearest][:, None], axis=1)

    d_intra = _member_mean_distance(geo, probe_units, nearest, probe_member_pos)
    d_inter = _member_mean_distance(geo, probe_units, second, probe_member_pos)
    denom = np.maximum(d_intra, d_inter)
    with np.errstate(invalid="ignore", divide="ignore"):
        strength = np.where(denom > 0.0, np.abs(d_inter - d_intra) / denom, 0.0)
    return ratio, strength, nearest, truncated


def sample_asi(
    embedding: np.ndarray,
    clusters: list[Cluster],
    embeddings: np.ndarray,
    disc: Discriminant,
    member_index: int | None = None,
) -> AsiValue:
    """ASI of a single flow against a frozen cluster set."""
    geo = cluster_geometry(clusters, embeddings)
    return sample_asi_geo(geo, embedding, disc, member_index)


def sample_asi_geo(
    geo: ClusterGeometry,
    embedding: np.ndarray,
    disc: Discriminant,
    member_index: int | None = None,
) -> AsiValue:
    probe = unit_rows(np.asarray(embedding, dtype=np.float64)[None, :])
    pos = np.array(
        [geo.member_pos[member_index] if member_index is not None else -1],
        dtype=np.int64,
    )
    ratio, strength, _, truncated = batch_sample_asi(geo, probe, pos, disc)
    return AsiValue(ratio=float(ratio[0]), strength=float(strength[0]), k_truncated=truncated)


def route(asi: AsiValue, disc: Discriminant) -> Route:
    """Fast path only when both components strictly clear their thresholds."""
    if asi.ratio > disc.gamma and asi.strength > disc.eta:
        return Route.FAST_PATH
    return Route.FALLBACK


def cluster_asi(
    target: Cluster,
    clusters: list[Cluster],
    embeddings: np.ndarray,
    disc: Discriminant,
) -> AsiValue:
    """Cluster-level ASI: ratio at the centroid, strength averaged over members."""
    geo = cluster_geometry(clusters, embeddings)
    return cluster_asi_geo(geo, clusters.index(target), embeddings, disc)


def cluster_asi_geo(
    geo: ClusterGeometry,
    position: int,
    embeddings: np.ndarray,
    disc: Discriminant,
) -> AsiValue:
    c = geo.clusters[position]
    probe = unit_rows(c.centroid[None, :])
    ratio, _, _, truncated = batch_sample_asi(
        geo, probe, np.array([-1], dtype=np.int64), disc
    )
    member_units = unit_rows(np.asarray(embeddings, dtype=np.float64)[c.members])
    member_pos = geo.member_pos[c.members]
    _, strengths, _, _ = batch_sample_asi(geo, member_units, member_pos, disc)
    return AsiValue(
        ratio=float(ratio[0]), strength=float(np.mean(strengths)), k_truncated=truncated
    )


def all_cluster_asi(
    geo: ClusterGeometry,
    sample_strengths: np.ndarray,
    disc: Discriminant,
) -> list[AsiValue]:
    """Cluster-level ASI for every cluster in one pass.

    ``sample_strengths`` holds the per-row strengths already computed over
    the full embedding matrix; centroid ratios come from a single batch.
    """
    ratios, _, _, truncated = batch_sample_asi(
        geo, geo.centroids, np.full(geo.num_clusters, -1, dtype=np.int64), disc
    )
    return [
        AsiValue(
            ratio=float(ratios[pos]),
            strength=float(np.mean(sample_strengths[c.members])),
            k_truncated=truncated,
        )
        for pos, c in enumerate(geo.clusters)
    ]


def flag_novel(asi: AsiValue, disc: Discriminant) -> bool:
    """Cohesive but label-inconsistent: low ratio together with high strength."""
    return asi.ratio < disc.gamma_nov and asi.strength > disc.eta_nov
