"""Training objectives with analytic gradients.

Every loss returns its scalar value together with gradients, all in
float64. Class centroids are constants within a gradient step; the bank
is refreshed by ``CentroidBank.update`` after the optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core.types import LossWeights

PROB_FLOOR = 1e-12


class UninitializedCentroidError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# centroid bank


class CentroidBank:
    """Per-class embedding centroids maintained by exponential moving average.

    A class seen for the first time takes the batch mean directly; after
    that, ``c <- momentum * c + (1 - momentum) * batch_mean``.
    """

    def __init__(self, num_classes: int, dim: int, momentum: float = 0.9):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        self.num_classes = num_classes
        self.dim = dim
        self.momentum = momentum
        self.centroids = np.zeros((num_classes, dim), dtype=np.float64)
        self.initialized = np.zeros(num_classes, dtype=bool)

    def update(self, embeddings: np.ndarray, labels: np.ndarray) -> None:
        embeddings = np.asarray(embeddings, dtype=np.float64)
        labels = np.asarray(labels)
        for cls in np.unique(labels):
            mean = embeddings[labels == cls].mean(axis=0)
            if self.initialized[cls]:
                self.centroids[cls] = (
                    self.momentum * self.centroids[cls] + (1.0 - self.momentum) * mean
                )
            else:
                self.centroids[cls] = mean
                self.initialized[cls] = True

    def require(self, labels: np.ndarray) -> None:
        missing = np.unique(labels[~self.initialized[labels]])
        if missing.size:
            raise UninitializedCentroidError(
                f"centroid not initialized for class(es) {missing.tolist()}"
            )

    def copy(self) -> "CentroidBank":
        other = CentroidBank(self.num_classes, self.dim, self.momentum)
        other.centroids = self.centroids.copy()
        other.initialized = self.initialized.copy()
        return other


# ---------------------------------------------------------------------------
# loss results


@dataclass
class ClsLoss:
    value: float
    grad_logits: np.ndarray
    clamped: bool = False


@dataclass
class CenterLoss:
    value: float
    grad_embeddings: np.ndarray


@dataclass
class TripletLoss:
    value: float
    grad_embeddings: np.ndarray
    num_triplets: int = 0
    num_active: int = 0


@dataclass
class ClusterLoss:
    value: float
    grad_embeddings: np.ndarray
    center: CenterLoss = field(repr=False, default=None)  # type: ignore[assignment]
    triplet: TripletLoss = field(repr=False, default=None)  # type: ignore[assignment]


@dataclass
class CfeLoss:
    value: float
    grad_embeddings: np.ndarray
    grad_logits: np.ndarray
    cls: ClsLoss = field(repr=False, default=None)  # type: ignore[assignment]
    clus: ClusterLoss = field(repr=False, default=None)  # type: ignore[assignment]


@dataclass
class DistillLoss:
    value: float
    grad_embeddings: np.ndarray
    grad_logits: np.ndarray
    mse_part: float = 0.0
    kl_part: float = 0.0
    clamped: bool = False


# ---------------------------------------------------------------------------
# classification


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def classification_loss(probs: np.ndarray, labels_onehot: np.ndarray) -> ClsLoss:
    """Mean cross-entropy; gradient is w.r.t. the logits behind ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels_onehot, dtype=np.float64)
    n = probs.shape[0]
    p_true = np.sum(probs * y, axis=1)
    clamped = bool(np.any(p_true < PROB_FLOOR))
    value = float(-np.mean(np.log(np.maximum(p_true, PROB_FLOOR))))
    return ClsLoss(value=value, grad_logits=(probs - y) / n, clamped=clamped)


# ---------------------------------------------------------------------------
# cosine helpers (batch rows)


def _row_cosine(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    s = np.sum(a * b, axis=1) / (na * nb)
    return s, na, nb


def _cos_grad_wrt_a(a, b, s, na, nb) -> np.ndarray:
    # d cos(a,b) / d a = b/(|a||b|) - cos * a/|a|^2
    return b / (na * nb)[:, None] - (s / na**2)[:, None] * a


# ---------------------------------------------------------------------------
# center loss


def center_loss(embeddings: np.ndarray, labels: np.ndarray, bank: CentroidBank) -> CenterLoss:
    """Mean cosine distance from each embedding to its class centroid."""
    h = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    bank.require(labels)
    c = bank.centroids[labels]
    n = h.shape[0]
    s, nh, nc = _row_cosine(h, c)
    value = float(np.mean(1.0 - s))
    grad = -_cos_grad_wrt_a(h, c, s, nh, nc) / n
    return CenterLoss(value=value, grad_embeddings=grad)


# ---------------------------------------------------------------------------
# triplet loss


def sample_triplets(
    labels: np.ndarray, cap: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Indices (anchor, positive, negative) of valid triplets in the batch.

    All valid triplets when there are at most ``cap``; otherwise ``cap``
    distinct triplets sampled uniformly. Triplets are decoded from flat
    lexicographic indices so the full set is never materialized.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    class_members = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
    pos_counts = np.array([class_members[int(labels[i])].size - 1 for i in range(n)], dtype=np.int64)
    neg_counts = np.array([n - class_members[int(labels[i])].size for i in range(n)], dtype=np.int64)
    per_anchor = pos_counts * neg_counts
    total = int(per_anchor.sum())
    if total == 0:
        e = np.empty(0, dtype=np.int64)
        return e, e.copy(), e.copy()

    if total <= cap:
        flat = np.arange(total, dtype=np.int64)
    else:
        chosen: set[int] = set()
        while len(chosen) < cap:
            for g in rng.integers(0, total, size=cap - len(chosen)):
                chosen.add(int(g))
                if len(chosen) == cap:
                    break
        flat = np.array(sorted(chosen), dtype=np.int64)

    prefix = np.concatenate(([0], np.cumsum(per_anchor)))
    anchors = np.searchsorted(prefix, flat, side="right") - 1
    rem = flat - prefix[anchors]
    p_idx = rem // neg_counts[anchors]
    n_idx = rem % neg_counts[anchors]

    pos = np.empty_like(anchors)
    neg = np.empty_like(anchors)
    neg_members = {c: np.flatnonzero(labels != c) for c in class_members}
    for t, a in enumerate(anchors):
        cm = class_members[int(labels[a])]
        q = int(np.searchsorted(cm, a))
        pi = int(p_idx[t])
        pos[t] = cm[pi] if pi < q else cm[pi + 1]
        neg[t] = neg_members[int(labels[a])][n_idx[t]]
    return anchors, pos, neg


def triplet_loss(
    embeddings: np.ndarray,
    labels: np.ndarray,
    margin: float,
    cap: int = 512,
    rng: np.random.Generator | None = None,
) -> TripletLoss:
    """Mean over triplets of max(cos(a,n) - cos(a,p), margin).

    The max floors each term at the margin exactly as formulated; floored
    triplets contribute zero gradient.
    """
    h = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if rng is None:
        rng = np.random.default_rng(0)
    a_idx, p_idx, n_idx = sample_triplets(labels, cap, rng)
    grad = np.zeros_like(h)
    if a_idx.size == 0:
        return TripletLoss(value=0.0, grad_embeddings=grad)

    ha, hp, hn = h[a_idx], h[p_idx], h[n_idx]
    s_an, na, nn = _row_cosine(ha, hn)
    s_ap, _, npnorm = _row_cosine(ha, hp)
    vals = s_an - s_ap
    t = a_idx.size
    value = float(np.mean(np.maximum(vals, margin)))
    active = vals > margin
    if np.any(active):
        w = active.astype(np.float64) / t
        g_a = (_cos_grad_wrt_a(ha, hn, s_an, na, nn)
               - _cos_grad_wrt_a(ha, hp, s_ap, na, npnorm)) * w[:, None]
        g_n = _cos_grad_wrt_a(hn, ha, s_an, nn, na) * w[:, None]
        g_p = -_cos_grad_wrt_a(hp, ha, s_ap, npnorm, na) * w[:, None]
        np.add.at(grad, a_idx, g_a)
        np.add.at(grad, n_idx, g_n)
        np.add.at(grad, p_idx, g_p)
    return TripletLoss(
        value=value,
        grad_embeddings=grad,
        num_triplets=t,
        num_active=int(active.sum()),
    )


# ---------------------------------------------------------------------------
# combined objectives


def cluster_loss(
    embeddings: np.ndarray,
    labels: np.ndarray,
    bank: CentroidBank,
    weights: LossWeights,
    rng: np.random.Generator | None = None,
) -> ClusterLoss:
    """center + beta * triplet."""
    cen = center_loss(embeddings, labels, bank)
    tri = triplet_loss(embeddings, labels, weights.margin, weights.triplet_cap, rng)
    return ClusterLoss(
        value=cen.value + weights.beta * tri.value,
        grad_embeddings=cen.grad_embeddings + weights.beta * tri.grad_embeddings,
        center=cen,
        triplet=tri,
    )


def cfe_loss(
    probs: np.ndarray,
    labels_onehot: np.ndarray,
    embeddings: np.ndarray,
    labels: np.ndarray,
    bank: CentroidBank,
    weights: LossWeights,
    rng: np.random.Generator | None = None,
) -> CfeLoss:
    """classification + lambda * cluster."""
    cls = classification_loss(probs, labels_onehot)
    clus = cluster_loss(embeddings, labels, bank, weights, rng)
    return CfeLoss(
        value=cls.value + weights.lam * clus.value,
        grad_embeddings=weights.lam * clus.grad_embeddings,
        grad_logits=cls.grad_logits,
        cls=cls,
        clus=clus,
    )


def distillation_loss(
    student_emb: np.ndarray,
    teacher_emb: np.ndarray,
    student_probs: np.ndarray,
    teacher_probs: np.ndarray,
) -> DistillLoss:
    """Embedding MSE plus teacher->student KL, averaged with a 1/(2N) prefactor.

    Per sample: mean-over-dims squared embedding error plus
    sum_c p_c log(p_c / p_hat_c). Gradients are w.r.t. the student
    embedding and the student logits (softmax assumed downstream).
    """
    he = np.asarray(student_emb, dtype=np.float64)
    te = np.asarray(teacher_emb, dtype=np.float64)
    sp = np.asarray(student_probs, dtype=np.float64)
    tp = np.asarray(teacher_probs, dtype=np.float64)
    n, d = he.shape

    diff = he - te
    mse_rows = np.mean(diff**2, axis=1)

    clamped = bool(np.any((sp < PROB_FLOOR) & (tp > 0)))
    sp_safe = np.maximum(sp, PROB_FLOOR)
    log_ratio = np.where(tp > 0, np.log(np.where(tp > 0, tp, 1.0)) - np.log(sp_safe), 0.0)
    kl_rows = np.sum(tp * log_ratio, axis=1)

    scale = 1.0 / (2.0 * n)
    mse_part = float(scale * mse_rows.sum())
    kl_part = float(scale * kl_rows.sum())
    return DistillLoss(
        value=mse_part + kl_part,
        grad_embeddings=diff / (n * d),
        grad_logits=(sp - tp) / (2.0 * n),
        mse_part=mse_part,
        kl_part=kl_part,
        clamped=clamped,
    )
