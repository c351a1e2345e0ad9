"""Domain types shared across ingestion, training, and inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_SUM_TOL = 1e-6


@dataclass
class FlowRecord:
    """One traffic flow: identifier plus payload and/or feature vector."""

    id: str
    payload: bytes | None = None
    features: np.ndarray | None = None
    label: int | None = None

    def validate(self, num_classes: int | None = None) -> None:
        if self.payload is None and self.features is None:
            raise ValueError(f"flow {self.id!r}: needs payload or features")
        if self.label is not None and num_classes is not None:
            if not 0 <= self.label < num_classes:
                raise ValueError(
                    f"flow {self.id!r}: label out of range "
                    f"({self.label} not in [0, {num_classes}))"
                )


@dataclass
class TeacherOutput:
    """Recorded teacher signal for one flow: embedding and class probabilities."""

    flow_id: str
    embedding: np.ndarray
    probs: np.ndarray

    def validate(self, embedding_dim: int | None = None, num_classes: int | None = None) -> None:
        if embedding_dim is not None and self.embedding.shape != (embedding_dim,):
            raise ValueError(
                f"teacher {self.flow_id!r}: embedding length {self.embedding.shape[0]} != {embedding_dim}"
            )
        if num_classes is not None and self.probs.shape != (num_classes,):
            raise ValueError(
                f"teacher {self.flow_id!r}: probs length {self.probs.shape[0]} != {num_classes}"
            )
        if np.any(self.probs < 0):
            raise ValueError(f"teacher {self.flow_id!r}: negative probability")
        total = float(np.sum(self.probs))
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"teacher {self.flow_id!r}: probs sum to {total}, not 1")


@dataclass
class LabeledDataset:
    """Flows plus declared class count and optional per-flow teacher outputs."""

    flows: list[FlowRecord]
    num_classes: int
    teacher: dict[str, TeacherOutput] | None = None

    def __post_init__(self) -> None:
        ids = [f.id for f in self.flows]
        if len(set(ids)) != len(ids):
            seen: set[str] = set()
            dup = next(i for i in ids if i in seen or seen.add(i))  # type: ignore[func-returns-value]
            raise ValueError(f"duplicate flow id {dup!r}")
        if self.teacher is not None:
            known = set(ids)
            for fid in self.teacher:
                if fid not in known:
                    raise ValueError(f"teacher entry {fid!r} matches no flow")

    def labels(self) -> np.ndarray:
        """Ground-truth labels as an int array; raises if any flow is unlabeled."""
        out = np.empty(len(self.flows), dtype=np.int64)
        for i, flow in enumerate(self.flows):
            if flow.label is None:
                raise ValueError(f"flow {flow.id!r} has no label")
            out[i] = flow.label
        return out

    def feature_matrix(self) -> np.ndarray:
        """Stacked feature vectors; raises if any flow lacks features."""
        rows = []
        for flow in self.flows:
            if flow.features is None:
                raise ValueError(f"flow {flow.id!r} has no features (featurize first)")
            rows.append(flow.features)
        return np.asarray(rows, dtype=np.float64)


@dataclass
class LossWeights:
    """Weights for the combined training objective."""

    beta: float = 1.0
    lam: float = 0.1
    margin: float = 0.2
    triplet_cap: int = 512

    def __post_init__(self) -> None:
        for name in ("beta", "lam", "margin"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lam must be >= 0")


@dataclass
class AsiValue:
    """Affiliation strength of a flow: (ratio, strength), both in [0, 1]."""

    ratio: float
    strength: float
    k_truncated: bool = field(default=False, compare=False)
