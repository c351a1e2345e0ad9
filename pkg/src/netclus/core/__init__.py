from .rng import make_rng, spawn_rngs, split_seed
from .types import AsiValue, FlowRecord, LabeledDataset, LossWeights, TeacherOutput
from .vectors import (
    DegenerateVectorError,
    cosine_distance,
    cosine_similarity,
    softmax,
    unit_rows,
)

__all__ = [
    "AsiValue",
    "DegenerateVectorError",
    "FlowRecord",
    "LabeledDataset",
    "LossWeights",
    "TeacherOutput",
    "cosine_distance",
    "cosine_similarity",
    "make_rng",
    "softmax",
    "spawn_rngs",
    "split_seed",
    "unit_rows",
]
