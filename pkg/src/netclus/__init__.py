"""netclus: distillation-accelerated traffic classification.

Train a compact student against a recorded teacher, cluster its
embeddings with size-constrained merging, validate clusters with the
affiliation strength index, and route flows between a fast pseudo-label
path and a teacher fallback, surfacing novel traffic as a by-product.
"""

__version__ = "0.1.0"
