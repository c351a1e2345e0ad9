from .merge import (
    Cluster,
    ClusterResult,
    MergeEvent,
    MergeParams,
    assign_pseudo_labels,
    cluster,
    merge_metric,
    write_merge_log,
)

__all__ = [
    "Cluster",
    "ClusterResult",
    "MergeEvent",
    "MergeParams",
    "assign_pseudo_labels",
    "cluster",
    "merge_metric",
    "write_merge_log",
]
