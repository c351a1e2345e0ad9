"""Scoring and reporting: macro precision/recall/F1, cluster purity,
threshold sweeps, and novelty detection quality."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .asi import Discriminant
from .cluster.merge import Cluster
from .pipeline import PreparedInference, RoutingDecision, TeacherOracle, route_all


@dataclass
class ClassScore:
    label: int
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int
    empty: bool  # zero predicted and zero actual positives


@dataclass
class PrfResult:
    per_class: list[ClassScore]
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def to_dict(self) -> dict:
        return {
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": [
                {
                    "label": c.label,
                    "precision": c.precision,
                    "recall": c.recall,
                    "f1": c.f1,
                    "support": c.support,
                    "predicted": c.predicted,
                    "empty": c.empty,
                }
                for c in self.per_class
            ],
        }


def macro_prf(y_true, y_pred, num_classes: int) -> PrfResult:
    """Per-class precision/recall/F1 with unweighted macro averages.

    Zero denominators score 0; a class absent from both truth and
    predictions is additionally flagged ``empty``.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("y_true and y_pred must be 1-D arrays of equal length")
    if y_true.size == 0:
        raise ValueError("cannot score an empty prediction set")

    scores = []
    for c in range(num_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        scores.append(
            ClassScore(
                label=c,
                precision=p,
                recall=r,
                f1=f1,
                support=tp + fn,
                predicted=tp + fp,
                empty=(tp + fp == 0 and tp + fn == 0),
            )
        )
    k = len(scores)
    return PrfResult(
        per_class=scores,
        macro_precision=sum(s.precision for s in scores) / k,
        macro_recall=sum(s.recall for s in scores) / k,
        macro_f1=sum(s.f1 for s in scores) / k,
    )


def prf_from_decisions(
    decisions: Iterable[RoutingDecision],
    truth: dict[str, int],
    num_classes: int,
    include_novel: bool = False,
) -> PrfResult:
    """Macro PRF over labeled decisions (novel candidates excluded by default)."""
    y_true, y_pred = [], []
    for d in decisions:
        if d.label is None:
            continue
        if d.decision == "novel_candidate" and not include_novel:
            continue
        if d.flow_id not in truth:
            raise ValueError(f"no ground truth for flow {d.flow_id!r}")
        y_true.append(truth[d.flow_id])
        y_pred.append(d.label)
    return macro_prf(y_true, y_pred, num_classes)


# ---------------------------------------------------------------------------
# purity


@dataclass
class PurityResult:
    per_cluster: list[dict]
    weighted: float


def cluster_purity(clusters: list[Cluster], labels: np.ndarray) -> PurityResult:
    """Majority-ground-truth fraction per cluster and its size-weighted mean.

    ``labels`` indexes the same embedding rows as cluster members; rows
    with label < 0 (unknown truth) are skipped.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rows = []
    num = 0.0
    den = 0
    for c in clusters:
        member_labels = labels[c.members]
        member_labels = member_labels[member_labels >= 0]
        if member_labels.size == 0:
            continue
        counts = np.bincount(member_labels)
        majority = int(np.argmax(counts))
        purity = float(counts[majority] / member_labels.size)
        rows.append(
            {"cluster_id": c.id, "size": int(member_labels.size),
             "majority_label": majority, "purity": purity}
        )
        num += purity * member_labels.size
        den += member_labels.size
    if den == 0:
        raise ValueError("no cluster member has ground truth")
    return PurityResult(per_cluster=rows, weighted=num / den)


# ---------------------------------------------------------------------------
# ASI threshold sweep


def asi_sweep(
    prep: PreparedInference,
    oracle_factory: Callable[[], TeacherOracle],
    disc: Discriminant,
    vary: str,
    grid: Iterable[float],
    num_classes: int | None = None,
) -> list[dict]:
    """Route the prepared inference once per threshold value.

    Embeddings, clustering, and ASI values are shared across the grid;
    only the discriminant changes.
    """
    if vary not in ("gamma", "eta"):
        raise ValueError("vary must be 'gamma' or 'eta'")
    truth = {f.id: f.label for f in prep.dataset.flows}
    have_truth = all(v is not None for v in truth.values())
    rows = []
    for value in grid:
        point = replace(disc, **{vary: float(value)})
        result = route_all(prep, oracle_factory(), point)
        summary = result.summary
        row = {
            vary: float(value),
            "fast_path_fraction": summary["fractions"]["fast_path"],
            "fallback_fraction": summary["fractions"]["fallback"],
            "hybrid_wall_s": summary["timing"]["hybrid_wall_s"],
            "speedup": summary["timing"].get("speedup"),
        }
        if have_truth:
            acc = summary.get("accuracy") or {}
            row["fast_path_precision"] = acc.get("fast_path")
            row["overall_accuracy"] = acc.get("overall")
            if num_classes is not None:
                row["macro_f1"] = prf_from_decisions(
                    result.decisions, truth, num_classes
                ).macro_f1
        rows.append(row)
    return rows


def write_sweep_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("empty sweep")
    fields = list(rows[0].keys())
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# novelty


@dataclass
class NoveltyScore:
    recall: float
    false_flag_rate: float
    holdout_flows: int
    flagged_flows: int
    flagged_clusters: list[int]


def novelty_score(
    clusters: list[Cluster],
    novel_flags: np.ndarray,
    labels: np.ndarray,
    holdout: set[int],
    num_flows: int,
) -> NoveltyScore:
    """Fraction of held-out flows captured by novel-flagged clusters, and
    the fraction of known-class flows wrongly swept in.

    Only the first ``num_flows`` embedding rows (the inference flows) are
    scored; anchor rows are ignored.
    """
    labels = np.asarray(labels, dtype=np.int64)
    flagged = np.zeros(num_flows, dtype=bool)
    flagged_ids = []
    for c, nv in zip(clusters, novel_flags):
        if nv:
            flagged_ids.append(c.id)
            members = np.asarray([m for m in c.members if m < num_flows], dtype=np.int64)
            flagged[members] = True
    is_holdout = np.isin(labels[:num_flows], list(holdout))
    n_hold = int(is_holdout.sum())
    n_known = num_flows - n_hold
    recall = float(flagged[is_holdout].mean()) if n_hold else 0.0
    false_rate = float(flagged[~is_holdout].mean()) if n_known else 0.0
    return NoveltyScore(
        recall=recall,
        false_flag_rate=false_rate,
        holdout_flows=n_hold,
        flagged_flows=int(flagged.sum()),
        flagged_clusters=flagged_ids,
    )
