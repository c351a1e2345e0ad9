"""End-to-end hybrid inference.

Flows are embedded by the student, clustered together with labeled
anchor flows, pseudo-labeled, and scored with the affiliation index.
Confident flows take the fast path (cluster pseudo-label); ambiguous
ones fall back to the teacher oracle; members of novel-flagged clusters
are surfaced as candidates without touching the teacher.

The simulated oracle accounts its configured latency per call instead of
sleeping, so speedup figures are stable across machines while real
compute is still measured with a monotonic clock.
"""

from __future__ import annotations

import json
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .asi import (
    ClusterGeometry,
    Discriminant,
    Route,
    all_cluster_asi,
    batch_sample_asi,
    cluster_geometry,
    flag_novel,
    route,
)
from .cluster.merge import Cluster, ClusterResult, MergeParams, assign_pseudo_labels, cluster
from .core.rng import make_rng, split_seed
from .core.types import AsiValue, FlowRecord, LabeledDataset, TeacherOutput
from .core.vectors import unit_rows
from .ingest import ensure_features
from .student import StudentModel

DEFAULT_CLUSTERS_PER_CLASS = 10


class OracleError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# teacher oracles


class TeacherOracle:
    """Classifies batches of flows; subclasses track latency accounting."""

    mode = "abstract"

    def __init__(self) -> None:
        self.calls = 0
        self.flows_classified = 0
        self.simulated_seconds = 0.0

    def classify(self, flows: list[FlowRecord]) -> list[int]:
        raise NotImplementedError

    def latency_per_flow(self) -> float | None:
        """Known per-flow latency, if the oracle has one (simulated only)."""
        return None


class RecordedOracle(TeacherOracle):
    """Looks up recorded teacher probabilities; label is the argmax."""

    mode = "recorded"

    def __init__(self, outputs: dict[str, TeacherOutput]):
        super().__init__()
        self.outputs = outputs

    def classify(self, flows: list[FlowRecord]) -> list[int]:
        self.calls += 1
        labels = []
        for flow in flows:
            rec = self.outputs.get(flow.id)
            if rec is None:
                raise OracleError(f"no recorded teacher output for flow {flow.id!r}")
            labels.append(int(np.argmax(rec.probs)))
        self.flows_classified += len(flows)
        return labels


class SimulatedOracle(TeacherOracle):
    """Ground truth with a configurable flip rate and accounted latency.

    Flip decisions derive from (seed, flow id) so they do not depend on
    batching order.
    """

    mode = "simulated"

    def __init__(
        self,
        truth: dict[str, int],
        num_classes: int,
        latency_s: float = 0.0,
        flip_rate: float = 0.0,
        seed: int = 0,
    ):
        super().__init__()
        self.truth = truth
        self.num_classes = num_classes
        self.latency_s = latency_s
        self.flip_rate = flip_rate
        self.seed = seed

    def latency_per_flow(self) -> float | None:
        return self.latency_s

    def _label(self, flow_id: str) -> int:
        true = self.truth.get(flow_id)
        if true is None:
            raise OracleError(f"simulated oracle has no ground truth for {flow_id!r}")
        if self.flip_rate <= 0.0:
            return true
        rng = make_rng(split_seed(self.seed, "sim-oracle", flow_id))
        if rng.random() >= self.flip_rate:
            return true
        return int((true + rng.integers(1, self.num_classes)) % self.num_classes)

    def classify(self, flows: list[FlowRecord]) -> list[int]:
        self.calls += 1
        self.flows_classified += len(flows)
        self.simulated_seconds += self.latency_s * len(flows)
        return [self._label(f.id) for f in flows]


class CommandOracle(TeacherOracle):
    """Invokes an external process per batch.

    Protocol: JSON-lines ``{"id", "features"}`` on stdin, JSON-lines
    ``{"id", "label"}`` on stdout, same count and order.
    """

    mode = "command"

    def __init__(self, argv: list[str]):
        super().__init__()
        self.argv = argv

    def classify(self, flows: list[FlowRecord]) -> list[int]:
        self.calls += 1
        payload = "".join(
            json.dumps({"id": f.id, "features": None if f.features is None
                        else [float(v) for v in f.features]}) + "\n"
            for f in flows
        )
        try:
            proc = subprocess.run(
                self.argv, input=payload, capture_output=True, text=True, check=True
            )
        except (OSError, subprocess.CalledProcessError) as exc:
            raise OracleError(f"teacher command failed: {exc}") from exc
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if len(lines) != len(flows):
            raise OracleError(
                f"teacher command returned {len(lines)} labels for {len(flows)} flows"
            )
        labels = []
        for flow, line in zip(flows, lines):
            obj = json.loads(line)
            if obj.get("id") != flow.id:
                raise OracleError(f"teacher command reordered flow {flow.id!r}")
            labels.append(int(obj["label"]))
        self.flows_classified += len(flows)
        return labels


def oracle_from_config(
    cfg: dict, dataset: LabeledDataset | None = None, base_dir: str | Path = "."
) -> TeacherOracle:
    mode = cfg.get("mode")
    if mode == "recorded":
        if "path" in cfg:
            from .ingest import load_teacher

            outputs = load_teacher(Path(base_dir) / cfg["path"])
        elif dataset is not None and dataset.teacher is not None:
            outputs = dataset.teacher
        else:
            raise ValueError("recorded oracle needs a 'path' or dataset teacher outputs")
        return RecordedOracle(outputs)
    if mode == "simulated":
        if dataset is None:
            raise ValueError("simulated oracle needs the dataset for ground truth")
        truth = {f.id: f.label for f in dataset.flows if f.label is not None}
        return SimulatedOracle(
            truth=truth,
            num_classes=dataset.num_classes,
            latency_s=float(cfg.get("latency_s", 0.0)),
            flip_rate=float(cfg.get("flip_rate", 0.0)),
            seed=int(cfg.get("seed", 0)),
        )
    if mode == "command":
        return CommandOracle(list(cfg["argv"]))
    raise ValueError(f"unknown oracle mode {mode!r}")


# ---------------------------------------------------------------------------
# embedding and preparation


def batch_embed(
    model: StudentModel, dataset: LabeledDataset, batch_size: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings and logits for every flow, in input order."""
    ensure_features(dataset)
    x = dataset.feature_matrix()
    embs, logits = [], []
    for start in range(0, x.shape[0], batch_size):
        e, l = model.forward(x[start : start + batch_size])
        embs.append(e)
        logits.append(l)
    return np.concatenate(embs, axis=0), np.concatenate(logits, axis=0)


def select_anchors(train: LabeledDataset, per_class: int = 50) -> list[FlowRecord]:
    """Up to ``per_class`` labeled flows per class, in file order."""
    taken: dict[int, int] = {}
    out = []
    for flow in train.flows:
        if flow.label is None:
            continue
        if taken.get(flow.label, 0) < per_class:
            taken[flow.label] = taken.get(flow.label, 0) + 1
            out.append(flow)
    return out


@dataclass
class RoutingDecision:
    flow_id: str
    decision: str  # fast_path | fallback | novel_candidate | errored
    label: int | None
    asi: AsiValue
    cluster_id: int | None
    teacher_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "flow_id": self.flow_id,
                "decision": self.decision,
                "label": self.label,
                "ratio": self.asi.ratio,
                "strength": self.asi.strength,
                "cluster_id": self.cluster_id,
                "timing": {"teacher_s": self.teacher_s},
            }
        )


@dataclass
class PreparedInference:
    dataset: LabeledDataset
    num_flows: int
    embeddings: np.ndarray  # inference flows then anchors
    logits: np.ndarray
    clusters: list[Cluster]
    geometry: ClusterGeometry
    ratios: np.ndarray  # per inference flow
    strengths: np.ndarray
    nearest: np.ndarray  # nearest cluster position per inference flow
    containing: np.ndarray  # containing cluster position per inference flow
    cluster_novel: np.ndarray  # bool per cluster position
    cluster_asis: list[AsiValue]
    cluster_result: ClusterResult
    timing: dict = field(default_factory=dict)


def prepare(
    dataset: LabeledDataset,
    model: StudentModel,
    merge_params: MergeParams | None = None,
    disc: Discriminant | None = None,
    anchors: list[FlowRecord] | None = None,
    seed: int = 0,
    batch_size: int = 256,
) -> PreparedInference:
    """Embed, cluster, pseudo-label, and score; no routing yet."""
    disc = disc or Discriminant()
    n = len(dataset.flows)
    if n == 0:
        raise ValueError("empty dataset")

    t0 = time.perf_counter()
    emb, logits = batch_embed(model, dataset, batch_size)
    if anchors:
        anchor_ds = LabeledDataset(flows=anchors, num_classes=dataset.num_classes)
        a_emb, a_logits = batch_embed(model, anchor_ds, batch_size)
        emb = np.concatenate([emb, a_emb], axis=0)
        logits = np.concatenate([logits, a_logits], axis=0)
    t1 = time.perf_counter()

    params = merge_params or MergeParams(
        stop_cluster_count=DEFAULT_CLUSTERS_PER_CLASS * dataset.num_classes
    )
    result = cluster(emb, params, seed=split_seed(seed, "infer-cluster"))
    assign_pseudo_labels(result.clusters, logits)
    t2 = time.perf_counter()

    geo = cluster_geometry(result.clusters, emb)
    all_units = unit_rows(emb)
    ratios, strengths, nearest, _ = batch_sample_asi(geo, all_units, geo.member_pos, disc)
    cluster_asis = all_cluster_asi(geo, strengths, disc)
    ratios, strengths, nearest = ratios[:n], strengths[:n], nearest[:n]
    novel = np.array([flag_novel(a, disc) for a in cluster_asis], dtype=bool)
    t3 = time.perf_counter()

    return PreparedInference(
        dataset=dataset,
        num_flows=n,
        embeddings=emb,
        logits=logits,
        clusters=result.clusters,
        geometry=geo,
        ratios=ratios,
        strengths=strengths,
        nearest=nearest,
        containing=geo.member_pos[:n].copy(),
        cluster_novel=novel,
        cluster_asis=cluster_asis,
        cluster_result=result,
        timing={"embed_s": t1 - t0, "cluster_s": t2 - t1, "asi_s": t3 - t2},
    )


@dataclass
class InferResult:
    decisions: list[RoutingDecision]
    summary: dict
    prepared: PreparedInference


def route_all(
    prep: PreparedInference,
    oracle: TeacherOracle,
    disc: Discriminant | None = None,
    score_novel: bool = False,
    oracle_batch: int = 256,
) -> InferResult:
    """Apply the threshold discriminant and resolve fallbacks via the oracle."""
    disc = disc or Discriminant()
    n = prep.num_flows
    flows = prep.dataset.flows

    t0 = time.perf_counter()
    decisions: list[RoutingDecision | None] = [None] * n
    fallback_idx: list[int] = []
    for i in range(n):
        asi = AsiValue(ratio=float(prep.ratios[i]), strength=float(prep.strengths[i]))
        pos = int(prep.containing[i])
        if prep.cluster_novel[pos]:
            decisions[i] = RoutingDecision(
                flow_id=flows[i].id,
                decision="novel_candidate",
                label=prep.clusters[pos].pseudo_label if score_novel else None,
                asi=asi,
                cluster_id=prep.clusters[pos].id,
            )
        elif route(asi, disc) is Route.FAST_PATH:
            near = int(prep.nearest[i])
            decisions[i] = RoutingDecision(
                flow_id=flows[i].id,
                decision="fast_path",
                label=prep.clusters[near].pseudo_label,
                asi=asi,
                cluster_id=prep.clusters[near].id,
            )
        else:
            fallback_idx.append(i)
    t_route = time.perf_counter() - t0

    sim_before = oracle.simulated_seconds
    t1 = time.perf_counter()
    errors = 0
    for start in range(0, len(fallback_idx), oracle_batch):
        batch = fallback_idx[start : start + oracle_batch]
        batch_flows = [flows[i] for i in batch]
        per_flow = oracle.latency_per_flow() or 0.0
        try:
            labels = oracle.classify(batch_flows)
        except OracleError:
            errors += len(batch)
            for i in batch:
                decisions[i] = RoutingDecision(
                    flow_id=flows[i].id,
                    decision="errored",
                    label=None,
                    asi=AsiValue(float(prep.ratios[i]), float(prep.strengths[i])),
                    cluster_id=prep.clusters[int(prep.containing[i])].id,
                )
            continue
        for i, label in zip(batch, labels):
            decisions[i] = RoutingDecision(
                flow_id=flows[i].id,
                decision="fallback",
                label=int(label),
                asi=AsiValue(float(prep.ratios[i]), float(prep.strengths[i])),
                cluster_id=prep.clusters[int(prep.containing[i])].id,
                teacher_s=per_flow,
            )
    teacher_wall = time.perf_counter() - t1
    teacher_sim = oracle.simulated_seconds - sim_before

    final = [d for d in decisions if d is not None]
    assert len(final) == n
    counts = {
        "fast_path": sum(d.decision == "fast_path" for d in final),
        "fallback": sum(d.decision == "fallback" for d in final),
        "novel_candidate": sum(d.decision == "novel_candidate" for d in final),
        "errored": errors,
        "total": n,
    }
    timing = dict(prep.timing)
    timing.update(
        {
            "route_s": t_route,
            "teacher_wall_s": teacher_wall,
            "teacher_simulated_s": teacher_sim,
        }
    )
    hybrid = (
        timing["embed_s"] + timing["cluster_s"] + timing["asi_s"]
        + t_route + teacher_wall + teacher_sim
    )
    timing["hybrid_wall_s"] = hybrid
    latency = oracle.latency_per_flow()
    if latency is not None:
        timing["all_fallback_wall_s"] = latency * n
        timing["speedup"] = (latency * n / hybrid) if hybrid > 0 else None

    summary = {
        "counts": counts,
        "fractions": {k: counts[k] / n for k in ("fast_path", "fallback", "novel_candidate", "errored")},
        "novel_clusters": [c.id for c, nv in zip(prep.clusters, prep.cluster_novel) if nv],
        "num_clusters": len(prep.clusters),
        "oracle_mode": oracle.mode,
        "errors": errors,
        "timing": timing,
    }
    _add_accuracy(summary, prep, final, score_novel)
    return InferResult(decisions=final, summary=summary, prepared=prep)


def _add_accuracy(
    summary: dict, prep: PreparedInference, decisions: list[RoutingDecision],
    score_novel: bool,
) -> None:
    truth = {f.id: f.label for f in prep.dataset.flows}
    if any(v is None for v in truth.values()):
        return
    scored = [
        d for d in decisions
        if d.label is not None and (score_novel or d.decision != "novel_candidate")
    ]
    if not scored:
        summary["accuracy"] = None
        return
    per_kind: dict[str, list[bool]] = {}
    for d in scored:
        per_kind.setdefault(d.decision, []).append(d.label == truth[d.flow_id])
    acc = {kind: float(np.mean(v)) for kind, v in per_kind.items()}
    acc["overall"] = float(np.mean([d.label == truth[d.flow_id] for d in scored]))
    acc["scored"] = len(scored)
    summary["accuracy"] = acc


def infer(
    dataset: LabeledDataset,
    model: StudentModel,
    oracle: TeacherOracle,
    merge_params: MergeParams | None = None,
    disc: Discriminant | None = None,
    anchors: list[FlowRecord] | None = None,
    seed: int = 0,
    batch_size: int = 256,
    score_novel: bool = False,
) -> InferResult:
    prep = prepare(dataset, model, merge_params, disc, anchors, seed, batch_size)
    return route_all(prep, oracle, disc, score_novel)


def write_decisions(path: str | Path, decisions: list[RoutingDecision]) -> None:
    with Path(path).open("w") as fh:
        for d in decisions:
            fh.write(d.to_json() + "\n")
