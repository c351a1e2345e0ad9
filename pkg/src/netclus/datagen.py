"""Synthetic flow corpus generator.

Class feature directions share a common base vector plus per-class
orthogonal components, so every pair of classes sits at the same
configurable angle. Each class carries several sub-modes (tight
directions inside the class cone) mirroring the fine-grained variation
of real traffic; flows sample a sub-mode plus Gaussian noise. The
synthetic teacher applies a fixed random linear map to the flow's
noiseless mode direction and emits softmax probabilities around a
(possibly flipped) ground-truth one-hot. Everything is reproducible
byte-for-byte from the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core.rng import make_rng, split_seed
from .core.types import FlowRecord, TeacherOutput
from .core.vectors import softmax
from .ingest import write_flows, write_teacher


@dataclass
class SynthSpec:
    num_classes: int = 10
    flows_per_class: int = 100
    feature_dim: int = 320
    embedding_dim: int = 32
    separation_deg: float = 75.0
    modes_per_class: int = 10
    mode_spread_deg: float = 25.0
    noise: float = 0.08
    holdout_classes: tuple[int, ...] = field(default_factory=tuple)
    seed: int = 0
    test_fraction: float = 0.2
    teacher_flip_rate: float = 0.0
    teacher_prob_scale: float = 6.0
    teacher_prob_noise: float = 0.5
    teacher_emb_noise: float = 0.02
    emit_payload: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.separation_deg <= 90:
            raise ValueError("separation_deg must lie in (0, 90]")
        if self.modes_per_class < 1:
            raise ValueError("modes_per_class must be >= 1")
        if not 0 <= self.mode_spread_deg < self.separation_deg / 2:
            raise ValueError("mode_spread_deg must be < separation_deg / 2")
        if self.num_classes * (1 + self.modes_per_class) + 1 > self.feature_dim:
            raise ValueError("feature_dim too small for the class/mode count")
        if self.emit_payload and self.feature_dim != 320:
            raise ValueError("payload mode implies the 320-dim featurizer output")
        holdout = tuple(sorted(int(c) for c in self.holdout_classes))
        expected = tuple(range(self.num_classes - len(holdout), self.num_classes))
        if holdout != expected:
            raise ValueError(
                f"holdout_classes must be the top class indices, e.g. {expected}"
            )
        self.holdout_classes = holdout

    @property
    def train_num_classes(self) -> int:
        return self.num_classes - len(self.holdout_classes)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth spec fields: {sorted(unknown)}")
        if "holdout_classes" in d:
            d = dict(d)
            d["holdout_classes"] = tuple(d["holdout_classes"])
        return cls(**d)


def class_directions(spec: SynthSpec) -> np.ndarray:
    """Unit directions with equal pairwise angle ``separation_deg``."""
    rng = make_rng(split_seed(spec.seed, "directions"))
    basis, _ = np.linalg.qr(rng.standard_normal((spec.feature_dim, spec.num_classes + 1)))
    shared = basis[:, 0]
    phi = math.acos(math.sqrt(math.cos(math.radians(spec.separation_deg))))
    dirs = math.cos(phi) * shared[None, :] + math.sin(phi) * basis[:, 1:].T
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def mode_directions(spec: SynthSpec) -> np.ndarray:
    """Per-class sub-mode directions: shape (C, M, d_in), unit rows.

    Mode m of class c is the class direction tilted by ``mode_spread_deg``
    toward a dedicated orthogonal component, so modes stay inside the
    class cone while remaining mutually separated.
    """
    dirs = class_directions(spec)
    c, mcount = spec.num_classes, spec.modes_per_class
    if mcount == 1:
        return dirs[:, None, :]
    rng = make_rng(split_seed(spec.seed, "modes"))
    basis, _ = np.linalg.qr(rng.standard_normal((spec.feature_dim, c * mcount)))
    comps = basis.T.reshape(c, mcount, spec.feature_dim)
    # remove any projection onto the class direction to keep the tilt exact
    comps = comps - np.einsum("cmd,cd->cm", comps, dirs)[..., None] * dirs[:, None, :]
    comps = comps / np.linalg.norm(comps, axis=2, keepdims=True)
    psi = math.radians(spec.mode_spread_deg)
    modes = math.cos(psi) * dirs[:, None, :] + math.sin(psi) * comps
    return modes / np.linalg.norm(modes, axis=2, keepdims=True)


def separability_bound(spec: SynthSpec) -> float:
    # Noise rotates a feature by about atan(noise). The nearest foreign
    # mode sits at least separation - 2*spread away; half that with a 2x
    # safety factor keeps the nearest-mode rule exact.
    gap = math.radians(spec.separation_deg) - 2.0 * math.radians(spec.mode_spread_deg)
    return 0.5 * math.tan(gap / 2.0)


def _payload_for(template: np.ndarray, rng: np.random.Generator) -> bytes:
    noisy = template.astype(np.int64) + rng.integers(-8, 9, size=template.shape)
    return np.clip(noisy, 0, 255).astype(np.uint8).tobytes()


def generate(spec: SynthSpec, out_dir: str | Path) -> dict:
    """Write train/test flow and teacher files plus a manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c, per = spec.num_classes, spec.flows_per_class
    modes = mode_directions(spec)

    rng = make_rng(split_seed(spec.seed, "flows"))
    labels = np.repeat(np.arange(c), per)
    n = labels.shape[0]
    mode_idx = np.concatenate([np.arange(per) % spec.modes_per_class for _ in range(c)])
    flow_dirs = modes[labels, mode_idx]
    noise = rng.standard_normal((n, spec.feature_dim)) / math.sqrt(spec.feature_dim)
    features = flow_dirs + spec.noise * noise

    payload_templates = None
    payloads: list[bytes | None] = [None] * n
    if spec.emit_payload:
        prng = make_rng(split_seed(spec.seed, "payloads"))
        payload_templates = prng.integers(0, 256, size=(c, 128))
        payloads = [_payload_for(payload_templates[y], prng) for y in labels]

    # The teacher is a model of the *training* class space: its probs have
    # train_num_classes entries, and flows of held-out classes receive an
    # arbitrary known-class prediction (a real teacher cannot name a class
    # it was never fine-tuned on).
    ct = spec.train_num_classes
    trng = make_rng(split_seed(spec.seed, "teacher"))
    teacher_map = trng.standard_normal((spec.embedding_dim, spec.feature_dim)) / math.sqrt(
        spec.feature_dim
    )
    t_emb = flow_dirs @ teacher_map.T
    t_emb += spec.teacher_emb_noise * trng.standard_normal(t_emb.shape) / math.sqrt(
        spec.embedding_dim
    )
    flips = trng.random(n) < spec.teacher_flip_rate
    shift = trng.integers(1, max(ct, 2), size=n)
    t_labels = np.where(flips, (labels + shift) % ct, labels)
    t_labels = np.where(labels >= ct, trng.integers(0, ct, size=n), t_labels)
    logits = np.zeros((n, ct))
    logits[np.arange(n), t_labels] = spec.teacher_prob_scale
    logits += spec.teacher_prob_noise * trng.standard_normal((n, ct))
    t_probs = softmax(logits, axis=1)

    srng = make_rng(split_seed(spec.seed, "split"))
    is_test = np.zeros(n, dtype=bool)
    for cls in range(c):
        idx = np.flatnonzero(labels == cls)
        if cls in spec.holdout_classes:
            is_test[idx] = True
            continue
        order = srng.permutation(idx)
        n_test = int(round(spec.test_fraction * idx.size))
        is_test[order[:n_test]] = True

    flows: list[FlowRecord] = []
    teacher: list[TeacherOutput] = []
    for i in range(n):
        fid = f"flow-{i:06d}"
        flows.append(
            FlowRecord(
                id=fid,
                payload=payloads[i],
                features=None if spec.emit_payload else features[i],
                label=int(labels[i]),
            )
        )
        teacher.append(TeacherOutput(flow_id=fid, embedding=t_emb[i], probs=t_probs[i]))

    train_idx = np.flatnonzero(~is_test)
    test_idx = np.flatnonzero(is_test)
    write_flows(out / "train_flows.jsonl", [flows[i] for i in train_idx])
    write_flows(out / "test_flows.jsonl", [flows[i] for i in test_idx])
    write_teacher(out / "train_teacher.jsonl", [teacher[i] for i in train_idx])
    write_teacher(out / "test_teacher.jsonl", [teacher[i] for i in test_idx])

    # generation-time separability oracle: nearest mode direction (or
    # nearest class mean when features come from payloads)
    if spec.emit_payload:
        from .ingest import featurize

        feats = np.asarray([featurize(p) for p in payloads])
        refs = np.stack([feats[labels == cls].mean(axis=0) for cls in range(c)])
        ref_class = np.arange(c)
        oracle_kind = "nearest-class-mean"
    else:
        feats = features
        refs = modes.reshape(c * spec.modes_per_class, spec.feature_dim)
        ref_class = np.repeat(np.arange(c), spec.modes_per_class)
        oracle_kind = "nearest-mode-direction"
    sims = (feats / np.linalg.norm(feats, axis=1, keepdims=True)) @ (
        refs / np.linalg.norm(refs, axis=1, keepdims=True)
    ).T
    oracle_acc = float(np.mean(ref_class[np.argmax(sims, axis=1)] == labels))

    bound = separability_bound(spec)
    manifest = {
        "spec": asdict(spec),
        "train": {
            "flows_path": "train_flows.jsonl",
            "teacher_path": "train_teacher.jsonl",
            "num_classes": spec.train_num_classes,
            "teacher_num_classes": spec.train_num_classes,
            "feature_dim": spec.feature_dim,
            "embedding_dim": spec.embedding_dim,
        },
        "test": {
            "flows_path": "test_flows.jsonl",
            "teacher_path": "test_teacher.jsonl",
            "num_classes": spec.num_classes,
            "teacher_num_classes": spec.train_num_classes,
            "feature_dim": spec.feature_dim,
            "embedding_dim": spec.embedding_dim,
        },
        "counts": {"train": int(train_idx.size), "test": int(test_idx.size)},
        "separability": {
            "bound": bound,
            "noise": spec.noise,
            "within_bound": spec.noise < bound,
            "oracle_kind": oracle_kind,
            "oracle_accuracy": oracle_acc,
            "separable": oracle_acc == 1.0,
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {data_dir}")
    return json.loads(path.read_text())
