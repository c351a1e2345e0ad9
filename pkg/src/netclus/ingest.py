"""Dataset loading and payload featurization.

File formats (all JSON-lines, one object per line):

* flows: ``{"id": str, "payload_hex": str?, "features": [float]?, "label": int?}``
* teacher: ``{"id": str, "embedding": [float], "probs": [float]}``
* manifest: single JSON object, see ``DatasetManifest``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core.types import FlowRecord, LabeledDataset, TeacherOutput

FEATURE_DIM = 320
_HIST_DIM = 256
_PREFIX_DIM = 64
MAX_PACKETS = 5
PACKET_BYTES = 128


class LoadError(ValueError):
    """Malformed dataset file; message carries path and line number."""


@dataclass
class DatasetManifest:
    """Declared shape of one dataset split on disk.

    ``teacher_num_classes`` may be smaller than ``num_classes`` when the
    teacher was trained without the held-out classes.
    """

    flows_path: str
    num_classes: int
    feature_dim: int = FEATURE_DIM
    embedding_dim: int = 32
    teacher_path: str | None = None
    teacher_num_classes: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            flows_path=d["flows_path"],
            num_classes=int(d["num_classes"]),
            feature_dim=int(d.get("feature_dim", FEATURE_DIM)),
            embedding_dim=int(d.get("embedding_dim", 32)),
            teacher_path=d.get("teacher_path"),
            teacher_num_classes=d.get("teacher_num_classes"),
        )


def featurize(payload: bytes | list[bytes]) -> np.ndarray:
    """Fixed 320-dim feature vector from raw payload bytes.

    The payload is truncated to the first 5 packets of 128 bytes each
    (a lone byte string counts as one packet). Layout: 256 histogram
    entries over the truncated bytes, L1-normalized, then the first 64
    bytes of the first truncated packet scaled to [0, 1] (zero padded
    when the packet is shorter).
    """
    packets = [payload] if isinstance(payload, (bytes, bytearray)) else list(payload)
    packets = [bytes(p)[:PACKET_BYTES] for p in packets[:MAX_PACKETS]]
    window = b"".join(packets)
    if len(window) == 0:
        raise ValueError("empty payload")

    hist = np.bincount(np.frombuffer(window, dtype=np.uint8), minlength=_HIST_DIM)
    out = np.zeros(FEATURE_DIM, dtype=np.float64)
    out[:_HIST_DIM] = hist / len(window)
    prefix = np.frombuffer(packets[0][:_PREFIX_DIM], dtype=np.uint8)
    out[_HIST_DIM : _HIST_DIM + len(prefix)] = prefix / 255.0
    return out


def _parse_line(path: Path, lineno: int, line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise LoadError(f"{path}:{lineno}: expected an object, got {type(obj).__name__}")
    return obj


def load_flows(
    path: str | Path,
    num_classes: int,
    feature_dim: int | None = None,
) -> LabeledDataset:
    """Load a JSON-lines flow file, preserving line order."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"flow file not found: {path}")
    flows: list[FlowRecord] = []
    seen: set[str] = set()
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = _parse_line(path, lineno, line)
            if "id" not in obj:
                raise LoadError(f"{path}:{lineno}: missing 'id'")
            fid = str(obj["id"])
            if fid in seen:
                raise LoadError(f"{path}:{lineno}: duplicate id {fid!r}")
            seen.add(fid)
            payload = bytes.fromhex(obj["payload_hex"]) if obj.get("payload_hex") else None
            features = None
            if obj.get("features") is not None:
                features = np.asarray(obj["features"], dtype=np.float64)
                if feature_dim is not None and features.shape != (feature_dim,):
                    raise LoadError(
                        f"{path}:{lineno}: feature length {features.shape[0]} != declared {feature_dim}"
                    )
            label = obj.get("label")
            flow = FlowRecord(id=fid, payload=payload, features=features,
                              label=None if label is None else int(label))
            try:
                flow.validate(num_classes)
            except ValueError as exc:
                raise LoadError(f"{path}:{lineno}: {exc}") from exc
            flows.append(flow)
    return LabeledDataset(flows=flows, num_classes=num_classes)


def load_teacher(
    path: str | Path,
    embedding_dim: int | None = None,
    num_classes: int | None = None,
) -> dict[str, TeacherOutput]:
    """Load a JSON-lines teacher file into a flow-id keyed map."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"teacher file not found: {path}")
    out: dict[str, TeacherOutput] = {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = _parse_line(path, lineno, line)
            for key in ("id", "embedding", "probs"):
                if key not in obj:
                    raise LoadError(f"{path}:{lineno}: missing {key!r}")
            fid = str(obj["id"])
            if fid in out:
                raise LoadError(f"{path}:{lineno}: duplicate id {fid!r}")
            rec = TeacherOutput(
                flow_id=fid,
                embedding=np.asarray(obj["embedding"], dtype=np.float64),
                probs=np.asarray(obj["probs"], dtype=np.float64),
            )
            try:
                rec.validate(embedding_dim, num_classes)
            except ValueError as exc:
                raise LoadError(f"{path}:{lineno}: {exc}") from exc
            out[fid] = rec
    return out


def load_dataset(manifest: DatasetManifest, base_dir: str | Path = ".") -> LabeledDataset:
    """Load flows (and teacher, when declared) relative to ``base_dir``."""
    base = Path(base_dir)
    ds = load_flows(base / manifest.flows_path, manifest.num_classes, manifest.feature_dim)
    if manifest.teacher_path is not None:
        teacher = load_teacher(
            base / manifest.teacher_path,
            manifest.embedding_dim,
            manifest.teacher_num_classes or manifest.num_classes,
        )
        ds = LabeledDataset(flows=ds.flows, num_classes=ds.num_classes, teacher=teacher)
    return ds


def ensure_features(ds: LabeledDataset) -> LabeledDataset:
    """Fill in features from payloads for any flow missing them."""
    for flow in ds.flows:
        if flow.features is None:
            assert flow.payload is not None  # guaranteed by FlowRecord.validate
            flow.features = featurize(flow.payload)
    return ds


def flow_to_json(flow: FlowRecord) -> str:
    obj: dict = {"id": flow.id}
    if flow.payload is not None:
        obj["payload_hex"] = flow.payload.hex()
    if flow.features is not None:
        obj["features"] = [float(v) for v in flow.features]
    if flow.label is not None:
        obj["label"] = int(flow.label)
    return json.dumps(obj)


def write_flows(path: str | Path, flows: list[FlowRecord]) -> None:
    with Path(path).open("w") as fh:
        for flow in flows:
            fh.write(flow_to_json(flow) + "\n")


def write_teacher(path: str | Path, records: list[TeacherOutput]) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            obj = {
                "id": rec.flow_id,
                "embedding": [float(v) for v in rec.embedding],
                "probs": [float(v) for v in rec.probs],
            }
            fh.write(json.dumps(obj) + "\n")
