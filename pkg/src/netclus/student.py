"""Five-layer fully connected student network and its training drivers.

The trunk is four affine layers (hidden activations after the first
three, a linear embedding output), the classifier head is the fifth.
Backprop is hand-written in numpy; everything is float64 so training is
bit-reproducible from the seed.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core.rng import make_rng, split_seed
from .core.types import LabeledDataset, LossWeights, TeacherOutput
from .core.vectors import softmax
from .losses import (
    CentroidBank,
    cfe_loss,
    cluster_loss,
    distillation_loss,
    one_hot,
)

MODEL_FORMAT = "netclus-student"
MODEL_FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


def _activation(name: str):
    if name == "relu":
        return lambda z: np.maximum(z, 0.0), lambda z: (z > 0.0).astype(np.float64)
    if name == "tanh":
        return np.tanh, lambda z: 1.0 - np.tanh(z) ** 2
    raise ValueError(f"unknown activation {name!r}")


class StudentModel:
    """Trunk ``layer_dims = [d_in, h1, h2, h3, d]`` plus a head ``d -> C``."""

    def __init__(
        self,
        layer_dims: list[int],
        num_classes: int,
        activation: str = "relu",
        seed: int = 0,
    ):
        if len(layer_dims) != 5:
            raise ValueError(f"layer_dims must have 5 entries, got {layer_dims}")
        self.layer_dims = [int(v) for v in layer_dims]
        self.num_classes = int(num_classes)
        self.activation = activation
        self.seed = int(seed)
        self._act, self._act_grad = _activation(activation)

        dims = self.layer_dims + [self.num_classes]
        rng = make_rng(split_seed(seed, "student-init"))
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        gain = 2.0 if activation == "relu" else 1.0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = np.sqrt(gain / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out, dtype=np.float64))

    # -- forward / backward -------------------------------------------------

    @property
    def embedding_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        emb, logits, _ = self.forward_cached(x)
        return emb, logits

    def forward_cached(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.layer_dims[0]:
            raise ValueError(
                f"input shape {x.shape} does not match d_in={self.layer_dims[0]}"
            )
        pre: list[np.ndarray] = []
        acts: list[np.ndarray] = [x]
        a = x
        for i in range(3):
            z = a @ self.weights[i] + self.biases[i]
            pre.append(z)
            a = self._act(z)
            acts.append(a)
        emb = a @ self.weights[3] + self.biases[3]
        logits = emb @ self.weights[4] + self.biases[4]
        return emb, logits, (pre, acts, emb)

    def backward(
        self,
        cache,
        grad_embeddings: np.ndarray | None,
        grad_logits: np.ndarray | None,
    ) -> list[np.ndarray]:
        """Gradients for every parameter, ordered like ``parameters()``."""
        pre, acts, emb = cache
        n = acts[0].shape[0]
        g_emb = np.zeros_like(emb) if grad_embeddings is None else np.asarray(grad_embeddings)
        grads: list[np.ndarray | None] = [None] * 10

        if grad_logits is not None:
            gz = np.asarray(grad_logits)
            grads[8] = emb.T @ gz
            grads[9] = gz.sum(axis=0)
            g_emb = g_emb + gz @ self.weights[4].T
        else:
            grads[8] = np.zeros_like(self.weights[4])
            grads[9] = np.zeros_like(self.biases[4])

        grads[6] = acts[3].T @ g_emb
        grads[7] = g_emb.sum(axis=0)
        g = g_emb @ self.weights[3].T
        for i in (2, 1, 0):
            gz = g * self._act_grad(pre[i])
            grads[2 * i] = acts[i].T @ gz
            grads[2 * i + 1] = gz.sum(axis=0)
            if i > 0:
                g = gz @ self.weights[i].T
        assert n == acts[0].shape[0]
        return grads  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# optimizers


class _Sgd:
    def __init__(self, params: list[np.ndarray], lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads: list[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            p -= self.lr * g


class _Adam:
    def __init__(self, params: list[np.ndarray], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _make_optimizer(name: str, params: list[np.ndarray], lr: float):
    if name == "adam":
        return _Adam(params, lr)
    if name == "sgd":
        return _Sgd(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = "adam"
    centroid_momentum: float = 0.9

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (triplets need pairs)")

    def digest(self) -> str:
        payload = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "beta": self.weights.beta,
            "lam": self.weights.lam,
            "margin": self.weights.margin,
            "triplet_cap": self.weights.triplet_cap,
            "optimizer": self.optimizer,
            "centroid_momentum": self.centroid_momentum,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    model: StudentModel
    trace: list[dict]
    bank: CentroidBank


def _check_finite(value: float, epoch: int, step: int, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite {what} loss at epoch {epoch}, step {step}: {value}"
        )


def _init_bank(model: StudentModel, x: np.ndarray, y: np.ndarray,
               num_classes: int, momentum: float) -> CentroidBank:
    # Warm start from the whole training set so the first gradient step
    # already sees initialized centroids.
    emb, _ = model.forward(x)
    bank = CentroidBank(num_classes, model.embedding_dim, momentum)
    bank.update(emb, y)
    return bank


def train_cfe(model: StudentModel, dataset: LabeledDataset, config: TrainConfig) -> TrainResult:
    """Optimize classification + cluster losses on a fully labeled dataset."""
    x = dataset.feature_matrix()
    y = dataset.labels()
    c = dataset.num_classes
    rng = make_rng(split_seed(config.seed, "train-cfe"))
    bank = _init_bank(model, x, y, c, config.centroid_momentum)
    opt = _make_optimizer(config.optimizer, model.parameters(), config.learning_rate)

    trace: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(x.shape[0])
        epoch_losses, epoch_cls, epoch_clus = [], [], []
        for step, start in enumerate(range(0, x.shape[0], config.batch_size)):
            idx = order[start : start + config.batch_size]
            if idx.size < 2:
                continue
            xb, yb = x[idx], y[idx]
            emb, logits, cache = model.forward_cached(xb)
            probs = softmax(logits)
            res = cfe_loss(probs, one_hot(yb, c), emb, yb, bank, config.weights, rng)
            _check_finite(res.value, epoch, step, "CFE")
            grads = model.backward(cache, res.grad_embeddings, res.grad_logits)
            opt.step(grads)
            bank.update(emb, yb)
            epoch_losses.append(res.value)
            epoch_cls.append(res.cls.value)
            epoch_clus.append(res.clus.value)
        trace.append(
            {
                "epoch": epoch,
                "loss": float(np.mean(epoch_losses)),
                "cls": float(np.mean(epoch_cls)),
                "clus": float(np.mean(epoch_clus)),
            }
        )
    return TrainResult(model=model, trace=trace, bank=bank)


def _teacher_matrices(
    dataset: LabeledDataset, teacher: dict[str, TeacherOutput]
) -> tuple[np.ndarray, np.ndarray]:
    embs, probs = [], []
    for flow in dataset.flows:
        rec = teacher.get(flow.id)
        if rec is None:
            raise ValueError(f"no teacher output for flow {flow.id!r}")
        embs.append(rec.embedding)
        probs.append(rec.probs)
    return np.asarray(embs, dtype=np.float64), np.asarray(probs, dtype=np.float64)


def train_distill(
    model: StudentModel,
    dataset: LabeledDataset,
    teacher: dict[str, TeacherOutput] | None,
    config: TrainConfig,
) -> TrainResult:
    """Distill recorded teacher embeddings/probabilities into the student.

    Objective: distillation loss plus lambda * cluster loss; the cluster
    term keeps the student's embedding space separation-friendly.
    """
    if teacher is None:
        teacher = dataset.teacher
    if teacher is None:
        raise ValueError("distillation requires teacher outputs")
    x = dataset.feature_matrix()
    y = dataset.labels()
    c = dataset.num_classes
    t_emb, t_probs = _teacher_matrices(dataset, teacher)
    if t_emb.shape[1] != model.embedding_dim:
        raise ValueError(
            f"teacher embedding dim {t_emb.shape[1]} != student dim {model.embedding_dim}"
        )

    rng = make_rng(split_seed(config.seed, "train-distill"))
    bank = _init_bank(model, x, y, c, config.centroid_momentum)
    opt = _make_optimizer(config.optimizer, model.parameters(), config.learning_rate)

    trace: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(x.shape[0])
        epoch_losses, epoch_mse, epoch_kl, epoch_clus = [], [], [], []
        for step, start in enumerate(range(0, x.shape[0], config.batch_size)):
            idx = order[start : start + config.batch_size]
            if idx.size < 2:
                continue
            xb, yb = x[idx], y[idx]
            emb, logits, cache = model.forward_cached(xb)
            probs = softmax(logits)
            dist = distillation_loss(emb, t_emb[idx], probs, t_probs[idx])
            clus = cluster_loss(emb, yb, bank, config.weights, rng)
            total = dist.value + config.weights.lam * clus.value
            _check_finite(total, epoch, step, "distillation")
            grads = model.backward(
                cache,
                dist.grad_embeddings + config.weights.lam * clus.grad_embeddings,
                dist.grad_logits,
            )
            opt.step(grads)
            bank.update(emb, yb)
            epoch_losses.append(total)
            epoch_mse.append(dist.mse_part)
            epoch_kl.append(dist.kl_part)
            epoch_clus.append(clus.value)
        trace.append(
            {
                "epoch": epoch,
                "loss": float(np.mean(epoch_losses)),
                "mse": float(np.mean(epoch_mse)),
                "kl": float(np.mean(epoch_kl)),
                "clus": float(np.mean(epoch_clus)),
            }
        )
    return TrainResult(model=model, trace=trace, bank=bank)


# ---------------------------------------------------------------------------
# persistence


def _encode(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8",
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=obj["dtype"]).reshape(obj["shape"]).copy()


def save_model(model: StudentModel, path: str | Path,
               config_digest: str | None = None) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "format_version": MODEL_FORMAT_VERSION,
        "layer_dims": model.layer_dims,
        "num_classes": model.num_classes,
        "activation": model.activation,
        "seed": model.seed,
        "config_digest": config_digest,
        "arrays": {},
    }
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        doc["arrays"][f"W{i}"] = _encode(w)
        doc["arrays"][f"b{i}"] = _encode(b)
    Path(path).write_text(json.dumps(doc))


def load_model(path: str | Path) -> StudentModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"unreadable model file {path}: {exc}") from exc
    if doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: not a student model file")
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: format version {doc.get('format_version')} "
            f"!= supported {MODEL_FORMAT_VERSION}"
        )
    model = StudentModel(
        layer_dims=doc["layer_dims"],
        num_classes=doc["num_classes"],
        activation=doc["activation"],
        seed=doc.get("seed", 0),
    )
    try:
        for i in range(5):
            w = _decode(doc["arrays"][f"W{i}"])
            b = _decode(doc["arrays"][f"b{i}"])
            if w.shape != model.weights[i].shape or b.shape != model.biases[i].shape:
                raise ModelFormatError(
                    f"{path}: array W{i}/b{i} shape mismatch with layer_dims"
                )
            model.weights[i] = w
            model.biases[i] = b
    except KeyError as exc:
        raise ModelFormatError(f"{path}: missing array {exc}") from exc
    return model
