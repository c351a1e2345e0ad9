"""Shared fixtures: the reference synthetic corpus and trained students.

Session-scoped because training is the expensive part; acceptance
criteria and CLI tests reuse the same artifacts.
"""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for `oracles`

from netclus.datagen import SynthSpec, generate
from netclus.ingest import DatasetManifest, ensure_features, load_dataset
from netclus.student import StudentModel, TrainConfig, save_model, train_cfe, train_distill

REF_SEED = 7
REF_CLASSES = 10
REF_PER_CLASS = 150
REF_FEATURE_DIM = 320
REF_EMBEDDING_DIM = 32


def reference_spec(**overrides) -> SynthSpec:
    base = dict(
        num_classes=REF_CLASSES,
        flows_per_class=REF_PER_CLASS,
        feature_dim=REF_FEATURE_DIM,
        embedding_dim=REF_EMBEDDING_DIM,
        seed=REF_SEED,
    )
    base.update(overrides)
    return SynthSpec(**base)


def load_split(data_dir, split: str):
    from netclus.datagen import load_manifest

    manifest = load_manifest(data_dir)
    return ensure_features(
        load_dataset(DatasetManifest.from_dict(manifest[split]), data_dir)
    ), manifest


def student_for(manifest_split: dict, seed: int) -> StudentModel:
    return StudentModel(
        layer_dims=[
            manifest_split["feature_dim"], 256, 256, 256, manifest_split["embedding_dim"]
        ],
        num_classes=manifest_split["num_classes"],
        activation="relu",
        seed=seed,
    )


@pytest.fixture(scope="session")
def ref_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("refdata")
    manifest = generate(reference_spec(), out)
    assert manifest["separability"]["separable"]
    return out, manifest


@pytest.fixture(scope="session")
def ref_model(ref_data):
    out, manifest = ref_data
    train, _ = load_split(out, "train")
    model = student_for(manifest["train"], seed=REF_SEED)
    train_cfe(model, train, TrainConfig(epochs=10, batch_size=64, seed=REF_SEED))
    path = out / "cfe_model.json"
    save_model(model, path)
    return model, path


@pytest.fixture(scope="session")
def holdout_run(tmp_path_factory):
    """Distilled student trained on 9 classes; class 9 appears only at test."""
    out = tmp_path_factory.mktemp("holdout")
    manifest = generate(reference_spec(holdout_classes=(9,)), out)
    assert manifest["separability"]["separable"]
    train, _ = load_split(out, "train")
    model = student_for(manifest["train"], seed=REF_SEED + 1)
    train_distill(
        model, train, train.teacher, TrainConfig(epochs=20, batch_size=64, seed=REF_SEED + 1)
    )
    return out, manifest, model


@pytest.fixture(scope="session")
def noisy_teacher_run(tmp_path_factory):
    """Distilled student whose teacher flips 20% of its labels."""
    out = tmp_path_factory.mktemp("noisyteacher")
    manifest = generate(reference_spec(seed=11, teacher_flip_rate=0.2), out)
    assert manifest["separability"]["separable"]
    train, _ = load_split(out, "train")
    model = student_for(manifest["train"], seed=12)
    train_distill(model, train, train.teacher, TrainConfig(epochs=20, batch_size=64, seed=12))
    return out, manifest, model
