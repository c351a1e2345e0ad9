import numpy as np
import pytest

from netclus.core import LossWeights, make_rng, softmax
from netclus.core.types import FlowRecord, LabeledDataset, TeacherOutput
from netclus.student import (
    ModelFormatError,
    StudentModel,
    TrainConfig,
    TrainingDivergedError,
    load_model,
    save_model,
    train_cfe,
    train_distill,
)


def small_model(seed=0, activation="relu"):
    return StudentModel([4, 8, 8, 8, 4], num_classes=3, activation=activation, seed=seed)


def toy_dataset(n_per_class=100, seed=0, classes=2, dim=4):
    """Linearly separable two-direction toy."""
    rng = make_rng(seed)
    dirs = np.eye(dim)[:classes]
    flows = []
    for c in range(classes):
        pts = dirs[c] + 0.05 * rng.standard_normal((n_per_class, dim))
        for i, p in enumerate(pts):
            flows.append(FlowRecord(id=f"f{c}-{i}", features=p, label=c))
    return LabeledDataset(flows=flows, num_classes=classes)


def test_zero_weights_give_uniform_softmax():
    m = small_model()
    for w in m.weights:
        w[:] = 0.0
    x = make_rng(0).standard_normal((5, 4))
    emb, logits = m.forward(x)
    assert emb == pytest.approx(np.zeros((5, 4)))
    assert logits == pytest.approx(np.zeros((5, 3)))
    assert softmax(logits) == pytest.approx(np.full((5, 3), 1 / 3))


def test_forward_matches_hand_composed_affines():
    m = StudentModel([1, 1, 1, 1, 1], num_classes=1, activation="relu", seed=0)
    ws = [0.5, 1.5, 2.0, 0.25, 3.0]
    bs = [0.1, 0.2, 0.0, 0.3, -0.5]
    for i in range(5):
        m.weights[i][:] = ws[i]
        m.biases[i][:] = bs[i]
    x = np.array([[2.0]])
    a = 2.0
    for i in range(3):
        a = max(a * ws[i] + bs[i], 0.0)  # relu stays linear for positives
    emb_expected = a * ws[3] + bs[3]
    logit_expected = emb_expected * ws[4] + bs[4]
    emb, logits = m.forward(x)
    assert emb[0, 0] == pytest.approx(emb_expected)
    assert logits[0, 0] == pytest.approx(logit_expected)


def test_batch_of_two_equals_stacked_singles():
    m = small_model(seed=3)
    x = make_rng(1).standard_normal((2, 4))
    emb, logits = m.forward(x)
    e0, l0 = m.forward(x[:1])
    e1, l1 = m.forward(x[1:])
    assert emb == pytest.approx(np.vstack([e0, e1]))
    assert logits == pytest.approx(np.vstack([l0, l1]))


def test_forward_permutation_equivariant():
    m = small_model(seed=4)
    x = make_rng(2).standard_normal((6, 4))
    perm = make_rng(3).permutation(6)
    emb, logits = m.forward(x)
    emb_p, logits_p = m.forward(x[perm])
    assert emb_p == pytest.approx(emb[perm])
    assert logits_p == pytest.approx(logits[perm])


def test_forward_rejects_wrong_input_dim():
    m = small_model()
    with pytest.raises(ValueError, match="d_in"):
        m.forward(np.zeros((2, 5)))


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_backward_matches_fd_through_arbitrary_grads(activation):
    # random upstream gradients exercise both the embedding and logits paths
    m = small_model(seed=5, activation=activation)
    rng = make_rng(6)
    for b in m.biases:
        b += 0.05 * rng.standard_normal(b.shape)  # move pre-activations off 0
    x = rng.standard_normal((5, 4))
    g_emb = rng.standard_normal((5, 4))
    g_logits = rng.standard_normal((5, 3))

    def objective():
        emb, logits = m.forward(x)
        return float(np.sum(emb * g_emb) + np.sum(logits * g_logits))

    if activation == "relu":
        # keep FD away from relu kinks
        zs = m.forward_cached(x)[2][0]
        assert min(np.min(np.abs(z)) for z in zs) > 1e-4

    _, _, cache = m.forward_cached(x)
    grads = m.backward(cache, g_emb, g_logits)
    params = m.parameters()
    h = 1e-6
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = objective()
            flat[i] = old - h
            fm = objective()
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(fd - gf[i]) / max(abs(fd), abs(gf[i]), 1e-8))
    assert worst < 1e-5


def test_train_cfe_reaches_high_accuracy_and_descends():
    ds = toy_dataset()
    m = StudentModel([4, 16, 16, 16, 4], num_classes=2, seed=1)
    res = train_cfe(m, ds, TrainConfig(epochs=8, batch_size=32, seed=1))
    _, logits = m.forward(ds.feature_matrix())
    acc = float(np.mean(np.argmax(logits, axis=1) == ds.labels()))
    assert acc >= 0.99
    losses = [row["loss"] for row in res.trace]
    assert np.median(losses[-3:]) < np.median(losses[:3])


def test_train_cfe_bit_reproducible():
    ds = toy_dataset()
    m1 = StudentModel([4, 8, 8, 8, 4], num_classes=2, seed=2)
    m2 = StudentModel([4, 8, 8, 8, 4], num_classes=2, seed=2)
    cfg = TrainConfig(epochs=3, batch_size=16, seed=9)
    train_cfe(m1, ds, cfg)
    train_cfe(m2, ds, cfg)
    for w1, w2 in zip(m1.parameters(), m2.parameters()):
        assert np.array_equal(w1, w2)


def test_train_cfe_sgd_option():
    ds = toy_dataset(n_per_class=30)
    m = StudentModel([4, 8, 8, 8, 4], num_classes=2, seed=2)
    res = train_cfe(m, ds, TrainConfig(epochs=2, batch_size=16, seed=3, optimizer="sgd"))
    assert len(res.trace) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_cfe_aborts_on_divergence():
    ds = toy_dataset(n_per_class=20)
    m = StudentModel([4, 8, 8, 8, 4], num_classes=2, seed=2)
    m.weights[0][:] = 1e200  # forces non-finite activations
    with pytest.raises((TrainingDivergedError, ValueError)):
        train_cfe(m, ds, TrainConfig(epochs=1, batch_size=8, seed=0))


def linear_teacher(ds, dim_out=4, seed=0, probs_mode="onehot"):
    rng = make_rng(seed)
    a = rng.standard_normal((dim_out, ds.flows[0].features.shape[0]))
    out = {}
    c = ds.num_classes
    for f in ds.flows:
        if probs_mode == "uniform":
            probs = np.full(c, 1.0 / c)
        else:
            probs = np.full(c, 0.01 / (c - 1))
            probs[f.label] = 0.99
        out[f.id] = TeacherOutput(flow_id=f.id, embedding=a @ f.features, probs=probs)
    return out


def test_train_distill_fits_linear_teacher():
    ds = toy_dataset(n_per_class=100)
    teacher = linear_teacher(ds)
    m = StudentModel([4, 32, 32, 32, 4], num_classes=2, seed=3)
    res = train_distill(
        m, ds, teacher,
        TrainConfig(epochs=40, batch_size=32, seed=3, learning_rate=1e-2),
    )
    assert res.trace[-1]["mse"] < 1e-3


def test_train_distill_uniform_teacher_reduces_kl():
    ds = toy_dataset(n_per_class=60)
    teacher = linear_teacher(ds, probs_mode="uniform")
    m = StudentModel([4, 16, 16, 16, 4], num_classes=2, seed=4)
    cfg = TrainConfig(epochs=10, batch_size=32, seed=4, weights=LossWeights(lam=0.0))
    res = train_distill(m, ds, teacher, cfg)
    assert res.trace[-1]["kl"] < res.trace[0]["kl"]


def test_train_distill_missing_teacher_names_flow():
    ds = toy_dataset(n_per_class=5)
    teacher = linear_teacher(ds)
    del teacher["f0-0"]
    m = StudentModel([4, 8, 8, 8, 4], num_classes=2, seed=5)
    with pytest.raises(ValueError, match="f0-0"):
        train_distill(m, ds, teacher, TrainConfig(epochs=1, batch_size=8, seed=0))


def test_train_distill_reproducible():
    ds = toy_dataset(n_per_class=20)
    teacher = linear_teacher(ds)
    models = []
    for _ in range(2):
        m = StudentModel([4, 8, 8, 8, 4], num_classes=2, seed=6)
        train_distill(m, ds, teacher, TrainConfig(epochs=2, batch_size=16, seed=6))
        models.append(m)
    for w1, w2 in zip(models[0].parameters(), models[1].parameters()):
        assert np.array_equal(w1, w2)


def test_save_load_roundtrip_bit_exact(tmp_path):
    m = small_model(seed=7)
    path = tmp_path / "model.json"
    save_model(m, path, config_digest="abc")
    loaded = load_model(path)
    x = make_rng(8).standard_normal((3, 4))
    e1, l1 = m.forward(x)
    e2, l2 = loaded.forward(x)
    assert np.array_equal(e1, e2)
    assert np.array_equal(l1, l2)
    for w1, w2 in zip(m.parameters(), loaded.parameters()):
        assert np.array_equal(w1, w2)


def test_load_truncated_file_errors(tmp_path):
    m = small_model()
    path = tmp_path / "model.json"
    save_model(m, path)
    path.write_text(path.read_text()[:100])
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_load_version_mismatch(tmp_path):
    import json

    m = small_model()
    path = tmp_path / "model.json"
    save_model(m, path)
    doc = json.loads(path.read_text())
    doc["format_version"] = 999
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError, match="version"):
        load_model(path)


def test_loaded_model_rejects_wrong_dataset_dim(tmp_path):
    m = small_model()
    path = tmp_path / "model.json"
    save_model(m, path)
    loaded = load_model(path)
    with pytest.raises(ValueError, match="d_in"):
        loaded.forward(np.zeros((2, 9)))


def test_config_validation():
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=1)
