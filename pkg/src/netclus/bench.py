"""Benchmark drivers: clustering wall-clock scaling and hybrid speedup."""

from __future__ import annotations

import time

import numpy as np

from .cluster import MergeParams, cluster
from .cluster import kernels
from .core.rng import make_rng, split_seed


def synthetic_embeddings(
    n: int, dim: int = 32, num_classes: int = 10, noise: float = 0.2, seed: int = 0
) -> np.ndarray:
    """Class-cone embeddings for scaling runs: orthonormal directions plus noise."""
    rng = make_rng(split_seed(seed, "bench-emb", n))
    dirs, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
    labels = np.arange(n) % num_classes
    return dirs.T[labels] + noise * rng.standard_normal((n, dim)) / np.sqrt(dim)


def time_cluster(
    emb: np.ndarray, params: MergeParams, seed: int, repeats: int
) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        cluster(emb, params, seed=seed)
        best = min(best, time.perf_counter() - t0)
    return float(best)


def cluster_scaling(
    sizes: list[int],
    seed: int = 0,
    dim: int = 32,
    num_classes: int = 10,
    stop_clusters: int | None = None,
) -> dict:
    """Wall-clock per size plus the max/min ratio (near-linear check)."""
    kernels.warmup()
    stop = stop_clusters or 10 * num_classes
    params = MergeParams(stop_cluster_count=stop)
    rows = []
    for n in sorted(sizes):
        emb = synthetic_embeddings(n, dim=dim, num_classes=num_classes, seed=seed)
        repeats = 3 if n <= 4000 else 2
        seconds = time_cluster(emb, params, seed=seed, repeats=repeats)
        rows.append({"n": n, "seconds": seconds})
    smallest, largest = rows[0], rows[-1]
    ratio = largest["seconds"] / smallest["seconds"] if smallest["seconds"] > 0 else None
    return {
        "rows": rows,
        "wall_ratio": ratio,
        "size_ratio": largest["n"] / smallest["n"],
        "kernel_backend": kernels.BACKEND,
        "stop_cluster_count": stop,
    }


def measure_student_latency(model, dataset, batch_size: int = 256) -> float:
    """Warm per-flow forward latency in seconds."""
    from .pipeline import batch_embed

    batch_embed(model, dataset, batch_size)  # warm caches
    t0 = time.perf_counter()
    batch_embed(model, dataset, batch_size)
    return (time.perf_counter() - t0) / len(dataset.flows)


def hybrid_speedup(
    data_dir: str,
    model_path: str,
    seed: int = 0,
    latency_multiplier: float = 10.0,
    config: dict | None = None,
) -> dict:
    """Hybrid vs all-fallback wall-clock with a simulated teacher whose
    latency is a multiple of the measured student per-flow latency."""
    from .asi import Discriminant
    from .datagen import load_manifest
    from .ingest import DatasetManifest, ensure_features, load_dataset
    from .pipeline import SimulatedOracle, infer, select_anchors
    from .student import load_model

    config = config or {}
    manifest = load_manifest(data_dir)
    ds = ensure_features(load_dataset(DatasetManifest.from_dict(manifest["test"]), data_dir))
    train = ensure_features(load_dataset(DatasetManifest.from_dict(manifest["train"]), data_dir))
    model = load_model(model_path)

    student_s = measure_student_latency(model, ds)
    latency = latency_multiplier * student_s
    oracle = SimulatedOracle(
        truth={f.id: f.label for f in ds.flows if f.label is not None},
        num_classes=ds.num_classes,
        latency_s=latency,
        flip_rate=float(config.get("oracle_flip_rate", 0.0)),
        seed=seed,
    )
    anchors = select_anchors(train, int(config.get("anchors_per_class", 50)))
    disc = Discriminant(
        gamma=float(config.get("gamma", 0.5)), eta=float(config.get("eta", 0.5))
    )
    result = infer(ds, model, oracle, disc=disc, anchors=anchors, seed=seed)
    timing = result.summary["timing"]
    return {
        "flows": len(ds.flows),
        "student_per_flow_s": student_s,
        "oracle_latency_s": latency,
        "latency_multiplier": latency_multiplier,
        "fast_path_fraction": result.summary["fractions"]["fast_path"],
        "hybrid_wall_s": timing["hybrid_wall_s"],
        "all_fallback_wall_s": timing["all_fallback_wall_s"],
        "speedup": timing["speedup"],
    }


def run_bench(
    sizes: list[int],
    seed: int = 0,
    data_dir: str | None = None,
    model_path: str | None = None,
    latency_multiplier: float = 10.0,
    config: dict | None = None,
) -> dict:
    config = config or {}
    out: dict = {
        "cluster_scaling": cluster_scaling(
            sizes,
            seed=seed,
            dim=int(config.get("embedding_dim", 32)),
            num_classes=int(config.get("num_classes", 10)),
        )
    }
    if data_dir and model_path:
        out["hybrid"] = hybrid_speedup(
            data_dir, model_path, seed=seed,
            latency_multiplier=latency_multiplier, config=config,
        )
    return out
