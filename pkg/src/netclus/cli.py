"""Operator command line.

Every subcommand reads an optional JSON config file plus flag overrides,
honors ``--seed`` (falling back to the NETCLUS_SEED environment
variable), prints a machine-readable JSON summary to stdout (or
``--out``), and writes a short human-readable digest to stderr.

Exit codes: 0 success, 2 configuration or input errors, 3 inference
completed with per-flow oracle failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


class CliError(Exception):
    pass


def _load_json(path: str | None, what: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"malformed {what} file {p}: {exc}") from exc
    if not isinstance(obj, dict):
        raise CliError(f"{what} file {p} must hold a JSON object")
    return obj


def _resolve_seed(flag_seed: int | None, config: dict) -> int:
    if flag_seed is not None:
        return flag_seed
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("NETCLUS_SEED")
    if env is not None:
        return int(env)
    return 0


def _emit(summary: dict, out: str | None) -> None:
    text = json.dumps(summary, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _stderr_table(title: str, rows: dict) -> None:
    print(f"[{title}]", file=sys.stderr)
    for k, v in rows.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        print(f"  {k:<24} {v}", file=sys.stderr)


def _load_split(data_dir: str, split: str):
    from .datagen import load_manifest
    from .ingest import DatasetManifest, ensure_features, load_dataset

    manifest = load_manifest(data_dir)
    if split not in manifest:
        raise CliError(f"manifest in {data_dir} has no {split!r} split")
    ds = load_dataset(DatasetManifest.from_dict(manifest[split]), data_dir)
    return ensure_features(ds), manifest


def _parse_delta(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise CliError(f"--delta expects 'gamma,eta', got {text!r}")
    return float(parts[0]), float(parts[1])


def _parse_grid(text: str) -> list[float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise CliError(f"--grid expects 'start:stop:step', got {text!r}")
    start, stop, step = (float(p) for p in parts)
    if step <= 0:
        raise CliError("--grid step must be positive")
    out = []
    v = start
    while v <= stop + 1e-12:
        out.append(round(v, 12))
        v += step
    return out


def _train_config(config: dict, seed: int, default_epochs: int):
    from .core.types import LossWeights
    from .student import TrainConfig

    weights = LossWeights(
        beta=float(config.get("beta", 1.0)),
        lam=float(config.get("lam", 0.1)),
        margin=float(config.get("margin", 0.2)),
        triplet_cap=int(config.get("triplet_cap", 512)),
    )
    return TrainConfig(
        epochs=int(config.get("epochs", default_epochs)),
        batch_size=int(config.get("batch_size", 64)),
        learning_rate=float(config.get("learning_rate", 1e-3)),
        seed=seed,
        weights=weights,
        optimizer=config.get("optimizer", "adam"),
        centroid_momentum=float(config.get("centroid_momentum", 0.9)),
    )


def _build_model(manifest_split: dict, config: dict, seed: int):
    from .student import StudentModel

    hidden = [int(v) for v in config.get("hidden_dims", [256, 256, 256])]
    if len(hidden) != 3:
        raise CliError("hidden_dims must list exactly 3 widths")
    dims = [manifest_split["feature_dim"], *hidden, manifest_split["embedding_dim"]]
    return StudentModel(
        layer_dims=dims,
        num_classes=manifest_split["num_classes"],
        activation=config.get("activation", "relu"),
        seed=seed,
    )


def _write_trace(path: Path, trace: list[dict]) -> None:
    with path.open("w") as fh:
        for row in trace:
            fh.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    from .datagen import SynthSpec, generate

    config = _load_json(args.spec, "spec")
    seed = _resolve_seed(args.seed, config)
    config["seed"] = seed
    spec = SynthSpec.from_dict(config)
    manifest = generate(spec, args.out)
    summary = {"config": config, "out_dir": args.out, "manifest": manifest}
    _emit(summary, args.out_json)
    _stderr_table(
        "gen",
        {
            "out_dir": args.out,
            "train_flows": manifest["counts"]["train"],
            "test_flows": manifest["counts"]["test"],
            "separable": manifest["separability"]["separable"],
        },
    )
    return EXIT_OK


def _cmd_train_cfe(args) -> int:
    from .student import save_model, train_cfe

    config = _load_json(args.config, "config")
    seed = _resolve_seed(args.seed, config)
    ds, manifest = _load_split(args.data, "train")
    model = _build_model(manifest["train"], config, seed)
    tc = _train_config(config, seed, default_epochs=10)
    result = train_cfe(model, ds, tc)
    save_model(model, args.out, config_digest=tc.digest())
    trace_path = Path(args.out).with_suffix(".trace.jsonl")
    _write_trace(trace_path, result.trace)
    effective = {**config, "seed": seed, "epochs": tc.epochs, "data": args.data}
    summary = {
        "config": effective,
        "model_path": args.out,
        "trace_path": str(trace_path),
        "config_digest": tc.digest(),
        "final_loss": result.trace[-1]["loss"],
        "epochs": tc.epochs,
    }
    _emit(summary, args.out_json)
    _stderr_table("train-cfe", {"model": args.out, "final_loss": result.trace[-1]["loss"]})
    return EXIT_OK


def _cmd_distill(args) -> int:
    from .ingest import load_teacher
    from .student import save_model, train_distill

    config = _load_json(args.config, "config")
    seed = _resolve_seed(args.seed, config)
    ds, manifest = _load_split(args.data, "train")
    teacher_path = Path(args.teacher) if args.teacher else Path(args.data) / manifest[
        "train"
    ].get("teacher_path", "train_teacher.jsonl")
    if not teacher_path.exists():
        raise CliError(f"teacher file not found: {teacher_path}")
    teacher = load_teacher(
        teacher_path, manifest["train"]["embedding_dim"], manifest["train"]["num_classes"]
    )
    model = _build_model(manifest["train"], config, seed)
    tc = _train_config(config, seed, default_epochs=20)
    result = train_distill(model, ds, teacher, tc)
    save_model(model, args.out, config_digest=tc.digest())
    trace_path = Path(args.out).with_suffix(".trace.jsonl")
    _write_trace(trace_path, result.trace)
    effective = {**config, "seed": seed, "epochs": tc.epochs,
                 "data": args.data, "teacher": str(teacher_path)}
    summary = {
        "config": effective,
        "model_path": args.out,
        "trace_path": str(trace_path),
        "config_digest": tc.digest(),
        "final_loss": result.trace[-1]["loss"],
        "epochs": tc.epochs,
    }
    _emit(summary, args.out_json)
    _stderr_table("distill", {"model": args.out, "final_loss": result.trace[-1]["loss"]})
    return EXIT_OK


def _cmd_cluster(args) -> int:
    import numpy as np

    from .cluster import MergeParams, cluster, write_merge_log
    from .evaluate import cluster_purity
    from .pipeline import batch_embed
    from .student import load_model

    config = _load_json(args.params, "params")
    seed = _resolve_seed(args.seed, config)
    ds, manifest = _load_split(args.data, args.split)
    model = load_model(args.model)
    params = MergeParams(
        stop_cluster_count=int(
            config.get("stop_cluster_count", 10 * manifest[args.split]["num_classes"])
        ),
        max_rounds=int(config.get("max_rounds", 64)),
        neighbor_k=int(config.get("neighbor_k", 64)),
        exact_threshold=int(config.get("exact_threshold", 2048)),
    )
    emb, _ = batch_embed(model, ds)
    result = cluster(emb, params, seed=seed)
    if args.merge_log:
        write_merge_log(args.merge_log, result.merge_log)
    labels = np.array([-1 if f.label is None else f.label for f in ds.flows])
    summary: dict = {
        "config": {**config, "seed": seed, "split": args.split, "data": args.data},
        "num_clusters": len(result.clusters),
        "rounds": result.rounds,
        "merges": len(result.merge_log),
        "cluster_sizes": sorted((c.size for c in result.clusters), reverse=True),
    }
    if np.any(labels >= 0):
        purity = cluster_purity(result.clusters, labels)
        summary["weighted_purity"] = purity.weighted
        summary["per_cluster"] = purity.per_cluster
    _emit(summary, args.out_json)
    _stderr_table(
        "cluster",
        {
            "clusters": len(result.clusters),
            "rounds": result.rounds,
            "weighted_purity": summary.get("weighted_purity", "n/a"),
        },
    )
    return EXIT_OK


def _infer_setup(args, config: dict, seed: int):
    from .asi import Discriminant
    from .cluster import MergeParams
    from .pipeline import oracle_from_config, select_anchors
    from .student import load_model

    ds, manifest = _load_split(args.data, "test")
    model = load_model(args.model)
    gamma, eta = (
        _parse_delta(args.delta) if args.delta else
        (float(config.get("gamma", 0.5)), float(config.get("eta", 0.5)))
    )
    disc = Discriminant(
        gamma=gamma,
        eta=eta,
        k=int(config.get("k", 5)),
        gamma_nov=float(config.get("gamma_nov", 0.9)),
        eta_nov=float(config.get("eta_nov", 0.6)),
    )
    merge_params = MergeParams(
        stop_cluster_count=int(
            config.get("stop_cluster_count", 10 * manifest["test"]["num_classes"])
        ),
        max_rounds=int(config.get("max_rounds", 64)),
        neighbor_k=int(config.get("neighbor_k", 64)),
        exact_threshold=int(config.get("exact_threshold", 2048)),
    )
    anchors = None
    per_class = int(config.get("anchors_per_class", 50))
    if per_class > 0:
        train_ds, _ = _load_split(args.data, "train")
        anchors = select_anchors(train_ds, per_class)
    oracle_cfg = _load_json(args.oracle, "oracle") if args.oracle else {"mode": "recorded"}
    oracle_cfg.setdefault("seed", seed)
    oracle = oracle_from_config(oracle_cfg, ds, args.data)
    return ds, manifest, model, disc, merge_params, anchors, oracle, oracle_cfg


def _cmd_infer(args) -> int:
    from .evaluate import prf_from_decisions
    from .pipeline import infer, write_decisions

    config = _load_json(args.config, "config")
    seed = _resolve_seed(args.seed, config)
    ds, manifest, model, disc, merge_params, anchors, oracle, oracle_cfg = _infer_setup(
        args, config, seed
    )
    result = infer(
        ds, model, oracle, merge_params, disc, anchors,
        seed=seed, score_novel=bool(config.get("score_novel", False)),
    )
    if args.decisions:
        write_decisions(args.decisions, result.decisions)
    truth = {f.id: f.label for f in ds.flows}
    summary = dict(result.summary)
    summary["config"] = {
        **config,
        "seed": seed,
        "data": args.data,
        "model": args.model,
        "gamma": disc.gamma,
        "eta": disc.eta,
        "oracle": oracle_cfg,
    }
    summary["fast_path_fraction"] = summary["fractions"]["fast_path"]
    scoreable = [
        d for d in result.decisions
        if d.label is not None and d.decision != "novel_candidate"
    ]
    if scoreable and all(v is not None for v in truth.values()):
        summary["macro"] = prf_from_decisions(
            result.decisions, truth, manifest["test"]["num_classes"]
        ).to_dict()
    _emit(summary, args.out_json)
    _stderr_table(
        "infer",
        {
            "flows": summary["counts"]["total"],
            "fast_path_fraction": summary["fast_path_fraction"],
            "novel_clusters": len(summary["novel_clusters"]),
            "errors": summary["errors"],
            "macro_f1": summary.get("macro", {}).get("macro_f1", "n/a"),
        },
    )
    return EXIT_PARTIAL if summary["errors"] > 0 else EXIT_OK


def _cmd_sweep(args) -> int:
    from .asi import Discriminant
    from .evaluate import asi_sweep, write_sweep_csv
    from .pipeline import oracle_from_config, prepare

    config = _load_json(args.config, "config")
    seed = _resolve_seed(args.seed, config)
    ds, manifest, model, disc, merge_params, anchors, oracle, oracle_cfg = _infer_setup(
        args, config, seed
    )
    grid = _parse_grid(args.grid)
    prep = prepare(ds, model, merge_params, disc, anchors, seed=seed)
    rows = asi_sweep(
        prep,
        oracle_factory=lambda: oracle_from_config(dict(oracle_cfg), ds, args.data),
        disc=disc,
        vary=args.vary,
        grid=grid,
        num_classes=manifest["test"]["num_classes"],
    )
    if args.csv:
        write_sweep_csv(args.csv, rows)
    if args.plot:
        _plot_sweep(rows, args.vary, args.plot)
    summary = {
        "config": {**config, "seed": seed, "vary": args.vary, "grid": grid,
                   "data": args.data, "oracle": oracle_cfg},
        "rows": rows,
    }
    _emit(summary, args.out_json)
    _stderr_table("sweep", {f"{args.vary}={r[args.vary]:g}": r["fast_path_fraction"] for r in rows})
    return EXIT_OK


def _plot_sweep(rows: list[dict], vary: str, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r[vary] for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(xs, [r["fast_path_fraction"] for r in rows], "o-", color="tab:blue",
             label="fast-path fraction")
    ax1.set_xlabel(vary)
    ax1.set_ylabel("fast-path fraction", color="tab:blue")
    ax1.set_ylim(-0.02, 1.02)
    if any(r.get("fast_path_precision") is not None for r in rows):
        ax2 = ax1.twinx()
        pts = [(x, r["fast_path_precision"]) for x, r in zip(xs, rows)
               if r.get("fast_path_precision") is not None]
        ax2.plot(*zip(*pts), "s--", color="tab:red", label="fast-path precision")
        ax2.set_ylabel("fast-path precision", color="tab:red")
        ax2.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _cmd_bench(args) -> int:
    from .bench import run_bench

    config = _load_json(args.config, "config")
    seed = _resolve_seed(args.seed, config)
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else [1000, 4000, 16000]
    summary = run_bench(
        sizes=sizes,
        seed=seed,
        data_dir=args.data,
        model_path=args.model,
        latency_multiplier=float(config.get("latency_multiplier", 10.0)),
        config=config,
    )
    summary["config"] = {**config, "seed": seed, "sizes": sizes}
    _emit(summary, args.out_json)
    scaling = summary["cluster_scaling"]
    _stderr_table(
        "bench",
        {
            **{f"cluster n={row['n']}": f"{row['seconds']:.3f}s" for row in scaling["rows"]},
            "ratio_max_over_min": scaling["wall_ratio"],
            "speedup": summary.get("hybrid", {}).get("speedup", "n/a"),
        },
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .evaluate import macro_prf

    ds, manifest = _load_split(args.truth, "test")
    truth = {f.id: f.label for f in ds.flows}
    if any(v is None for v in truth.values()):
        raise CliError("eval requires ground-truth labels on every flow")
    path = Path(args.decisions)
    if not path.exists():
        raise CliError(f"decisions file not found: {path}")
    y_true, y_pred = [], []
    novel_ids, errored = [], 0
    with path.open() as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            fid = obj["flow_id"]
            if fid not in truth:
                raise CliError(f"decision for unknown flow {fid!r}")
            kind = obj["decision"]
            if kind == "novel_candidate":
                novel_ids.append(fid)
                if not args.include_novel or obj.get("label") is None:
                    continue
            if kind == "errored":
                errored += 1
                continue
            if obj.get("label") is None:
                continue
            y_true.append(truth[fid])
            y_pred.append(int(obj["label"]))
    num_classes = manifest["test"]["num_classes"]
    summary: dict = {
        "config": {"decisions": args.decisions, "truth": args.truth,
                   "include_novel": args.include_novel},
        "scored": len(y_true),
        "novel_candidates": len(novel_ids),
        "errored": errored,
        "macro": macro_prf(y_true, y_pred, num_classes).to_dict() if y_true else None,
    }
    holdout = set(manifest["spec"].get("holdout_classes", []))
    if holdout:
        novel_set = set(novel_ids)
        hold_ids = [fid for fid, lab in truth.items() if lab in holdout]
        known_ids = [fid for fid, lab in truth.items() if lab not in holdout]
        summary["novelty"] = {
            "holdout_classes": sorted(holdout),
            "recall": (
                sum(fid in novel_set for fid in hold_ids) / len(hold_ids) if hold_ids else 0.0
            ),
            "false_flag_rate": (
                sum(fid in novel_set for fid in known_ids) / len(known_ids)
                if known_ids else 0.0
            ),
        }
    _emit(summary, args.out_json)
    digest = {"scored": summary["scored"],
              "macro_f1": (summary["macro"] or {}).get("macro_f1", "n/a")}
    if "novelty" in summary:
        digest["novelty_recall"] = summary["novelty"]["recall"]
    _stderr_table("eval", digest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netclus",
        description="Train, cluster, and route traffic flows with ASI validation.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numba worker threads (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        p.add_argument("--seed", type=int, default=None,
                       help="run seed (falls back to NETCLUS_SEED, then 0)")
        p.add_argument("--out-json", default=None,
                       help="write the JSON summary here instead of stdout")
        if config:
            p.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", default=None, help="JSON synth spec file")
    p.add_argument("--out", required=True, help="output dataset directory")
    add_common(p, config=False)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train-cfe", help="train the student with the combined loss")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model output path")
    add_common(p)
    p.set_defaults(func=_cmd_train_cfe)

    p = sub.add_parser("distill", help="distill recorded teacher outputs into the student")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", default=None, help="teacher JSONL (default: from manifest)")
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("cluster", help="cluster a split's embeddings and report purity")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--params", default=None, help="JSON merge params file")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--merge-log", default=None, help="write the merge log JSONL here")
    add_common(p, config=False)
    p.set_defaults(func=_cmd_cluster, params=None)

    p = sub.add_parser("infer", help="hybrid inference with ASI routing")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--oracle", default=None, help="JSON oracle config file")
    p.add_argument("--delta", default=None, help="gamma,eta thresholds")
    p.add_argument("--decisions", default=None, help="write per-flow decisions JSONL here")
    add_common(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("sweep", help="sweep gamma or eta over a grid")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--oracle", default=None)
    p.add_argument("--delta", default=None)
    p.add_argument("--vary", required=True, choices=("gamma", "eta"))
    p.add_argument("--grid", required=True, help="start:stop:step")
    p.add_argument("--csv", default=None, help="write the sweep table CSV here")
    p.add_argument("--plot", default=None, help="write a static plot image here")
    add_common(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("bench", help="clustering scaling and hybrid speedup report")
    p.add_argument("--sizes", default=None, help="comma-separated point counts")
    p.add_argument("--data", default=None, help="dataset dir for the hybrid report")
    p.add_argument("--model", default=None, help="student model for the hybrid report")
    add_common(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("eval", help="score a decisions file against ground truth")
    p.add_argument("--decisions", required=True)
    p.add_argument("--truth", required=True, help="dataset directory with manifest")
    p.add_argument("--include-novel", action="store_true")
    add_common(p, config=False)
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        os.environ.setdefault("NUMBA_NUM_THREADS", str(args.threads))
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
