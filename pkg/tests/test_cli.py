import json

import pytest

from netclus.cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, main


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def small_spec_file(tmp_path, **overrides):
    spec = {
        "num_classes": 3,
        "flows_per_class": 90,
        "feature_dim": 64,
        "embedding_dim": 8,
        "noise": 0.04,
        "seed": 5,
    }
    spec.update(overrides)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    return path


def train_config_file(tmp_path, **overrides):
    cfg = {"hidden_dims": [32, 32, 32], "epochs": 6, "batch_size": 32}
    cfg.update(overrides)
    path = tmp_path / "train.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen + train-cfe once; reused by the read-only CLI tests."""
    tmp = tmp_path_factory.mktemp("cliws")
    data = tmp / "data"
    spec = small_spec_file(tmp)
    cfg = train_config_file(tmp)
    assert main(["gen", "--spec", str(spec), "--out", str(data),
                 "--out-json", str(tmp / "gen.json")]) == EXIT_OK
    model = tmp / "model.json"
    assert main(["train-cfe", "--data", str(data), "--out", str(model),
                 "--config", str(cfg), "--out-json", str(tmp / "train.json.out")]) == EXIT_OK
    return tmp, data, model


def test_gen_writes_dataset_and_summary(tmp_path, capsys):
    spec = small_spec_file(tmp_path)
    code, out, err = run_cli(
        capsys, "gen", "--spec", str(spec), "--out", str(tmp_path / "d")
    )
    assert code == EXIT_OK
    summary = json.loads(out)
    assert summary["manifest"]["separability"]["separable"]
    assert summary["config"]["seed"] == 5
    assert (tmp_path / "d" / "train_flows.jsonl").exists()
    assert "[gen]" in err


def test_gen_then_train_then_infer_fast_fraction(workspace, capsys):
    tmp, data, model = workspace
    code, out, _ = run_cli(
        capsys, "infer", "--data", str(data), "--model", str(model),
        "--oracle", _oracle_file(tmp, {"mode": "simulated"}),
        "--delta", "0.5,0.5", "--seed", "3",
    )
    assert code == EXIT_OK
    summary = json.loads(out)
    assert summary["fast_path_fraction"] >= 0.8
    assert summary["macro"]["macro_f1"] >= 0.99
    assert summary["config"]["gamma"] == 0.5


def _oracle_file(tmp, cfg):
    path = tmp / f"oracle_{abs(hash(json.dumps(cfg, sort_keys=True)))}.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_infer_impossible_delta_all_fallback(workspace, capsys):
    tmp, data, model = workspace
    code, out, _ = run_cli(
        capsys, "infer", "--data", str(data), "--model", str(model),
        "--oracle", _oracle_file(tmp, {"mode": "simulated"}),
        "--delta", "1,1", "--seed", "3",
    )
    assert code == EXIT_OK
    assert json.loads(out)["fast_path_fraction"] == 0.0


def test_infer_writes_decisions(workspace, capsys, tmp_path):
    tmp, data, model = workspace
    dec = tmp_path / "decisions.jsonl"
    code, out, _ = run_cli(
        capsys, "infer", "--data", str(data), "--model", str(model),
        "--oracle", _oracle_file(tmp, {"mode": "simulated"}),
        "--decisions", str(dec), "--seed", "3",
    )
    assert code == EXIT_OK
    lines = dec.read_text().splitlines()
    assert len(lines) == json.loads(out)["counts"]["total"]


def test_infer_partial_failure_exit_code(workspace, capsys, tmp_path):
    tmp, data, model = workspace
    # recorded oracle with an empty teacher file: every fallback flow errors
    empty = tmp_path / "teacher.jsonl"
    empty.write_text("")
    code, out, _ = run_cli(
        capsys, "infer", "--data", str(data), "--model", str(model),
        "--oracle", _oracle_file(tmp_path, {"mode": "recorded", "path": str(empty)}),
        "--delta", "1,1", "--seed", "3",
    )
    assert code == EXIT_PARTIAL
    summary = json.loads(out)
    assert summary["errors"] > 0
    assert summary["counts"]["errored"] == summary["counts"]["total"]


def test_distill_runs_and_missing_teacher_errors(workspace, capsys, tmp_path):
    tmp, data, model = workspace
    cfg = train_config_file(tmp_path, epochs=2)
    code, out, _ = run_cli(
        capsys, "distill", "--data", str(data), "--out", str(tmp_path / "m.json"),
        "--config", str(cfg),
    )
    assert code == EXIT_OK
    assert (tmp_path / "m.json").exists()

    code, _, err = run_cli(
        capsys, "distill", "--data", str(data), "--out", str(tmp_path / "m2.json"),
        "--teacher", str(tmp_path / "missing.jsonl"), "--config", str(cfg),
    )
    assert code == EXIT_CONFIG
    assert "missing.jsonl" in err


def test_cluster_subcommand_reports_purity(workspace, capsys, tmp_path):
    tmp, data, model = workspace
    log = tmp_path / "merges.jsonl"
    code, out, _ = run_cli(
        capsys, "cluster", "--data", str(data), "--model", str(model),
        "--split", "test", "--merge-log", str(log), "--seed", "2",
    )
    assert code == EXIT_OK
    summary = json.loads(out)
    assert summary["weighted_purity"] >= 0.95
    assert summary["num_clusters"] <= 30
    assert log.exists()


def test_sweep_subcommand(workspace, capsys, tmp_path):
    tmp, data, model = workspace
    csv_path = tmp_path / "sweep.csv"
    code, out, _ = run_cli(
        capsys, "sweep", "--data", str(data), "--model", str(model),
        "--oracle", _oracle_file(tmp, {"mode": "simulated"}),
        "--vary", "gamma", "--grid", "0.1:0.9:0.4",
        "--csv", str(csv_path), "--seed", "3",
    )
    assert code == EXIT_OK
    rows = json.loads(out)["rows"]
    assert [r["gamma"] for r in rows] == [0.1, 0.5, 0.9]
    fr = [r["fast_path_fraction"] for r in rows]
    assert fr == sorted(fr, reverse=True)
    assert csv_path.read_text().startswith("gamma,")


def test_sweep_plot_written(workspace, capsys, tmp_path):
    tmp, data, model = workspace
    png = tmp_path / "sweep.png"
    code, _, _ = run_cli(
        capsys, "sweep", "--data", str(data), "--model", str(model),
        "--oracle", _oracle_file(tmp, {"mode": "simulated"}),
        "--vary", "eta", "--grid", "0.2:0.8:0.3", "--plot", str(png), "--seed", "3",
    )
    assert code == EXIT_OK
    assert png.exists() and png.stat().st_size > 0


def test_bench_subcommand_scaling_only(capsys):
    code, out, _ = run_cli(capsys, "bench", "--sizes", "200,400", "--seed", "1")
    assert code == EXIT_OK
    summary = json.loads(out)
    rows = summary["cluster_scaling"]["rows"]
    assert [r["n"] for r in rows] == [200, 400]
    assert all(r["seconds"] > 0 for r in rows)


def test_bench_with_hybrid_report(workspace, capsys):
    tmp, data, model = workspace
    code, out, _ = run_cli(
        capsys, "bench", "--sizes", "200", "--data", str(data), "--model", str(model),
        "--seed", "1",
    )
    assert code == EXIT_OK
    hybrid = json.loads(out)["hybrid"]
    assert hybrid["flows"] == 54
    assert hybrid["speedup"] > 0


def test_eval_subcommand(workspace, capsys, tmp_path):
    tmp, data, model = workspace
    dec = tmp_path / "d.jsonl"
    run_cli(
        capsys, "infer", "--data", str(data), "--model", str(model),
        "--oracle", _oracle_file(tmp, {"mode": "simulated"}),
        "--decisions", str(dec), "--seed", "3",
    )
    code, out, _ = run_cli(capsys, "eval", "--decisions", str(dec), "--truth", str(data))
    assert code == EXIT_OK
    summary = json.loads(out)
    assert summary["macro"]["macro_f1"] >= 0.99
    assert summary["scored"] > 0


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--bogus", "x"])
    assert exc.value.code == 2


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run_cli(capsys, "gen", "--spec", str(bad), "--out", str(tmp_path / "d"))
    assert code == EXIT_CONFIG
    assert "malformed" in err


def test_missing_data_dir_exits_2(capsys, tmp_path):
    code, _, err = run_cli(
        capsys, "train-cfe", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m")
    )
    assert code == EXIT_CONFIG


def test_env_seed_fallback(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("NETCLUS_SEED", "99")
    spec = small_spec_file(tmp_path)
    json_spec = json.loads(spec.read_text())
    del json_spec["seed"]
    spec.write_text(json.dumps(json_spec))
    code, out, _ = run_cli(capsys, "gen", "--spec", str(spec), "--out", str(tmp_path / "d"))
    assert code == EXIT_OK
    assert json.loads(out)["config"]["seed"] == 99


def test_seed_flag_beats_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("NETCLUS_SEED", "99")
    spec = small_spec_file(tmp_path)
    code, out, _ = run_cli(
        capsys, "gen", "--spec", str(spec), "--out", str(tmp_path / "d"), "--seed", "3"
    )
    assert code == EXIT_OK
    assert json.loads(out)["config"]["seed"] == 3
