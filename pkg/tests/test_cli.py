import csv
import json
import os

import numpy as np
import pytest

from grflow.cli import main


def run(*argv):
    return main(list(argv))


def read_csv_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def tree_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("treedata")
    code = run("gen-data", "--dataset", "tree", "--n-train", "300", "--n-test", "120",
               "--seed", "7", "--out", str(out))
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tree_data):
    out = tmp_path_factory.mktemp("run")
    code = run("train", "--dataset", "tree", "--data", str(tree_data),
               "--blocks", "2", "--width", "10", "--epochs", "2",
               "--batch-size", "50", "--seed", "0", "--out", str(out))
    assert code == 0
    return out


def test_gen_data_columns_and_determinism(tmp_path, tree_data):
    rows = read_csv_rows(tree_data / "train.csv")
    assert rows[0] == ["z0", "z1", "z2", "z3", "z4", "z5", "x0"]
    assert len(rows) == 301
    assert len(read_csv_rows(tree_data / "test.csv")) == 121
    again = tmp_path / "again"
    assert run("gen-data", "--dataset", "tree", "--n-train", "300", "--n-test", "120",
               "--seed", "7", "--out", str(again)) == 0
    assert (tree_data / "train.csv").read_bytes() == (again / "train.csv").read_bytes()
    assert (tree_data / "test.csv").read_bytes() == (again / "test.csv").read_bytes()


def test_gen_data_unknown_dataset(tmp_path):
    assert run("gen-data", "--dataset", "circles", "--out", str(tmp_path)) == 2


def test_manifest_written_once_per_run(tree_data):
    manifest = json.loads((tree_data / "manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["seed"] == 7
    assert sorted(manifest["artifacts"]) == ["test.csv", "train.csv"]
    assert "created_utc" in manifest


def test_train_writes_artifacts(trained):
    assert (trained / "final.json").exists()
    assert (trained / "best.json").exists()
    rows = read_csv_rows(trained / "metrics.csv")
    assert rows[0] == ["epoch", "lr", "train_loss", "test_metric"]
    assert len(rows) == 3
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["input_hashes"]  # hashed the CSV inputs


def test_train_zero_epochs(tmp_path, tree_data):
    out = tmp_path / "zero"
    assert run("train", "--dataset", "tree", "--data", str(tree_data),
               "--blocks", "1", "--width", "8", "--epochs", "0",
               "--seed", "0", "--out", str(out)) == 0
    assert (out / "final.json").exists()


def test_train_usage_errors(tmp_path):
    # missing required --out
    assert run("train", "--dataset", "tree") == 2
    # custom architecture without sizes
    assert run("train", "--dataset", "tree", "--epochs", "1",
               "--out", str(tmp_path / "x")) == 2
    # protein preset has no synthetic generator and needs --data
    assert run("train", "--preset", "grf-s-protein", "--epochs", "1",
               "--out", str(tmp_path / "y")) == 2


def test_eval_checkpoint(tmp_path, tree_data, trained, capsys):
    out = tmp_path / "eval"
    code = run("eval", "--checkpoint", str(trained / "final.json"),
               "--data", str(tree_data), "--out", str(out))
    assert code == 0
    printed = capsys.readouterr().out
    assert "log_likelihood" in printed
    summary = json.loads((out / "eval.json").read_text())
    assert summary["n"] == 120
    assert np.isfinite(summary["mean"])


def test_eval_matches_training_scale(tree_data, trained):
    """Eval re-applies the checkpoint's standardization to raw CSVs."""
    rows = read_csv_rows(trained / "metrics.csv")
    final_metric = float(rows[-1][3])
    from grflow.flow import load_checkpoint
    from grflow.training import evaluate_log_prob
    from grflow.cli import _bundle_for_checkpoint
    import argparse

    flow, extras = load_checkpoint(trained / "final.json")
    args = argparse.Namespace(data=str(tree_data), dataset=None, n_train=300,
                              n_test=120, seed=0)
    bundle = _bundle_for_checkpoint(args, flow, extras)
    flow.refresh_power()
    assert evaluate_log_prob(flow, bundle.test).mean() == pytest.approx(final_metric)


def test_invert_csv_schema(tmp_path, tree_data, trained):
    out = tmp_path / "inv"
    code = run("invert", "--checkpoint", str(trained / "final.json"),
               "--data", str(tree_data), "--n", "20", "--out", str(out))
    assert code == 0
    rows = read_csv_rows(out / "inversion.csv")
    assert rows[0] == ["sample_id", "method", "alpha", "N_used", "recon_error", "micros"]
    assert len(rows) == 21
    recon = np.array([float(r[4]) for r in rows[1:]])
    assert (recon < 1e-4).all()


def test_bench_invert_grid(tmp_path, tree_data, trained):
    out = tmp_path / "bench"
    code = run("bench-invert", "--checkpoint", str(trained / "final.json"),
               "--data", str(tree_data), "--n", "10", "--alphas", "0.5,1.0",
               "--budgets", "1,5,25", "--out", str(out))
    assert code == 0
    best = read_csv_rows(out / "grid_best.csv")
    cells = read_csv_rows(out / "grid_cells.csv")
    assert best[0] == ["sample_id", "method", "alpha", "N_used", "recon_error", "micros"]
    assert cells[0] == ["alpha", "N", "converged", "batch_seconds"]
    assert len(cells) == 1 + 2 * 3


def test_bench_invert_c_sweep(tmp_path, tree_data, trained):
    out = tmp_path / "sweep"
    code = run("bench-invert", "--checkpoint", str(trained / "final.json"),
               "--data", str(tree_data), "--n", "8", "--method", "both",
               "--c-sweep", "0.5,0.99", "--max-iters", "10", "--out", str(out))
    assert code == 0
    rows = read_csv_rows(out / "c_sweep.csv")
    assert rows[0] == ["c", "method", "iteration", "mean_recon_error", "max_recon_error"]
    assert len(rows) == 1 + 2 * 2 * 10
    # banach at c = 0.5 reaches lower error than at c = 0.99 for equal budget
    final = {(r[0], r[1]): float(r[3]) for r in rows[1:] if r[2] == "10"}
    assert final[("0.5", "banach")] < final[("0.99", "banach")]


def test_sample_density_flow(tmp_path, tree_data, trained):
    out = tmp_path / "samples"
    code = run("sample", "--checkpoint", str(trained / "final.json"),
               "--n", "15", "--seed", "3", "--out", str(out))
    assert code == 0
    rows = read_csv_rows(out / "samples.csv")
    assert rows[0] == ["z0", "z1", "z2", "z3", "z4", "z5", "x0"]
    assert len(rows) == 16


def test_elbo_train_and_sample(tmp_path, tree_data):
    out = tmp_path / "elbo"
    code = run("train", "--dataset", "tree", "--data", str(tree_data),
               "--blocks", "1", "--width", "8", "--epochs", "1",
               "--batch-size", "50", "--objective", "elbo", "--seed", "0",
               "--out", str(out))
    assert code == 0
    samples = tmp_path / "posterior"
    code = run("sample", "--checkpoint", str(out / "final.json"),
               "--data", str(tree_data), "--n", "12", "--out", str(samples))
    assert code == 0
    rows = read_csv_rows(samples / "samples.csv")
    assert len(rows) == 13


def test_eval_elbo_checkpoint(tmp_path, tree_data):
    out = tmp_path / "elbo2"
    assert run("train", "--dataset", "tree", "--data", str(tree_data),
               "--blocks", "1", "--width", "8", "--epochs", "1",
               "--batch-size", "50", "--objective", "elbo", "--seed", "0",
               "--out", str(out)) == 0
    assert run("eval", "--checkpoint", str(out / "final.json"),
               "--data", str(tree_data)) == 0


def test_config_file_defaults(tmp_path, tree_data):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 1\nblocks = 1\nwidth = 8\nbatch-size = 50\n")
    out = tmp_path / "cfgrun"
    code = run("train", "--config", str(cfg), "--dataset", "tree",
               "--data", str(tree_data), "--seed", "0", "--out", str(out))
    assert code == 0
    assert len(read_csv_rows(out / "metrics.csv")) == 2  # header + 1 epoch


def test_version_flag(capsys):
    assert run("--version") == 0
    assert capsys.readouterr().out.strip()


def test_missing_checkpoint_is_usage_error(tmp_path):
    assert run("eval", "--checkpoint", str(tmp_path / "nope.json"),
               "--dataset", "tree") == 2


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_diverged_training_exits_one(tmp_path):
    import numpy as np
    from grflow.datasets import write_csv
    from grflow.graphs import parse_graph

    g = parse_graph("a; b")
    rows = np.random.default_rng(0).normal(size=(60, 2))
    rows[0, 0] = 1e200
    data = tmp_path / "data"
    data.mkdir()
    write_csv(data / "train.csv", rows, g.nodes)
    write_csv(data / "test.csv", rows[:10], g.nodes)
    graph_file = tmp_path / "ab.graph"
    graph_file.write_text("a; b\n")
    code = run("train", "--graph", str(graph_file), "--data", str(data),
               "--blocks", "1", "--width", "4", "--epochs", "1",
               "--batch-size", "60", "--no-standardize", "--seed", "0",
               "--out", str(tmp_path / "run"))
    assert code == 1
