"""End-to-end checks of the command line driver, run in-process."""

import json
import os

import numpy as np
import pytest

from entrogan import cli, modelfile
from entrogan.rng import SplitMix64


def run_cli(argv):
    return cli.main(argv)


def read_lines(path):
    return open(path).read().splitlines()


def body_rows(path):
    lines = [ln for ln in read_lines(path) if not ln.startswith("#")]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


@pytest.fixture()
def dataset(tmp_path):
    out = str(tmp_path / "data")
    assert run_cli(["gen-data", "--out", out, "--data-dim", "2",
                    "--latent-dim", "2", "--count", "64",
                    "--lambda", "0.1", "--seed", "5"]) == 0
    return out


def train_args(out, data_csv, iters="6"):
    return ["train", "--out", out, "--data", data_csv,
            "--latent-dim", "2", "--gen-hidden", "4", "--disc-hidden", "4",
            "--batch-size", "32", "--critic-steps", "2",
            "--iterations", iters, "--checkpoint-interval", "3",
            "--seed", "9"]


def test_gen_data_writes_commented_csv_and_oracle(dataset):
    lines = read_lines(os.path.join(dataset, "dataset.csv"))
    assert lines[0].startswith("# entrogan ")
    assert "seed=5" in lines[0]
    assert lines[1] == "y0,y1"
    assert len(lines) == 66
    oracle = modelfile.load_oracle(os.path.join(dataset, "oracle.txt"))
    expected_g = SplitMix64(5).normal_matrix(2, 2) / np.sqrt(2.0)
    assert np.array_equal(oracle.g, expected_g)
    assert oracle.lam == 0.1


def test_gen_data_zero_count_writes_header_only(tmp_path):
    out = str(tmp_path)
    assert run_cli(["gen-data", "--out", out, "--data-dim", "3",
                    "--latent-dim", "1", "--count", "0",
                    "--seed", "1"]) == 0
    lines = read_lines(os.path.join(out, "dataset.csv"))
    assert len(lines) == 2
    assert lines[1] == "y0,y1,y2"


def test_out_dir_from_environment(tmp_path, monkeypatch):
    target = tmp_path / "via_env"
    monkeypatch.setenv(cli.OUT_ENV, str(target))
    assert run_cli(["gen-data", "--data-dim", "2", "--latent-dim", "1",
                    "--count", "3", "--seed", "2"]) == 0
    assert (target / "dataset.csv").exists()


def test_train_artifacts(dataset, tmp_path):
    out = str(tmp_path / "run")
    csv = os.path.join(dataset, "dataset.csv")
    assert run_cli(train_args(out, csv)) == 0
    names = sorted(os.listdir(out))
    assert "model.txt" in names
    assert "checkpoint_000000.txt" in names
    assert "checkpoint_000003.txt" in names
    assert "checkpoint_000006.txt" in names
    header, rows = body_rows(os.path.join(out, "train_log.csv"))
    assert header == ["iteration", "objective", "mean_violation",
                      "gen_grad_norm", "disc_grad_norm"]
    assert len(rows) == 6
    for row in rows:
        assert all(np.isfinite(float(x)) for x in row)
    model = modelfile.load_model(os.path.join(out, "model.txt"))
    assert model.iterations == 6


def test_train_rerun_is_byte_identical(dataset, tmp_path):
    csv = os.path.join(dataset, "dataset.csv")
    out1 = str(tmp_path / "a")
    out2 = str(tmp_path / "b")
    assert run_cli(train_args(out1, csv)) == 0
    assert run_cli(train_args(out2, csv)) == 0
    for name in ["model.txt", "train_log.csv", "checkpoint_000006.txt"]:
        a = open(os.path.join(out1, name)).read()
        b = open(os.path.join(out2, name)).read()
        assert a == b, name


def test_train_divergence_names_checkpoint(dataset, tmp_path, capsys):
    out = str(tmp_path / "boom")
    csv = os.path.join(dataset, "dataset.csv")
    argv = train_args(out, csv, iters="50")
    argv += ["--gen-lr", "1e9", "--disc-lr", "1e9"]
    assert run_cli(argv) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "diverged"
    assert "checkpoint" in err["message"]
    assert "iteration" in err["message"]


def test_likelihood_rows_decompose(dataset, tmp_path):
    run = str(tmp_path / "run")
    csv = os.path.join(dataset, "dataset.csv")
    assert run_cli(train_args(run, csv)) == 0
    out = str(tmp_path / "lik")
    assert run_cli(["likelihood", "--out", out, "--model",
                    os.path.join(run, "model.txt"), "--data", csv,
                    "--posterior-samples", "50", "--seed", "3"]) == 0
    header, rows = body_rows(os.path.join(out, "likelihood.csv"))
    assert header == ["total", "cost", "entropy", "prior", "constant",
                      "standard_error"]
    assert len(rows) == 64
    for row in rows:
        total, cost, entropy, prior, constant, se = map(float, row)
        assert abs(cost + entropy + prior + constant - total) < 1e-9
        assert se >= 0.0


def test_likelihood_dimension_mismatch_fails(dataset, tmp_path, capsys):
    run = str(tmp_path / "run")
    csv = os.path.join(dataset, "dataset.csv")
    assert run_cli(train_args(run, csv)) == 0
    other = str(tmp_path / "other")
    assert run_cli(["gen-data", "--out", other, "--data-dim", "3",
                    "--latent-dim", "1", "--count", "4",
                    "--seed", "5"]) == 0
    assert run_cli(["likelihood", "--out", other, "--model",
                    os.path.join(run, "model.txt"),
                    "--data", os.path.join(other, "dataset.csv"),
                    "--posterior-samples", "10", "--seed", "3"]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "dimension"


def test_missing_model_file_fails_cleanly(tmp_path, capsys):
    assert run_cli(["likelihood", "--out", str(tmp_path), "--model",
                    str(tmp_path / "nope.txt"),
                    "--data", str(tmp_path / "nope.csv"),
                    "--seed", "0"]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "invalid"


def test_sinkhorn_check_columns_and_sandwich(tmp_path):
    out = str(tmp_path)
    assert run_cli(["sinkhorn-check", "--out", out, "--count", "6",
                    "--seed", "2"]) == 0
    header, rows = body_rows(os.path.join(out, "sinkhorn_check.csv"))
    assert header == ["instance", "n", "m", "lam", "identical", "wbar",
                      "two_w", "entropy_bound", "sandwich_pass",
                      "max_coupling_error"]
    assert len(rows) == 6
    for row in rows:
        rec = dict(zip(header, row))
        assert rec["sandwich_pass"] == "1"
        assert float(rec["max_coupling_error"]) <= 1e-6
        if rec["identical"] == "1":
            assert abs(float(rec["wbar"])) <= 1e-9


def test_evolution_histograms_and_summary(tmp_path):
    out = str(tmp_path)
    assert run_cli(["evolution", "--out", out, "--data-dim", "2",
                    "--train-size", "64", "--eval-count", "8",
                    "--posterior-samples", "30", "--refine-steps", "5",
                    "--bins", "4", "--batch-size", "32",
                    "--critic-steps", "2", "--iterations", "4",
                    "--checkpoint-interval", "2", "--seed", "3"]) == 0
    for it in (0, 2, 4):
        header, rows = body_rows(
            os.path.join(out, f"evolution_hist_{it:06d}.csv"))
        assert header == ["bin_low", "bin_high", "count"]
        assert sum(int(r[2]) for r in rows) == 8
    header, rows = body_rows(os.path.join(out, "evolution_summary.csv"))
    assert header == ["iteration", "median_surrogate", "mean_surrogate"]
    assert [r[0] for r in rows] == ["0", "2", "4"]


def test_table1_miniature(tmp_path):
    out = str(tmp_path)
    assert run_cli(["table1", "--out", out, "--dims", "2",
                    "--train-size", "64", "--eval-count", "4",
                    "--posterior-samples", "40", "--refine-steps", "5",
                    "--batch-size", "32", "--critic-steps", "2",
                    "--iterations", "6", "--seed", "1"]) == 0
    header, rows = body_rows(os.path.join(out, "table1.csv"))
    assert header == ["dimension", "approximation_gap",
                      "surrogate_log_likelihood"]
    assert len(rows) == 1
    assert rows[0][0] == "2"
    assert np.isfinite(float(rows[0][1]))
    assert np.isfinite(float(rows[0][2]))


def test_table2_miniature(tmp_path):
    out = str(tmp_path)
    assert run_cli(["table2", "--out", out, "--dims", "2",
                    "--train-size", "64", "--eval-count", "4",
                    "--posterior-samples", "40", "--refine-steps", "5",
                    "--batch-size", "32", "--critic-steps", "2",
                    "--iterations", "6", "--seed", "1"]) == 0
    header, rows = body_rows(os.path.join(out, "table2.csv"))
    assert header == ["dimension", "exact_log_likelihood",
                      "surrogate_log_likelihood"]
    assert np.isfinite(float(rows[0][1]))
    assert np.isfinite(float(rows[0][2]))


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as info:
        run_cli(["--version"])
    assert info.value.code == 0
