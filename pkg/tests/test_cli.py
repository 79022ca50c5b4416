"""Every subcommand runs end to end on a tiny configuration."""

import csv

import pytest

from ucformer.cli import main

TINY = """
[network]
L = 4
N = 2
K = 3
n_mc = 20
[model]
d_mod = 16
n_heads = 2
[train]
epochs = 1
batch_size = 4
samples_per_K = 4
K_train = 3
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert main(["gen-data", "--config", str(root / "tiny.cfg"), "--out", str(root / "data")]) == 0
    args = ["train", "--config", str(root / "tiny.cfg"), "--out", str(root / "train"), "--data", str(root / "data/dataset.bin")]
    assert main(args) == 0
    return root


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_gen_data(trained):
    assert len(rows(trained / "data/manifest.csv")) == 4
    meta = (trained / "data/run_metadata.txt").read_text()
    assert "command = gen-data" in meta and "config_sha256 = " in meta


def test_train_outputs(trained):
    assert len(rows(trained / "train/metrics.csv")) == 1
    assert (trained / "train/checkpoint.npz").exists()


@pytest.mark.parametrize(
    "command,files",
    [
        ("eval-se", ["se.csv"]),
        ("eval-connections", ["connections.csv"]),
        ("eval-cdf", ["power_cdf.csv", "ks.csv"]),
        ("eval-robustness", ["robustness.csv"]),
        ("bench-flops", ["flops.csv", "latency.csv"]),
    ],
)
def test_eval_commands(trained, command, files):
    out = trained / command
    args = [command, "--config", str(trained / "tiny.cfg"), "--out", str(out), "--checkpoint", str(trained / "train/checkpoint.npz")]
    args += ["--K", "2,3", "--n-test", "2", "--Q", "2"]
    assert main(args) == 0
    for f in files:
        assert rows(out / f), f
    assert f"command = {command}" in (out / "run_metadata.txt").read_text()
    assert (out / "config.txt").exists()


def test_eval_is_deterministic(trained):
    outs = []
    for rep in range(2):
        out = trained / f"det{rep}"
        args = ["eval-se", "--config", str(trained / "tiny.cfg"), "--out", str(out), "--checkpoint", str(trained / "train/checkpoint.npz")]
        main(args + ["--K", "2", "--n-test", "2", "--Q", "2"])
        outs.append((out / "se.csv").read_bytes())
    assert outs[0] == outs[1]


def test_bench_attn_oracle(tmp_path):
    assert main(["bench-attn-oracle", "--out", str(tmp_path), "--n-test", "10"]) == 0
    assert max(float(r["rel_err"]) for r in rows(tmp_path / "attn_oracle.csv")) < 1e-10


def test_missing_checkpoint(tmp_path):
    with pytest.raises(SystemExit, match="checkpoint"):
        main(["eval-se", "--out", str(tmp_path)])


def test_unknown_profile(tmp_path):
    with pytest.raises(SystemExit):
        main(["train", "--profile", "huge", "--out", str(tmp_path)])
