"""End-to-end run of every CLI subcommand on a miniature corpus."""

import os

import numpy as np
import pytest

from spalm.cli import main


def run(argv):
    assert main(argv) == 0


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    run(
        [
            "gen-synthetic",
            "--out", data,
            "--train-tokens", "6000",
            "--dev-tokens", "1200",
            "--test-tokens", "600",
            "--entity-pool", "32",
            "--entities-per-doc", "3",
            "--cycles-per-doc", "3",
            "--filler-run", "12",
            "--seed", "7",
        ]
    )
    overrides = [
        "--set", "num_layers=2", "--set", "d_model=32", "--set", "num_heads=2",
        "--set", "context_len=16", "--set", "cache_len=16", "--set", "lanes=4",
        "--set", "max_steps=60", "--set", "eval_every=1000000", "--set", "log_every=1000000",
        "--set", "neighbor_k=2", "--set", "dropout=0.1",
        "--set", "precompute_method=exact", "--set", "chunk=256",
    ]
    enc = str(root / "enc")
    run(["pretrain", "--out", enc, "--train", f"{data}/train.txt", "--dev", f"{data}/dev.txt"] + overrides)
    mem = str(root / "mem")
    run(
        ["build-memory", "--out", mem, "--corpus", f"{data}/train.txt",
         "--vocab", f"{enc}/vocab.txt", "--encoder", f"{enc}/encoder.splm"] + overrides
    )
    nn = str(root / "nn")
    run(
        ["precompute-neighbors", "--out", nn, "--store", f"{mem}/store.spkv",
         "--corpus", f"{data}/train.txt", "--vocab", f"{enc}/vocab.txt",
         "--queries-from", "store", "--self-exclude"] + overrides
    )
    devnn = str(root / "devnn")
    run(
        ["precompute-neighbors", "--out", devnn, "--store", f"{mem}/store.spkv",
         "--corpus", f"{data}/dev.txt", "--vocab", f"{enc}/vocab.txt",
         "--queries-from", "encode", "--encoder", f"{enc}/encoder.splm"] + overrides
    )
    sp = str(root / "spalm")
    run(
        ["train", "--out", sp, "--train", f"{data}/train.txt", "--dev", f"{data}/dev.txt",
         "--vocab", f"{enc}/vocab.txt", "--neighbors", f"{nn}/neighbors.spnn",
         "--dev-neighbors", f"{devnn}/neighbors.spnn"] + overrides
    )
    return dict(root=root, data=data, enc=enc, mem=mem, nn=nn, devnn=devnn, sp=sp, overrides=overrides)


def test_artifacts_exist(world):
    for rel in (
        ("enc", "encoder.splm"), ("enc", "vocab.txt"), ("enc", "manifest.txt"), ("enc", "history.txt"),
        ("mem", "store.spkv"), ("nn", "neighbors.spnn"), ("devnn", "neighbors.spnn"), ("sp", "spalm.splm"),
    ):
        assert os.path.exists(os.path.join(world[rel[0]], rel[1])), rel


def test_manifest_contents(world):
    text = open(os.path.join(world["enc"], "manifest.txt")).read()
    assert "command=" in text
    assert "git=" in text
    assert "seed=" in text
    assert "config.num_layers=2" in text
    assert "sha256=" in text


def test_eval_all_modes(world):
    root, enc, sp = world["root"], world["enc"], world["sp"]
    common = ["--split", f"{world['data']}/dev.txt", "--vocab", f"{enc}/vocab.txt"] + world["overrides"]
    out_t = str(root / "ev_t")
    run(["eval", "--out", out_t, "--model", f"{enc}/encoder.splm", "--mode", "transformer"] + common)
    out_xl = str(root / "ev_xl")
    run(["eval", "--out", out_xl, "--model", f"{enc}/encoder.splm", "--mode", "xl"] + common)
    out_knn = str(root / "ev_knn")
    run(
        ["eval", "--out", out_knn, "--model", f"{enc}/encoder.splm", "--mode", "knnlm",
         "--neighbors", f"{world['devnn']}/neighbors.spnn", "--interp-lambda", "0.3"] + common
    )
    out_sp = str(root / "ev_sp")
    run(
        ["eval", "--out", out_sp, "--model", f"{sp}/spalm.splm", "--mode", "spalm",
         "--neighbors", f"{world['devnn']}/neighbors.spnn"] + common
    )
    out_both = str(root / "ev_both")
    run(
        ["eval", "--out", out_both, "--model", f"{sp}/spalm.splm", "--mode", "spalm+knn",
         "--neighbors", f"{world['devnn']}/neighbors.spnn", "--interp-lambda", "0.4"] + common
    )
    for out in (out_t, out_xl, out_knn, out_sp, out_both):
        lines = open(os.path.join(out, "report.txt")).read().splitlines()
        fields = dict(item.split("=", 1) for item in lines[0].split())
        assert fields["metric"] == "tokens"
        names = [dict(i.split("=", 1) for i in l.split())["metric"] for l in lines]
        assert names == ["tokens", "nll_total", "nll_per_token", "perplexity", "bpc"]


def test_eval_report_deterministic(world):
    root, enc = world["root"], world["enc"]
    common = ["--split", f"{world['data']}/dev.txt", "--vocab", f"{enc}/vocab.txt"] + world["overrides"]
    outs = []
    for i in range(2):
        out = str(root / f"det{i}")
        run(["eval", "--out", out, "--model", f"{enc}/encoder.splm", "--mode", "xl"] + common)
        outs.append(open(os.path.join(out, "report.txt"), "rb").read())
    assert outs[0] == outs[1]


def test_tune_lambda_cli(world):
    root, enc = world["root"], world["enc"]
    out = str(root / "lam")
    run(
        ["tune-lambda", "--out", out, "--model", f"{enc}/encoder.splm",
         "--split", f"{world['data']}/dev.txt", "--vocab", f"{enc}/vocab.txt",
         "--neighbors", f"{world['devnn']}/neighbors.spnn"] + world["overrides"]
    )
    lines = open(os.path.join(out, "lambda.txt")).read().splitlines()
    assert lines[0].startswith("metric=lambda_star value=")
    assert len(lines) == 1 + 5  # default grid


def test_analyze_cli(world):
    root, sp, enc = world["root"], world["sp"], world["enc"]
    out = str(root / "ana")
    run(
        ["analyze", "--out", out, "--model", f"{sp}/spalm.splm",
         "--split", f"{world['data']}/dev.txt", "--vocab", f"{enc}/vocab.txt",
         "--neighbors", f"{world['devnn']}/neighbors.spnn", "--z-window", "8"] + world["overrides"]
    )
    text = open(os.path.join(out, "analysis.txt")).read()
    assert "metric=gate_mean" in text
    assert "metric=rank1_match_rate" in text
    z = np.load(os.path.join(out, "z_window.npy"))
    assert z.shape == (8, 32)


def test_sweep_k_cli(world):
    root, enc = world["root"], world["enc"]
    out = str(root / "sweep")
    run(
        ["sweep-k", "--out", out, "--train", f"{world['data']}/train.txt",
         "--dev", f"{world['data']}/dev.txt", "--vocab", f"{enc}/vocab.txt",
         "--neighbors", f"{world['nn']}/neighbors.spnn",
         "--dev-neighbors", f"{world['devnn']}/neighbors.spnn",
         "--ks", "1,2"] + world["overrides"]
    )
    lines = open(os.path.join(out, "sweep.txt")).read().splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("metric=dev_perplexity k=1")


def test_cli_error_paths(world, capsys):
    enc = world["enc"]
    # eval mode needing lambda without lambda -> error exit code
    rc = main(
        ["eval", "--out", str(world["root"] / "err"), "--model", f"{enc}/encoder.splm",
         "--split", f"{world['data']}/dev.txt", "--vocab", f"{enc}/vocab.txt",
         "--mode", "knnlm", "--neighbors", f"{world['devnn']}/neighbors.spnn"] + world["overrides"]
    )
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_config_file_plus_overrides(world, tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("num_layers=2\nd_model=32\nnum_heads=2\n# comment\nlr=0.002\n")
    out = str(tmp_path / "out")
    rc = main(
        ["eval", "--out", out, "--model", f"{world['enc']}/encoder.splm",
         "--split", f"{world['data']}/dev.txt", "--vocab", f"{world['enc']}/vocab.txt",
         "--mode", "transformer", "--config", str(cfg_file), "--set", "eval_cache_len=0"]
    )
    assert rc == 0
    manifest = open(os.path.join(out, "manifest.txt")).read()
    assert "config.lr=0.002" in manifest
    assert "config.eval_cache_len=0" in manifest
