import csv
import subprocess
import sys

import pytest

from oaknee import cli

SUBCOMMANDS = ("synth", "preprocess", "describe", "texture", "train", "eval", "importance",
               "noise-sweep", "gradcheck")


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A 60-knee cohort with describe/texture/roi files for both manifests."""
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", d, "--n", 60, "--seed", 5) == 0
    for m in ("manifest_train.csv", "manifest_test.csv"):
        assert run("describe", "--manifest", d / m, "--out", d / "feat") == 0
        assert run("texture", "--manifest", d / m, "--out", d / "feat", "--features", "lbp,fd,roi") == 0
    return d


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main([cmd, "--help"])
    assert info.value.code == 0
    assert "usage: oaknee " + cmd in capsys.readouterr().out


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "oaknee.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gradcheck" in r.stdout


def test_usage_errors(tmp_path):
    assert run() == cli.EXIT_USAGE
    assert run("frobnicate") == cli.EXIT_USAGE
    assert run("describe", "--out", tmp_path) == cli.EXIT_USAGE
    assert run("train", "--manifest", "m.csv", "--out", tmp_path, "--model", "svm") == cli.EXIT_USAGE
    assert run("train", "--manifest", "m.csv", "--out", tmp_path, "--model", "cnn", "--epochs", 0) == cli.EXIT_USAGE
    assert run("noise-sweep", "--manifest", "m.csv", "--test-manifest", "t.csv", "--out", tmp_path,
               "--model", "cnn") == cli.EXIT_USAGE


def test_missing_checkpoint_names_path(workdir, tmp_path, capsys):
    missing = tmp_path / "nothing_here.ckpt"
    code = run("eval", "--manifest", workdir / "manifest_test.csv", "--inputs", workdir / "feat",
               "--checkpoint", missing, "--out", tmp_path)
    assert code == cli.EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_missing_manifest(tmp_path, capsys):
    assert run("describe", "--manifest", tmp_path / "none.csv", "--out", tmp_path) == cli.EXIT_DATA
    assert "none.csv" in capsys.readouterr().err


def test_corrupt_checkpoint(workdir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"OAKN" + b"\0" * 60)
    code = run("eval", "--manifest", workdir / "manifest_test.csv", "--inputs", workdir / "feat",
               "--checkpoint", bad, "--out", tmp_path)
    assert code == cli.EXIT_DATA


def test_feature_files(workdir):
    feat = workdir / "feat"
    with open(feat / "manifest_test_describe.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:3] == ["knee_id", "label", "js2_0"]
    assert header[-3:] == ["min_jsw", "med_fjsw", "lat_fjsw"]
    assert len(header) == 2 + 221 + 3
    with open(feat / "manifest_test_roi.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["knee_id", "label", "patch_path"]
    assert all((feat / r[2]).is_file() for r in rows[1:])


def test_train_eval_lr(workdir, tmp_path, capsys):
    feat = workdir / "feat"
    for tag in ("js2", "jsw", "minjsw", "lbp+fd"):
        assert run("train", "--manifest", workdir / "manifest_train.csv", "--inputs", feat,
                   "--out", tmp_path, "--model", "lr", "--features", tag) == 0
        ckpt = tmp_path / f"lr_{tag.replace('+', '-')}.ckpt"
        assert run("eval", "--manifest", workdir / "manifest_test.csv", "--inputs", feat,
                   "--checkpoint", ckpt, "--out", tmp_path / tag) == 0
        assert (tmp_path / tag / "roc_curve.csv").is_file()
        assert (tmp_path / tag / "roc_curve.svg").read_text().lstrip().startswith("<?xml")
    assert "AUC: " in capsys.readouterr().out


@pytest.mark.parametrize("arch", ["js2-nn", "cnn", "combined"])
def test_train_eval_networks(workdir, tmp_path, arch):
    feat = workdir / "feat"
    assert run("train", "--manifest", workdir / "manifest_train.csv", "--inputs", feat, "--out", tmp_path,
               "--model", arch, "--epochs", 2, "--batch", 8, "--val-fraction", 0.3) == 0
    with open(tmp_path / f"{arch}_history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "lr", "train_loss", "val_auc"] and len(rows) == 3
    assert (tmp_path / f"{arch}_history.svg").is_file()
    assert run("eval", "--manifest", workdir / "manifest_test.csv", "--inputs", feat,
               "--checkpoint", tmp_path / f"{arch}.ckpt", "--out", tmp_path) == 0


def test_importance(workdir, tmp_path):
    assert run("importance", "--manifest", workdir / "manifest_train.csv", "--inputs", workdir / "feat",
               "--out", tmp_path, "--trees", 10) == 0
    with open(tmp_path / "importance.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 221
    assert abs(sum(float(r["importance"]) for r in rows) - 1.0) < 1e-9
    for name in ("importance.svg", "density.csv", "density.svg"):
        assert (tmp_path / name).is_file()
    assert run("importance", "--manifest", workdir / "manifest_train.csv", "--inputs", workdir / "feat",
               "--out", tmp_path, "--density-feature", "js2_999") == cli.EXIT_USAGE


def test_noise_sweep(workdir, tmp_path):
    assert run("noise-sweep", "--manifest", workdir / "manifest_train.csv",
               "--test-manifest", workdir / "manifest_test.csv", "--inputs", workdir / "feat",
               "--out", tmp_path, "--sigmas", "0,3", "--model", "lr,js2-nn", "--epochs", 2,
               "--batch", 8, "--val-fraction", 0.3) == 0
    with open(tmp_path / "noise_sweep.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 2 * 2
    assert (tmp_path / "noise_sweep.svg").is_file()
    assert run("noise-sweep", "--manifest", workdir / "manifest_train.csv",
               "--test-manifest", workdir / "manifest_test.csv", "--inputs", workdir / "feat",
               "--out", tmp_path, "--sigmas", "0,-1") != 0


def test_preprocess(workdir, tmp_path):
    assert run("preprocess", "--manifest", workdir / "manifest_test.csv", "--out", tmp_path) == 0
    assert (tmp_path / "manifest_test.csv").is_file()
    # preprocessed 8-bit rasters feed the same pipeline
    assert run("texture", "--manifest", tmp_path / "manifest_test.csv", "--out", tmp_path / "f") == 0


def test_gradcheck_exit_zero(capsys):
    assert run("gradcheck", "--seeds", 2) == 0
    out = capsys.readouterr().out
    assert "tiny_cnn" in out and "FAIL" not in out
