import subprocess
import sys

import pytest

from cdpcl.cli import run


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


GEN = ["--size", "32", "--train-count", "8", "--eval-count", "3"]


def test_gen_data_is_deterministic(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path / "a"), "--seed", "7", *GEN]) == 0
    assert run(["gen-data", "--out", str(tmp_path / "b"), "--seed", "7", *GEN]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b and "src_train/manifest.tsv" in a


def test_missing_config_exit_1_without_outputs(tmp_path, capsys):
    assert run(["train", "--config", str(tmp_path / "missing.cfg")]) == 1
    assert list(tmp_path.iterdir()) == []
    assert "missing.cfg" in capsys.readouterr().err


def test_unknown_flag_exit_1(capsys):
    assert run(["gen-data", "--out", "x", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_command_exit_1():
    assert run(["frobnicate"]) == 1


def test_invalid_count_exit_1(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path / "d"), "--train-count", "0"]) == 1
    assert not (tmp_path / "d").exists()


def test_help_lists_commands():
    out = subprocess.run([sys.executable, "-m", "cdpcl", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "train", "eval", "report", "selftest"):
        assert cmd in out.stdout


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["gen-data", "--out", str(root / "data"), "--seed", "1", *GEN]) == 0
    cfg = root / "run.cfg"
    cfg.write_text(f"data_dir = {root / 'data'}\nout_dir = {root / 'runs' / 'x'}\niters = 4\nbatch = 4\n")
    return root, cfg


def test_train_eval_report(pipeline, capsys):
    root, cfg = pipeline
    assert run(["train", "--config", str(cfg), "--set", "contrast_warmup=2", "--set", f"out_dir={root / 'runs' / 'cd'}"]) == 0
    assert (root / "runs" / "cd" / "checkpoint.cdpt").is_file()
    assert "contrast_warmup = 2" in (root / "runs" / "cd" / "config.cfg").read_text()

    assert run(["eval", "--checkpoint", str(root / "runs" / "cd" / "checkpoint.cdpt"),
                "--data", str(root / "data"), "--out", str(root / "runs" / "cd")]) == 0
    out = capsys.readouterr().out
    assert "unseen_a" in out and "mean" in out
    assert (root / "runs" / "cd" / "discrepancy.md").is_file()

    assert run(["train", "--config", str(cfg), "--set", "ablation=baseline",
                "--set", f"out_dir={root / 'runs' / 'base'}"]) == 0
    assert run(["eval", "--checkpoint", str(root / "runs" / "base" / "checkpoint.cdpt"),
                "--data", str(root / "data" / "unseen_b"), "--out", str(root / "runs" / "base")]) == 0

    assert run(["report", "--runs", str(root / "runs"), "--out", str(root / "report")]) == 0
    md = capsys.readouterr().out
    assert "| Baseline |" in md and "| CDPCL |" in md
    assert (root / "report" / "loss_curves.svg").is_file()


def test_train_bad_override(pipeline):
    _, cfg = pipeline
    assert run(["train", "--config", str(cfg), "--set", "iters"]) == 1
    assert run(["train", "--config", str(cfg), "--set", "ablation=nope"]) == 1


def test_eval_missing_checkpoint(pipeline, tmp_path):
    root, _ = pipeline
    assert run(["eval", "--checkpoint", str(tmp_path / "none.cdpt"), "--data", str(root / "data"), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_eval_corrupt_checkpoint_exit_2(pipeline, tmp_path):
    root, _ = pipeline
    bad = tmp_path / "bad.cdpt"
    bad.write_bytes(b"nope")
    assert run(["eval", "--checkpoint", str(bad), "--data", str(root / "data"), "--out", str(tmp_path / "o")]) == 2


def test_selftest_quick(tmp_path, capsys):
    code = run(["selftest", "--workdir", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0, out
    for n in range(1, 10):
        assert f"] {n}." in out
    assert "[FAIL]" not in out
