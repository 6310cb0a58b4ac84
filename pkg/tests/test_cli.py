import csv
import shutil
import subprocess
import sys

import pytest
import yaml

from metal.cli import DIFF_COLUMNS, main

BASE = {
    "seed": 3,
    "family": {"kind": "goal-velocity-1d"},
    "hyper": {"n_tasks": 2, "n_warmup": 2, "n_collect": 60, "n_inner": 2, "n_model": 3,
              "n_policy": 1, "n_trpo": 40, "horizon": 20, "model_hidden": [16, 16],
              "policy_hidden": [8, 8], "n_test": 2, "n_eval": 3, "n_boot": 50,
              "adapt_n_slbo": 2},
    "maml": {"meta_iters": 2, "meta_batch": 2, "rollouts": 3},
    "active": {"warm_start": 1, "eval_at": [1], "n_rollouts": 2},
}


def write_cfg(path, **sections):
    cfg = yaml.safe_load(yaml.safe_dump(BASE))
    for k, v in sections.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def train_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    cfg = write_cfg(root / "train.yaml")
    assert main(["train", "--config", cfg, "--out", str(root / "run")]) == 0
    return root / "run"


class TestTrain:
    def test_outputs(self, train_run):
        for name in ("config.yaml", "model.bin", "dataset.bin", "state.json", "metrics.csv"):
            assert (train_run / name).exists()
        assert not (train_run / "FAILED").exists()
        frozen = yaml.safe_load((train_run / "config.yaml").read_text())
        assert frozen["hyper"]["n_collect"] == 60 and frozen["seed"] == 3

    def test_rerun_is_byte_identical(self, train_run, tmp_path):
        cfg = write_cfg(tmp_path / "train.yaml")
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
        for name in ("model.bin", "dataset.bin", "models/model_0002.bin"):
            assert (tmp_path / "run" / name).read_bytes() == (train_run / name).read_bytes()
        strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_clock"} for r in rs]
        assert strip(rows(tmp_path / "run" / "metrics.csv")) == \
            strip(rows(train_run / "metrics.csv"))

    def test_resume_after_completion_is_noop(self, train_run, tmp_path):
        copy = tmp_path / "run"
        shutil.copytree(train_run, copy)
        before = (copy / "model.bin").read_bytes()
        cfg = write_cfg(tmp_path / "train.yaml")
        assert main(["train", "--config", cfg, "--out", str(copy), "--resume"]) == 0
        assert (copy / "model.bin").read_bytes() == before

    def test_resume_extends_run(self, train_run, tmp_path):
        part = write_cfg(tmp_path / "a.yaml", hyper={"n_tasks": 1})
        assert main(["train", "--config", part, "--out", str(tmp_path / "run")]) == 0
        full = write_cfg(tmp_path / "b.yaml")
        assert main(["train", "--config", full, "--out", str(tmp_path / "run"), "--resume"]) == 0
        assert (tmp_path / "run" / "model.bin").read_bytes() == \
            (train_run / "model.bin").read_bytes()

    def test_corrupt_checkpoint_refused(self, train_run, tmp_path):
        copy = tmp_path / "run"
        shutil.copytree(train_run, copy)
        raw = bytearray((copy / "model.bin").read_bytes())
        raw[:8] = b"XXXXXXXX"
        (copy / "model.bin").write_bytes(bytes(raw))
        cfg = write_cfg(tmp_path / "train.yaml", hyper={"n_tasks": 3})
        assert main(["train", "--config", cfg, "--out", str(copy), "--resume"]) == 1
        assert "magic" in (copy / "FAILED").read_text()


class TestAdapt:
    def test_curves(self, train_run, tmp_path):
        cfg = write_cfg(tmp_path / "a.yaml", adapt={"run_dir": str(train_run)})
        assert main(["adapt", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
        curve = rows(tmp_path / "out" / "curves.csv")
        assert len(curve) == 2 * (BASE["hyper"]["adapt_n_slbo"] + 1)
        assert sorted({int(r["samples"]) for r in curve}) == [0, 60, 120]
        assert {r["method"] for r in rows(tmp_path / "out" / "suite.csv")} == {"ours"}

    def test_at_intermediate_boundary(self, train_run, tmp_path):
        cfg = write_cfg(tmp_path / "a.yaml", adapt={"run_dir": str(train_run), "task": 1})
        assert main(["adapt", "--config", cfg, "--out", str(tmp_path / "out")]) == 0

    def test_missing_run_dir(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "a.yaml")
        assert main(["adapt", "--config", cfg, "--out", str(tmp_path / "out")]) == 2
        assert "run_dir" in capsys.readouterr().err


class TestBaseline:
    @pytest.mark.parametrize("method", ["scratch", "maml", "oracle"])
    def test_methods_share_axis(self, method, tmp_path):
        cfg = write_cfg(tmp_path / "b.yaml", baseline={"method": method})
        assert main(["baseline", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
        curve = rows(tmp_path / "out" / "curves.csv")
        assert {r["method"] for r in curve} == {method}
        assert sorted({int(r["samples"]) for r in curve}) == [0, 60, 120]


class TestActive:
    def test_difference_csv(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.yaml")
        assert main(["active", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
        diff = rows(tmp_path / "out" / "difference.csv")
        assert tuple(diff[0].keys()) == DIFF_COLUMNS
        assert sorted({int(r["trained_tasks"]) for r in diff}) == [1, 2]
        out = capsys.readouterr().out
        assert "direction" in out

    def test_estimated_needs_snapshots(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.yaml", hyper={"n_inner": 1})
        assert main(["active", "--config", cfg, "--out", str(tmp_path / "out")]) == 2
        assert "snapshots" in capsys.readouterr().err


class TestConfigErrors:
    def test_unknown_key_reports_line(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("seed: 1\nhyper:\n  n_tasks: 2\n  bogus: 3\n")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert "bad.yaml:4" in err and "bogus" in err
        assert not (tmp_path / "o").exists()

    def test_invalid_value(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("seed: 1\nhyper:\n  n_collect: -5\n")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        assert "bad.yaml:3" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.yaml"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_resume_only_for_train(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.yaml")
        assert main(["baseline", "--config", cfg, "--out", str(tmp_path / "o"), "--resume"]) == 2


def test_console_entry_point(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", hyper={"n_tasks": 1})
    proc = subprocess.run([sys.executable, "-m", "metal.cli", "train", "--config", cfg,
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert '"trained": 1' in proc.stdout
