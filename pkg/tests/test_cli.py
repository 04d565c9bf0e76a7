import filecmp
import os
import re
import subprocess
import sys

import numpy as np
import pytest

from permanence.cli import main
from permanence.datastore import read_dataset
from permanence.training import MetricsReport


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "d"
    assert main(["simulate", "--n", "12", "--seed", "7", "--preset", "desk", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def b3_ckpt(data, tmp_path_factory):
    ck = tmp_path_factory.mktemp("ck") / "b3.ckpt"
    assert main(["train", "--model", "b3", "--data", str(data), "--out", str(ck), "--epochs", "2"]) == 0
    return ck


def _trees_equal(a, b) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(_trees_equal(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


class TestSimulate:
    def test_dataset_and_summary(self, data, capsys):
        trials, manifest = read_dataset(data)
        assert len(trials) == 12 and manifest.master_seed == 7

    def test_prints_summary(self, tmp_path, capsys):
        assert main(["simulate", "--n", "10", "--seed", "1", "--out", str(tmp_path / "s")]) == 0
        out = capsys.readouterr().out
        assert "bounce_duration_s: mean" in out and "travel_distance_m: mean" in out

    def test_zero_n_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["simulate", "--n", "0", "--out", str(tmp_path / "x")])
        assert e.value.code == 2
        assert not (tmp_path / "x").exists()

    def test_byte_identical_regeneration(self, tmp_path):
        for name in ("a", "b"):
            assert main(["simulate", "--n", "10", "--seed", "3", "--out", str(tmp_path / name)]) == 0
        assert _trees_equal(tmp_path / "a", tmp_path / "b")

    def test_triangle_and_height(self, tmp_path):
        assert main(["simulate", "--n", "10", "--object", "triangle", "--height", "0.35", "--out", str(tmp_path / "t")]) == 0
        _, m = read_dataset(tmp_path / "t")
        assert m.object_kind == "triangle" and m.release_height == 0.35


class TestTrainEval:
    def test_b1_not_trainable(self, data, tmp_path, capsys):
        with pytest.raises(SystemExit) as e:
            main(["train", "--model", "b1", "--data", str(data), "--out", str(tmp_path / "m.ckpt")])
        assert e.value.code == 2
        assert "no trainable parameters" in capsys.readouterr().err

    def test_curve_written(self, b3_ckpt):
        lines = open(f"{b3_ckpt}.loss.csv").read().splitlines()
        assert lines[0].startswith("epoch,") and len(lines) == 4

    def test_eval_report(self, data, b3_ckpt, tmp_path):
        out = tmp_path / "r.txt"
        assert main(["eval", "--model", "b3", "--data", str(data), "--ckpt", str(b3_ckpt), "--out", str(out)]) == 0
        rep = MetricsReport.read(out)
        assert 0.0 <= rep.success_rate <= 1.0
        assert rep.trials == 2  # test split of 12

    def test_eval_multimodal(self, data, tmp_path):
        ck = tmp_path / "mm.ckpt"
        assert main(["train", "--model", "multimodal", "--data", str(data), "--out", str(ck), "--epochs", "1"]) == 0
        out = tmp_path / "r.txt"
        assert main(["eval", "--model", "multimodal", "--data", str(data), "--ckpt", str(ck), "--out", str(out)]) == 0
        assert 0.0 <= MetricsReport.read(out).success_rate <= 1.0

    def test_eval_b1_needs_no_checkpoint(self, data, capsys):
        assert main(["eval", "--model", "b1", "--data", str(data), "--all"]) == 0
        assert "trials: 12" in capsys.readouterr().out

    def test_missing_checkpoint(self, data, tmp_path, capsys):
        rc = main(["eval", "--model", "b3", "--data", str(data), "--ckpt", str(tmp_path / "nope.ckpt")])
        assert rc == 1
        assert "checkpoint not found" in capsys.readouterr().err

    def test_kind_mismatch(self, data, b3_ckpt, capsys):
        assert main(["eval", "--model", "b4", "--data", str(data), "--ckpt", str(b3_ckpt)]) == 1
        assert "holds a b3_socialgan_lite model" in capsys.readouterr().err

    def test_sample_rate_mismatch(self, b3_ckpt, tmp_path, capsys):
        assert main(["simulate", "--n", "10", "--preset", "paper", "--out", str(tmp_path / "p")]) == 0
        assert main(["eval", "--model", "b3", "--data", str(tmp_path / "p"), "--ckpt", str(b3_ckpt)]) == 1
        assert "48000 Hz" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, capsys):
        assert main(["stats", "--data", str(tmp_path / "none")]) == 1

    def test_finetune(self, data, b3_ckpt, tmp_path):
        out = tmp_path / "ft.txt"
        rc = main(["finetune", "--model", "b3", "--ckpt", str(b3_ckpt), "--data", str(data), "--out", str(out), "--folds", "3"])
        assert rc == 0
        assert "finetuned_mean_displacement_cm_mean" in out.read_text()

    def test_dataset_not_mutated(self, data, b3_ckpt, tmp_path):
        snap = {p: p.read_bytes() for p in data.rglob("*") if p.is_file()}
        main(["eval", "--model", "b3", "--data", str(data), "--ckpt", str(b3_ckpt), "--out", str(tmp_path / "r")])
        assert {p: p.read_bytes() for p in data.rglob("*") if p.is_file()} == snap


class TestPredictPlot:
    def test_predict_svg(self, data, b3_ckpt, tmp_path):
        svg = tmp_path / "p.svg"
        assert main(["predict", "--model", "b3", "--ckpt", str(b3_ckpt), "--data", str(data), "--trial", "3", "--svg", str(svg)]) == 0
        text = svg.read_text()
        assert '<g id="truth">' in text and '<g id="pred-b3_socialgan_lite">' in text

    def test_predict_csv(self, data, tmp_path):
        out = tmp_path / "p.csv"
        assert main(["predict", "--model", "b1", "--data", str(data), "--trial", "0", "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 136

    def test_bad_trial_index(self, data, capsys):
        assert main(["predict", "--model", "b1", "--data", str(data), "--trial", "99"]) == 1

    def test_traj_plot(self, data, b3_ckpt, tmp_path):
        svg = tmp_path / "t.svg"
        rc = main(["plot", "--kind", "traj", "--data", str(data), "--out", str(svg), "--trial", "1",
                   "--model", "b1", "--model", "b3", "--ckpt", str(b3_ckpt)])
        assert rc == 0
        text = svg.read_text()
        for gid in ("observed", "truth", "pred-b1_linear", "pred-b3_socialgan_lite", "legend"):
            assert f'<g id="{gid}">' in text

    @pytest.mark.parametrize("kind", ["hexbin", "hist-duration", "hist-distance"])
    def test_other_plots(self, data, tmp_path, kind):
        svg = tmp_path / f"{kind}.svg"
        assert main(["plot", "--kind", kind, "--data", str(data), "--out", str(svg)]) == 0
        assert svg.read_text().lstrip().startswith("<?xml")

    def test_hist_empty_dataset(self, tmp_path, capsys):
        from permanence.datastore import DatasetManifest, write_dataset

        write_dataset([], DatasetManifest(trial_count=0, sample_rate=8000), tmp_path / "e")
        assert main(["plot", "--kind", "hist-duration", "--data", str(tmp_path / "e"), "--out", str(tmp_path / "h.svg")]) == 1
        assert "empty" in capsys.readouterr().err


def test_console_script_exit_codes(tmp_path):
    exe = [sys.executable, "-m", "permanence.cli"]
    r = subprocess.run(exe + ["simulate", "--n", "-3", "--out", str(tmp_path / "x")], capture_output=True, text=True)
    assert r.returncode == 2 and "usage" in r.stderr
    r = subprocess.run(exe + ["stats", "--data", str(tmp_path / "missing")], capture_output=True, text=True)
    assert r.returncode == 1 and re.search(r"does not exist", r.stderr)


def test_log_env_var(data, tmp_path):
    env = dict(os.environ, PERMANENCE_LOG="INFO")
    r = subprocess.run(
        [sys.executable, "-m", "permanence.cli", "train", "--model", "b3", "--data", str(data),
         "--out", str(tmp_path / "m.ckpt"), "--epochs", "1"],
        capture_output=True, text=True, env=env,
    )
    assert r.returncode == 0
    assert "epoch 1" in r.stderr
