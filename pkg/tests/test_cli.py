import json
import shutil
import subprocess

import pytest

from ncfl.bench.cli import main
from ncfl.core import save_config
from ncfl.data import load_clip_dir, save_clip_dir, synthetic_clips

from conftest import tiny_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for i, c in enumerate(synthetic_clips(2, 4, 32, seed=3)):
        save_clip_dir(c, root / "clips" / f"clip{i}")
    (root / "manifest.json").write_text(json.dumps({"clips": [
        {"clean": f"clips/clip{i}", "degradation": "awgn", "sigma": 25, "seed": i} for i in range(2)]}))
    save_config(tiny_config(total_iters=3, stage1_iters=2, flow_freeze_iters=1), root / "cfg.json")
    assert main(["train", "--config", str(root / "cfg.json"), "--out", str(root / "run"),
                 "--data", str(root / "manifest.json")]) == 0
    return root


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "checkpoint" / "manifest.json").exists()
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 3
    assert (run / "training.png").exists()


def test_eval_table_matches_json(workspace, capsys):
    out = workspace / "eval"
    code = main(["eval", "--ckpt", str(workspace / "run" / "checkpoint"), "--data", str(workspace / "clips"),
                 "--sigma", "25", "--out", str(out), "--median", "3"])
    assert code == 0
    printed = capsys.readouterr().out.strip().splitlines()
    summary = {s["variant"]: s for s in json.loads((out / "eval.json").read_text())["summary"]}
    assert set(summary) == {"model", "median3x3"}
    for line in printed[1:]:
        name, p, s = line.split()
        assert abs(float(p) - summary[name]["psnr_mean"]) <= 1e-4
        assert abs(float(s) - summary[name]["ssim_mean"]) <= 1e-4
    assert (out / "eval.csv").exists() and (out / "eval.png").exists()


def test_eval_manifest(workspace, capsys):
    assert main(["eval", "--ckpt", str(workspace / "run" / "checkpoint"), "--data", str(workspace / "manifest.json"),
                 "--sigma", "25"]) == 0
    assert "model" in capsys.readouterr().out


def test_denoise_round_trip(workspace):
    out = workspace / "den"
    assert main(["denoise", "--ckpt", str(workspace / "run" / "checkpoint"), "--in", str(workspace / "clips" / "clip0"),
                 "--out", str(out)]) == 0
    assert len(load_clip_dir(out)) == len(load_clip_dir(workspace / "clips" / "clip0"))


def test_qmap(workspace):
    out = workspace / "qmap"
    assert main(["qmap", "--ckpt", str(workspace / "run" / "checkpoint"), "--in", str(workspace / "clips" / "clip1"),
                 "--out", str(out), "--figure"]) == 0
    assert len(list(out.glob("qmap_c*.png"))) == tiny_config().latent_width
    assert len(list(out.glob("*.ncfl"))) == 1 and (out / "overview.pdf").exists()


def test_robustness(workspace, capsys):
    out = workspace / "rob"
    assert main(["robustness", "--ckpt", str(workspace / "run" / "checkpoint"), "--in",
                 str(workspace / "clips" / "clip0"), "--sigma", "25", "--seeds", "3", "--out", str(out)]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["pairwise_c_hat"] >= 0
    assert (out / "robustness.json").exists() and (out / "robustness.csv").exists()


def test_ablate(workspace, capsys):
    out = workspace / "abl"
    assert main(["ablate", "--config", str(workspace / "cfg.json"), "--variants", "full,m_a", "--seeds", "0",
                 "--data", str(workspace / "manifest.json"), "--out", str(out)]) == 0
    assert (out / "ablation.json").exists() and (out / "ablation.png").exists()
    assert main(["ablate", "--config", str(workspace / "cfg.json"), "--variants", " , "]) == 1
    assert main(["ablate", "--config", str(workspace / "cfg.json"), "--variants", "warp9",
                 "--data", str(workspace / "manifest.json")]) == 2


@pytest.mark.parametrize("argv", [[], ["train"], ["frobnicate"], ["eval", "--ckpt", "x", "--data", "y", "--sigma", "z"],
                                  ["denoise", "--ckpt", "a", "--in", "b", "--out", "c", "--bogus"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_runtime_errors(workspace, tmp_path, capsys):
    assert main(["denoise", "--ckpt", str(tmp_path / "missing"), "--in", str(workspace / "clips" / "clip0"),
                 "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({"preset": "desk", "quant_mode": "fixed"}))
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "r")]) == 2
    assert "fixed_step" in capsys.readouterr().err


def test_console_script():
    exe = shutil.which("ncfl")
    if exe is None:
        pytest.skip("package not installed as a console script")
    assert subprocess.run([exe, "--help"], capture_output=True).returncode == 0
    assert subprocess.run([exe, "nope"], capture_output=True).returncode == 1
