"""CLI dispatch: exit codes, reproducibility, artifact layout."""

import hashlib
import json

import numpy as np
import pytest

from rcan3d.cli import dispatch, resolve_config, write_pgm
from rcan3d.niftiio import read_nifti

TINY_MODEL = [
    "--set", "model.levels=2",
    "--set", "model.base_width=8",
    "--set", "model.norm_groups=4",
]
TINY_TRAIN = [
    "--set", "train.epochs=1",
    "--set", "train.steps_per_epoch=2",
    "--set", "augment.patch=[16,16,16]",
]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_unknown_command_exits_one(capsys):
    assert dispatch(["definitely-not-a-command"]) == 1


def test_missing_required_flag_exits_one(capsys):
    assert dispatch(["train"]) == 1


def test_unknown_override_rejected(tmp_path, capsys):
    assert dispatch(["synth", "--out", str(tmp_path / "d"), "--cases", "1"]) == 0
    code = dispatch(
        ["train", "--manifest", str(tmp_path / "d" / "manifest.json"),
         "--out", str(tmp_path / "r"), "--set", "model.bogus=1"]
    )
    assert code == 1


def test_runtime_failure_exits_two(tmp_path, capsys):
    code = dispatch(["eval", "--manifest", str(tmp_path / "missing.json"),
                     "--checkpoint", "x", "--out", str(tmp_path / "o")])
    assert code == 2


def test_synth_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert dispatch(["synth", "--out", str(tmp_path / name),
                         "--cases", "2", "--extent", "16", "--seed", "7"]) == 0
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (
        tmp_path / "b" / "manifest.json"
    ).read_bytes()
    for rel in ("synth_0007/t1.nii", "synth_0007/seg.nii", "synth_0008/flair.nii"):
        assert sha(tmp_path / "a" / rel) == sha(tmp_path / "b" / rel)


def test_print_config_resolves_overrides(capsys):
    code = dispatch(["train", "--manifest", "unused", "--out", "unused",
                     "--print-config", "--set", "model.base_width=8",
                     "--set", "train.lr0=0.001"])
    assert code == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["model"]["base_width"] == 8
    assert cfg["train"]["lr0"] == 0.001
    assert cfg["augment"]["patch"] == [32, 32, 32]


def test_resolve_config_file_and_overrides(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"model": {"levels": 2}, "train": {"epochs": 3}}))
    cfg = resolve_config(cfg_file, ["train.epochs=5"])
    assert cfg["model"]["levels"] == 2
    assert cfg["train"]["epochs"] == 5


def test_train_eval_roundtrip(tmp_path, capsys):
    data = tmp_path / "data"
    assert dispatch(["synth", "--out", str(data), "--cases", "2",
                     "--extent", "16", "--seed", "1"]) == 0
    run = tmp_path / "run"
    manifest = str(data / "manifest.json")
    assert dispatch(["train", "--manifest", manifest, "--out", str(run)]
                    + TINY_MODEL + TINY_TRAIN) == 0
    assert (run / "checkpoint.rcan").exists()
    assert (run / "config.json").exists()
    history = (run / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,step,loss,lr"
    assert len(history) == 3

    out = tmp_path / "eval"
    assert dispatch(["eval", "--manifest", manifest,
                     "--checkpoint", str(run / "checkpoint.rcan"),
                     "--out", str(out)] + TINY_MODEL) == 0
    text = (out / "metrics.csv").read_text()
    assert text.startswith("case_id,region,dice")
    assert "aggregate" in text


def test_train_deterministic_across_runs(tmp_path, capsys):
    data = tmp_path / "data"
    dispatch(["synth", "--out", str(data), "--cases", "1", "--extent", "16", "--seed", "2"])
    manifest = str(data / "manifest.json")
    digests = []
    for name in ("r1", "r2"):
        run = tmp_path / name
        assert dispatch(["train", "--manifest", manifest, "--out", str(run)]
                        + TINY_MODEL + TINY_TRAIN) == 0
        digests.append(sha(run / "checkpoint.rcan"))
    assert digests[0] == digests[1]


def test_infer_writes_labelmap(tmp_path, capsys):
    data = tmp_path / "data"
    dispatch(["synth", "--out", str(data), "--cases", "1", "--extent", "16", "--seed", "4"])
    run = tmp_path / "run"
    manifest = str(data / "manifest.json")
    dispatch(["train", "--manifest", manifest, "--out", str(run)] + TINY_MODEL + TINY_TRAIN)
    case = data / "synth_0004"
    out = tmp_path / "pred.nii"
    code = dispatch(["infer", "--checkpoint", str(run / "checkpoint.rcan"),
                     "--t1", str(case / "t1.nii"), "--t1ce", str(case / "t1ce.nii"),
                     "--t2", str(case / "t2.nii"), "--flair", str(case / "flair.nii"),
                     "--out", str(out)] + TINY_MODEL)
    assert code == 0
    grid, spacing = read_nifti(out)
    assert grid.shape == (16, 16, 16)
    assert set(np.unique(grid)) <= {0, 1, 2, 4}


def test_export_slices_layout(tmp_path, capsys):
    data = tmp_path / "data"
    dispatch(["synth", "--out", str(data), "--cases", "1", "--extent", "16", "--seed", "5"])
    out = tmp_path / "slices"
    code = dispatch(["export-slices", "--manifest", str(data / "manifest.json"),
                     "--case-id", "synth_0005", "--out", str(out)])
    assert code == 0
    files = sorted(p.name for p in (out / "synth_0005").iterdir())
    assert files == ["z008_flair.pgm", "z008_gt.pgm", "z008_t1.pgm",
                     "z008_t1ce.pgm", "z008_t2.pgm"]
    blob = (out / "synth_0005" / "z008_gt.pgm").read_bytes()
    assert blob.startswith(b"P5\n16 16\n255\n")
    assert len(blob) == len(b"P5\n16 16\n255\n") + 256


def test_write_pgm_shape_gate(tmp_path):
    from rcan3d.errors import ConfigInvalid

    with pytest.raises(ConfigInvalid):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))


def test_gradcheck_command(capsys):
    assert dispatch(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "conv3d" in out and "model[input]" in out


def test_ablate_four_configs(tmp_path, capsys):
    data = tmp_path / "data"
    dispatch(["synth", "--out", str(data), "--cases", "2", "--extent", "16", "--seed", "6"])
    out = tmp_path / "ablate"
    code = dispatch(["ablate", "--manifest", str(data / "manifest.json"),
                     "--out", str(out)] + TINY_MODEL + TINY_TRAIN)
    assert code == 0
    names = {"full", "no_max_pool", "no_avg_pool", "no_residual"}
    digests = set()
    for name in names:
        run = out / name
        assert (run / "metrics.csv").exists()
        summary = (run / "dice_summary.csv").read_text().splitlines()
        assert summary[0] == "case_id,mean_dice,et_dice,wt_dice,tc_dice"
        digests.add(sha(run / "checkpoint.rcan"))
    assert len(digests) == 4, "ablation toggles must change the computation"
    top = (out / "ablation_summary.csv").read_text().splitlines()
    assert top[0] == "config,mean_dice,et_dice,wt_dice,tc_dice"
    assert len(top) == 5
