import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from segcn import cli
from segcn.data import read_rgb
from segcn.errors import NumericalError

TINY = {
    "data": {"n_images": 8, "size": 32, "seed": 3},
    "model": {"generator_widths": [4, 8, 8, 8], "discriminator_widths": [4, 8],
              "semantic_widths": [2, 4, 4, 4], "guidance_channels": 4},
    "training": {"patch_size": 32, "batch_size": 2, "epochs": 1, "pretrain_epochs": 1},
}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_config(base / "cfg.json", TINY)
    assert cli.main(["synth-data", "--config", cfg, "--out", str(base / "data")]) == 0
    assert cli.main(["train", "--config", cfg, "--data", str(base / "data"), "--out", str(base / "run")]) == 0
    return base


def test_synth_data_deterministic(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", TINY)
    assert cli.main(["synth-data", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["synth-data", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert len(a) == 32 and a == b
    assert "domain_a/images/0000.png" in a and "domain_b/masks/0007.png" in a


def test_missing_out_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["synth-data"])
    assert exc.value.code == 2


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    doc = {**TINY, "training": {**TINY["training"], "warmup": 5}}
    cfg = write_config(tmp_path / "cfg.json", doc)
    assert cli.main(["train", "--config", cfg, "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert "warmup" in capsys.readouterr().err
    bad = write_config(tmp_path / "bad.json", {"extra": {}})
    assert cli.main(["synth-data", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    wrong_type = write_config(tmp_path / "t.json", {"data": {"n_images": "many"}})
    assert cli.main(["synth-data", "--config", wrong_type, "--out", str(tmp_path / "y")]) == 2


def test_run_config_roundtrip():
    cfg = cli.RunConfig.from_dict(TINY)
    again = cli.RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.training == cfg.training and again.pretrain == cfg.pretrain
    assert np.allclose(again.data.stain_basis_b.matrix, cfg.data.stain_basis_b.matrix)


def test_train_outputs(trained):
    run = trained / "run"
    assert (run / "checkpoint" / "manifest.json").exists()
    lines = (run / "losses.csv").read_text().splitlines()
    assert lines[0].startswith("step,l_cycle_l1_forward")
    assert [int(line.split(",")[0]) for line in lines[1:]] == [1, 2, 3, 4]


def test_train_resume_continues_step_counter(trained, tmp_path):
    doc = {**TINY, "training": {**TINY["training"], "epochs": 2}}
    cfg = write_config(tmp_path / "cfg2.json", doc)
    run = tmp_path / "run"
    import shutil
    shutil.copytree(trained / "run", run)
    code = cli.main(["train", "--config", cfg, "--data", str(trained / "data"), "--out", str(run),
                     "--resume", str(run / "checkpoint")])
    assert code == 0
    steps = [int(line.split(",")[0]) for line in (run / "losses.csv").read_text().splitlines()[1:]]
    assert steps == list(range(1, 9))


def test_train_numerical_failure_exit_1(trained, tmp_path, monkeypatch, capsys):
    def boom(*args, **kwargs):
        raise NumericalError("l_seg1", 3)

    monkeypatch.setattr(cli, "fit", boom)
    cfg = write_config(tmp_path / "cfg.json", TINY)
    code = cli.main(["train", "--config", cfg, "--data", str(trained / "data"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "l_seg1" in capsys.readouterr().err


def test_normalize_reinhard_self_target(trained, tmp_path):
    images = trained / "data" / "domain_a" / "images"
    target = images / "0002.png"
    out = tmp_path / "out"
    assert cli.main(["normalize", "--method", "reinhard", "--input", str(images),
                     "--output", str(out), "--target", str(target)]) == 0
    assert len(list(out.glob("*.png"))) == len(list(images.glob("*.png")))
    diff = np.abs(read_rgb(out / "0002.png").astype(int) - read_rgb(target))
    assert diff.max() <= 2


def test_normalize_macenko_and_models(trained, tmp_path):
    images = trained / "data" / "domain_a" / "images"
    target = trained / "data" / "domain_b" / "images" / "0000.png"
    assert cli.main(["normalize", "--method", "macenko", "--input", str(images),
                     "--output", str(tmp_path / "m"), "--target", str(target)]) == 0
    ck = trained / "run" / "checkpoint"
    assert cli.main(["normalize", "--method", "segcn", "--input", str(images),
                     "--output", str(tmp_path / "s"), "--checkpoint", str(ck)]) == 0
    first = read_rgb(tmp_path / "s" / "0000.png")
    assert first.shape == (32, 32, 3)
    # the guided checkpoint is not a plain CycleGAN
    assert cli.main(["normalize", "--method", "cyclegan", "--input", str(images),
                     "--output", str(tmp_path / "c"), "--checkpoint", str(ck)]) == 2


def test_normalize_usage_errors(trained, tmp_path):
    images = str(trained / "data" / "domain_a" / "images")
    out = str(tmp_path / "o")
    assert cli.main(["normalize", "--method", "segcn", "--input", images, "--output", out]) == 2
    assert cli.main(["normalize", "--method", "reinhard", "--input", images, "--output", out]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["normalize", "--method", "vahadane", "--input", images, "--output", out])
    assert exc.value.code == 2


def test_evaluate_identity(trained, tmp_path):
    images = trained / "data" / "domain_a" / "images"
    report = tmp_path / "rep" / "report.json"
    assert cli.main(["evaluate", "--original", str(images), "--normalized", str(images),
                     "--masks", str(trained / "data" / "domain_a" / "masks"),
                     "--checkpoint", str(trained / "run" / "checkpoint"),
                     "--report", str(report)]) == 0
    doc = json.loads(report.read_text())
    assert set(doc["aggregates"]) == {"nmi", "cwssim", "ssim", "dice"}
    assert abs(doc["aggregates"]["cwssim"]["mean"] - 1) < 1e-6
    assert abs(doc["aggregates"]["ssim"]["mean"] - 1) < 1e-6
    assert report.with_suffix(".csv").exists()


def test_evaluate_identical_set_nmi_sd_zero(trained, tmp_path):
    src = trained / "data" / "domain_a" / "images" / "0001.png"
    same = tmp_path / "same"
    same.mkdir()
    for i in range(4):
        (same / f"{i}.png").write_bytes(src.read_bytes())
    assert cli.main(["evaluate", "--original", str(same), "--normalized", str(same),
                     "--report", str(tmp_path / "r.json")]) == 0
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["aggregates"]["nmi"]["sd"] == 0.0
    assert doc["aggregates"]["nmi"]["cv"] == 0.0


def test_evaluate_masks_need_checkpoint(trained, tmp_path):
    images = str(trained / "data" / "domain_a" / "images")
    assert cli.main(["evaluate", "--original", images, "--normalized", images, "--masks", images,
                     "--report", str(tmp_path / "r.json")]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "segcn", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "synth-data" in res.stdout and "evaluate" in res.stdout
