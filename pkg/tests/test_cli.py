import json

import numpy as np
import pytest

from mct import checkpoint
from mct.cli import main
from mct.data import GroundTruth, load_gt, save_gt
from mct.datasets import reference_gt
from mct.metrics import read_ppm

TOY = {
    "mce": {"patch": 9, "groups": 2, "ks": 3, "ss": 1, "c1": 4, "c2": 4, "d_model": 16},
    "encoder": {"depth": 1, "heads": 2, "dropout": 0.1},
    "train": {"epochs": 4, "batch": 16},
    "pretrain": {"epochs": 1, "batch": 16, "batches_per_epoch": 4},
    "per_class": 5,
    "eval_batch": 128,
}


@pytest.fixture
def scene(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "data"), "--height", "20", "--width", "20",
                 "--bands", "12", "--classes", "3", "--seed", "1"]) == 0
    return tmp_path / "data"


def write_config(path, scene, **extra):
    cfg = {**TOY, "cube": str(scene / "scene.hsic"), "gt": str(scene / "scene.hsig"), **extra}
    path.write_text(json.dumps(cfg))
    return str(path)


def run_json(capsys, argv):
    assert main(argv) == 0
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_split_on_reference_salinas(tmp_path, capsys):
    save_gt(reference_gt("salinas"), tmp_path / "salinas.hsig")
    out = run_json(capsys, ["split", str(tmp_path / "salinas.hsig"), "--per-class", "5", "--seed", "0",
                            "-o", str(tmp_path / "s.json")])
    assert out["train"] == 80
    assert len(json.loads((tmp_path / "s.json").read_text())["train"]) == 80


def test_convert_command(tmp_path, capsys):
    labels = np.array([[0, 1], [2, 1]], dtype="<u2")
    labels.tofile(tmp_path / "g.bin")
    (tmp_path / "g.json").write_text(json.dumps({"kind": "gt", "height": 2, "width": 2, "dtype": "<u2",
                                                 "classes": 2}))
    out = run_json(capsys, ["convert", str(tmp_path / "g.bin"), str(tmp_path / "g.json"), str(tmp_path / "g.hsig")])
    assert out["kind"] == "gt"
    np.testing.assert_array_equal(load_gt(tmp_path / "g.hsig").labels, labels)


def test_pretrain_train_eval_map(tmp_path, scene, capsys):
    cfg = write_config(tmp_path / "cfg.json", scene)
    pre = run_json(capsys, ["pretrain", "--config", cfg, "--seed", "3", "--deterministic", "--out",
                            str(tmp_path / "pre")])
    ckpt = tmp_path / "pre" / "pretrain.mctw"
    _, meta, _ = checkpoint.load(ckpt)
    assert meta["phase"] == "pretrain" and pre["sha256"] == checkpoint.file_hash(ckpt)
    assert (tmp_path / "pre" / "pretrain_log.csv").read_text().startswith("step,")

    run_json(capsys, ["train", "--config", cfg, "--seed", "3", "--deterministic", "--out", str(tmp_path / "ft"),
                      "--transfer", "full", "--pretrained", str(ckpt)])
    run_dir = tmp_path / "ft"
    for name in ("config.json", "VERSION", "seeds.json", "split.json", "model.mctw", "manifest.json",
                 "train_log.csv", "metrics.json", "metrics.csv"):
        assert (run_dir / name).exists(), name
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["source_sha256"] == pre["sha256"]
    assert json.loads((run_dir / "seeds.json").read_text()) == {"train": 3}

    # the stored artifacts regenerate the published metrics
    ev = run_json(capsys, ["eval", "--config", str(run_dir / "config.json"), "--model", str(run_dir / "model.mctw"),
                           "--split", str(run_dir / "split.json"), "--out", str(tmp_path / "ev")])
    published = json.loads((run_dir / "metrics.json").read_text())
    assert ev["oa"] == published["oa"] and ev["kappa"] == published["kappa"]

    for mode in ("labeled", "full"):
        out = run_json(capsys, ["map", "--config", cfg, "--model", str(run_dir / "model.mctw"), "--map-mode", mode,
                                "-o", str(tmp_path / f"{mode}.ppm")])
        img = read_ppm(out["written"])
        assert img.shape == (20, 20, 3)
    labeled = read_ppm(tmp_path / "labeled.ppm")
    gt = load_gt(scene / "scene.hsig")
    assert (labeled[gt.labels == 0] == 0).all()


@pytest.mark.filterwarnings("ignore:degenerate label distribution")
def test_eval_perfect_checkpoint(tmp_path, scene, capsys):
    """A checkpoint whose head always answers class 1, on a scene labeled only with class 1."""
    gt = load_gt(scene / "scene.hsig")
    save_gt(GroundTruth(np.where(gt.labels > 0, 1, 0).astype(np.uint16), gt.class_names), tmp_path / "ones.hsig")
    cfg = write_config(tmp_path / "cfg.json", scene, gt=str(tmp_path / "ones.hsig"))
    run_json(capsys, ["train", "--config", cfg, "--out", str(tmp_path / "run")])
    tensors, meta, _ = checkpoint.load(tmp_path / "run" / "model.mctw")
    tensors["head.mlp.fc3.weight"][:] = 0.0
    tensors["head.mlp.fc3.bias"][:] = [50.0, -50.0, -50.0]
    checkpoint.save(tmp_path / "perfect.mctw", tensors, meta)
    ev = run_json(capsys, ["eval", "--config", cfg, "--model", str(tmp_path / "perfect.mctw"),
                           "--out", str(tmp_path / "ev")])
    assert ev["oa"] == 1.0


def test_train_twice_identical_metrics(tmp_path, scene, capsys):
    cfg = write_config(tmp_path / "cfg.json", scene)
    for run in ("a", "b"):
        run_json(capsys, ["train", "--config", cfg, "--seed", "7", "--deterministic", "--out", str(tmp_path / run)])
    a = (tmp_path / "a" / "metrics.json").read_bytes()
    assert a == (tmp_path / "b" / "metrics.json").read_bytes()
    assert json.loads(a)["final_loss"] is not None


def test_sweep_reports_spread_and_deviation(tmp_path, scene, capsys):
    cfg = write_config(tmp_path / "cfg.json", scene, seeds=[0, 1], transfer="full", reference="salinas")
    report = run_json(capsys, ["sweep", "--config", cfg, "--out", str(tmp_path / "sw")])
    assert [r["seed"] for r in report["runs"]] == [0, 1]
    assert report["oa"]["min"] <= report["oa"]["median"] <= report["oa"]["max"]
    assert isinstance(report["deviation_flag"], bool)
    assert (tmp_path / "sw" / "seed1" / "pretrain.mctw").exists()


@pytest.mark.parametrize("case, code, category", [
    ("missing_config", 5, "io"),
    ("bad_key", 2, "config"),
    ("bad_shape", 4, "shape"),
    ("bad_cube", 3, "data"),
])
def test_error_exit_codes(tmp_path, scene, capsys, case, code, category):
    if case == "missing_config":
        argv = ["train", "--config", str(tmp_path / "nope.json")]
    elif case == "bad_key":
        (tmp_path / "c.json").write_text(json.dumps({"colour": 1}))
        argv = ["train", "--config", str(tmp_path / "c.json")]
    elif case == "bad_shape":
        cfg = write_config(tmp_path / "c.json", scene, mce={"patch": 3})
        argv = ["train", "--config", cfg]
    else:
        (tmp_path / "x.hsic").write_bytes(b'{"magic": "XXXX"}\n')
        cfg = write_config(tmp_path / "c.json", scene, cube=str(tmp_path / "x.hsic"))
        argv = ["train", "--config", cfg]
    assert main(argv + ["--out", str(tmp_path / "run")]) == code
    assert not (tmp_path / "run").exists()
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == category and err["message"]
