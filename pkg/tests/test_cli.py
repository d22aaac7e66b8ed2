import hashlib
import json
import subprocess
import sys

import pytest

from safire.cli import main


def digest(path):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(path.iterdir()) if p.is_file()}


def test_no_args_usage(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_suggests(capsys):
    assert main(["gradcheck", "--sed", "1"]) == 1
    assert "--seed" in capsys.readouterr().err
    assert main(["bogus"]) == 1


def test_help_lists_every_flag():
    out = subprocess.run([sys.executable, "-m", "safire.cli", "infer", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    for flag in ("--ckpt", "--image", "--grid", "--mode", "--cluster", "--m", "--out", "--seed",
                 "--config", "--jobs"):
        assert flag in out.stdout


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck", "--seed", "1"]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last.startswith("max relative error") and float(last.split()[-1]) < 1e-4


def test_gradcheck_failure_exit_three(capsys):
    # a step this large cannot satisfy the tolerance
    assert main(["gradcheck", "--eps", "0.5", "--coords", "20"]) == 3


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(d / "tr"), "--n", "6", "--size", "32", "--strong", "--seed", "1"]) == 0
    assert main(["gen", "--out", str(d / "te"), "--n", "3", "--size", "32", "--strong", "--seed", "2"]) == 0
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 2, "batch_size": 3}))
    assert main(["pretrain", "--data", str(d / "tr"), "--out", str(d / "pre.ckpt"), "--config", str(cfg),
                 "--log", str(d / "pre.csv")]) == 0
    assert main(["train", "--data", str(d / "tr"), "--init", str(d / "pre.ckpt"), "--out", str(d / "m.ckpt"),
                 "--config", str(cfg), "--epochs", "1", "--log", str(d / "tr.csv")]) == 0
    return d


def test_flag_overrides_config(pipeline):
    assert len((pipeline / "pre.csv").read_text().splitlines()) == 3  # config: 2 epochs
    assert len((pipeline / "tr.csv").read_text().splitlines()) == 2  # flag: 1 epoch
    saved = json.loads((pipeline / "m.ckpt.json").read_text())
    assert saved["batch_size"] == 3 and saved["epochs"] == 1


def test_infer_eval_rerunnable(pipeline):
    d = pipeline
    for out in ("p1", "p2"):
        assert main(["infer", "--ckpt", str(d / "m.ckpt"), "--image", str(d / "te" / "images"),
                     "--grid", "4", "--out", str(d / out)]) == 0
    assert digest(d / "p1") == digest(d / "p2")
    names = {p.name for p in (d / "p1").iterdir()}
    assert {"00000.safr", "00000_heatmap.png", "00000_partition.png", "00000.json"} <= names
    for metric, gt in (("f1_fixed", "binary"), ("f1_best", "binary"), ("pmiou", "partitions"), ("ari", "partitions")):
        rep = d / f"{metric}.csv"
        assert main(["eval", "--pred", str(d / "p1"), "--gt", str(d / "te" / gt), "--metric", metric,
                     "--out", str(rep)]) == 0
        rows = rep.read_text().splitlines()
        assert rows[0] == "image,score" and rows[-1].startswith("mean,") and len(rows) == 5


def test_infer_multi_and_jobs(pipeline):
    d = pipeline
    assert main(["infer", "--ckpt", str(d / "m.ckpt"), "--image", str(d / "te" / "images"), "--grid", "4",
                 "--mode", "multi", "--cluster", "dbscan", "--out", str(d / "pm")]) == 0
    assert main(["infer", "--ckpt", str(d / "m.ckpt"), "--image", str(d / "te" / "images"), "--grid", "4",
                 "--mode", "multi", "--cluster", "dbscan", "--jobs", "2", "--out", str(d / "pm2")]) == 0
    assert digest(d / "pm") == digest(d / "pm2")
    side = json.loads((d / "pm" / "00000.json").read_text())
    assert {"M", "confidences", "fallback", "cluster_sizes"} <= set(side)


def test_eval_shape_mismatch_exit_two(pipeline, tmp_path, capsys):
    import numpy as np
    from safire.core import write_mask_png, write_prediction

    (tmp_path / "pred").mkdir()
    (tmp_path / "gt").mkdir()
    write_prediction(np.zeros((16, 16)), tmp_path / "pred" / "a.safr")
    write_mask_png(np.zeros((32, 32), np.uint8), tmp_path / "gt" / "a.png")
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"),
                 "--out", str(tmp_path / "r.csv")]) == 2
    err = capsys.readouterr().err
    assert "(16, 16)" in err and "(32, 32)" in err


def test_robustness_identity_row(pipeline, capsys):
    d = pipeline
    assert main(["robustness", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "te"), "--transform", "jpeg",
                 "--levels", "100,60", "--out", str(d / "rob.csv")]) == 0
    rows = (d / "rob.csv").read_text().splitlines()
    assert rows[0] == "transform,level,score,n_images" and len(rows) == 3


def test_missing_data_exit_two(tmp_path):
    assert main(["pretrain", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "x.ckpt")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gradcheck", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"wat": 1}))
    assert main(["gradcheck", "--config", str(bad)]) == 1
