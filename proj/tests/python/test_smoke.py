import math

import numpy as np
import pytest

import recess_cad as rc


def test_geometry_and_losses():
    assert rc.iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert rc.iou((0, 0, 10, 10), (0, 0, 5, 10)) == pytest.approx(0.5)
    assert rc.ciou_loss((10, 10, 30, 30), (10, 10, 30, 30)) == 0.0
    assert rc.ciou_loss((15, 15, 25, 25), (10, 10, 30, 30)) == pytest.approx(0.75)
    assert rc.weighted_cls_loss(0.5, True, 3.0) == pytest.approx(3 * math.log(2))


def test_metrics():
    m = rc.classification_metrics(tp=79, tn=331, fp=29, fn=44)
    assert abs(m["balanced_accuracy"] - 0.781) < 5e-4
    assert rc.interpolated_ap([True, False, True], 2) == pytest.approx((51 + 50 * 2 / 3) / 101)
    assert rc.class_weight([True] * 97 + [False] * 289) == pytest.approx(289 / 97)
    assert rc.early_stopper([0.5, 0.6, 0.6, 0.6, 0.6], 3) == (True, 1, 4)
    with pytest.raises(rc.Error, match="undefined"):
        rc.classification_metrics(0, 5, 0, 0)
    with pytest.raises(rc.UserError):
        rc.early_stopper([0.1], 0)


def test_phantom_and_preprocess():
    img, ann = rc.phantom(3, seed=1)
    assert img.shape == (256, 256)
    assert img.dtype == np.float32
    assert ann["label"] in ("Distended", "NonDistended")
    x0, y0, x1, y1 = ann["box"]
    assert 0 <= x0 < x1 <= 256 and 0 <= y0 < y1 <= 256

    raw, truth = rc.raw_canvas(0, seed=4)
    crop, box = rc.extract_scan_frame(raw, resize_to=256)
    assert crop.shape == (256, 256)
    assert rc.iou(box, truth) >= 0.99
    with pytest.raises(rc.NoFrameFound):
        rc.extract_scan_frame(np.full((100, 120), 0.3, dtype=np.float32))


def test_cli_pipeline(tmp_path):
    d = str(tmp_path / "d")
    code, _, _ = rc.run_cli(["--quiet", "synth", "--n", "12", "--seed", "1", "--out", d])
    assert code == 0
    folds = rc.grouped_kfold(d + "/manifest.jsonl", k=3, seed=0)
    assert len(folds) == 3
    assert sum(len(test) for _, test in folds) == 12

    run = str(tmp_path / "run")
    code, out, err = rc.run_cli(["--quiet", "train", "--mode", "multitask", "--manifest", d + "/manifest.jsonl",
                                 "--fold", "0", "--max-epochs", "1", "--out", run])
    assert code == 0, err
    img, _ = rc.phantom(0, seed=1)
    p = rc.predict(run + "/best.ckpt", img)
    assert p["label"] in ("Distended", "NonDistended")
    assert 0.0 <= p["p_distended"] <= 1.0

    code, _, err = rc.run_cli(["nonsense"])
    assert code == 1
    assert "unknown subcommand" in err
