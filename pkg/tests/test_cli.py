import json

import numpy as np
import pytest

from ear3d.cli import main
from ear3d.data import PhantomSpec, generate_phantom, load_record, save_dataset
from ear3d.network import EARConfig, build_network
from ear3d.objectives import binarize, compute_metrics
from ear3d.training import (RunConfig, SplitConfig, load_checkpoint, predict_probs,
                            save_checkpoint)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["phantom", "--records", "5", "--frames", "2", "--size", "16", "16",
                 "--output", str(root / "ds"), "-q"]) == 0
    cfg = RunConfig(model=EARConfig(depth=1, base_channels=2), epochs=2, data=str(root / "ds"),
                    split=SplitConfig(0.2, 1))
    (root / "cfg.json").write_text(json.dumps(cfg.to_dict()))
    assert main(["train", "--config", str(root / "cfg.json"), "--output", str(root / "run"),
                 "--deterministic", "-q"]) == 0
    return root


def test_train_outputs(trained):
    rows = [json.loads(line) for line in open(trained / "run/fold_0/log.jsonl")]
    assert [r["epoch"] for r in rows] == [0, 1]
    assert set(rows[0]) == {"fold", "epoch", "train_loss", "train_dice", "val_loss", "val_dice"}
    assert (trained / "run/fold_0/best.ckpt").exists()


def test_eval_identity_and_recomputation(trained, tmp_path):
    assert main(["eval", "--data", str(trained / "ds"), "--identity", "--output", str(tmp_path / "id"),
                 "--min-dice", "1.0", "-q"]) == 0
    report = json.loads((tmp_path / "id/eval.json").read_text())
    assert report["aggregate"]["dice"]["mean"] == 1.0
    ckpt = trained / "run/fold_0/best.ckpt"
    assert main(["eval", "--data", str(trained / "ds"), "--checkpoint", str(ckpt),
                 "--output", str(tmp_path / "m"), "--deterministic", "-q"]) == 0
    report = json.loads((tmp_path / "m/eval.json").read_text())
    net, _, _ = load_checkpoint(ckpt)
    dice = []
    for i in range(5):
        rec = load_record(trained / "ds" / f"P{i:03d}_s00")
        dice.append(compute_metrics(binarize(predict_probs(net, rec))[0], rec.mask).dice)
    assert abs(report["aggregate"]["dice"]["mean"] - np.mean(dice)) < 1e-12


def test_eval_min_dice_failure(trained, tmp_path):
    ckpt = trained / "run/fold_0/best.ckpt"
    assert main(["eval", "--data", str(trained / "ds"), "--checkpoint", str(ckpt),
                 "--min-dice", "1.01", "--output", str(tmp_path), "-q"]) == 1


def test_predict_writes_container_mask_and_curves(trained, tmp_path):
    record = trained / "ds/P000_s00"
    assert main(["predict", "--record", str(record), "--checkpoint", str(trained / "run/fold_0/best.ckpt"),
                 "--velocity", "--output", str(tmp_path), "-q"]) == 0
    raw = (tmp_path / "mask.raw").read_bytes()
    assert len(raw) == 2 * 16 * 16 and set(raw) <= {0, 1}
    assert (tmp_path / "curves.csv").read_text().startswith("frame,longitudinal_cm_s")
    assert "metrics_vs_record_mask" in json.loads((tmp_path / "prediction.json").read_text())


def test_velocity_with_ground_truth_mask(tmp_path):
    spec = PhantomSpec(sigma_n=0.0, magnitude_noise=0.0)
    save_dataset(generate_phantom(1, 8, 64, 64, seed=2, spec=spec), tmp_path / "ds")
    assert main(["velocity", "--record", str(tmp_path / "ds/P000_s00"), "--output", str(tmp_path / "v"),
                 "-q"]) == 0
    peaks = json.loads((tmp_path / "v/peaks.json").read_text())["peaks"]
    assert abs(peaks["radial"]["max"]["value"] - spec.v_r) <= 0.02 * spec.v_r
    assert abs(peaks["longitudinal"]["max"]["value"] - spec.v_z) <= 0.02 * spec.v_z
    assert abs(peaks["circumferential"]["max"]["value"] - spec.v_c) <= 0.02 * spec.v_c


def test_exit_codes(trained, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochs": 1, "learning_rate": 0.1}))
    assert main(["train", "--config", str(bad), "-q"]) == 2
    assert "learning_rate" in capsys.readouterr().err
    assert main(["train", "-q"]) == 2
    save_dataset(generate_phantom(1, 2, 16, 16), tmp_path / "ds")
    image = tmp_path / "ds/P000_s00/image.raw"
    image.write_bytes(image.read_bytes()[:100])
    assert main(["velocity", "--record", str(tmp_path / "ds/P000_s00"), "-q"]) == 3
    assert "image.raw" in capsys.readouterr().err
    # a depth-3 model cannot take an 18-pixel-wide record
    save_dataset(generate_phantom(1, 2, 18, 18), tmp_path / "odd")
    cfg = RunConfig(model=EARConfig(depth=3, base_channels=2), epochs=1, data=str(tmp_path / "odd"),
                    split=SplitConfig(0.0, 1))
    save_checkpoint(tmp_path / "d3.ckpt", build_network(cfg.model), None, {})
    assert main(["predict", "--record", str(tmp_path / "odd/P000_s00"), "--checkpoint",
                 str(tmp_path / "d3.ckpt"), "--output", str(tmp_path / "p"), "-q"]) == 2


def test_verify_passes_and_catches_corrupted_conv(capsys):
    assert main(["verify", "-q"]) == 0
    clean = capsys.readouterr().out
    assert "FAIL" not in clean and "tol" in clean
    assert main(["verify", "--corrupt-conv", "-q"]) == 1
    report = capsys.readouterr().out
    failing = [line for line in report.splitlines() if line.startswith("FAIL")]
    assert any("conv3d" in line for line in failing)
