import json

import pytest

from vqaudit.cli import build_parser, main, training_frames
from vqaudit.tileworld import generate_episodes

SMALL = ["--tsne-min-count", "10", "--tsne-max-per-code", "12", "--perplexity", "5", "--tsne-iters", "100",
         "--baseline-trials", "2"]


def test_gen_train_audit_report(tmp_path, capsys):
    ds, ckpt, out = tmp_path / "ds", tmp_path / "m.ckpt", tmp_path / "rep"
    assert main(["gen", "--out", str(ds), "--episodes", "2", "--steps", "4", "--seed", "1"]) == 0
    assert main(["train", "--dataset", str(ds), "--out", str(ckpt), "--steps", "3", "--batch-size", "2",
                 "--codebook-size", "8", "--dim", "4", "--log-every", "1"]) == 0
    assert "reconstruction MSE" in capsys.readouterr().out
    assert main(["audit", "--dataset", str(ds), "--checkpoint", str(ckpt), "--out", str(out), *SMALL]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["command"].startswith("vqaudit audit")
    assert manifest["dataset_checksum"] and manifest["model_checksum"]
    assert main(["report", "--bundle", str(out), "--out", str(tmp_path / "fig")]) == 0


def test_oracle_check_passes_on_a_small_world(tmp_path):
    out = tmp_path / "oc"
    assert main(["oracle-check", "--episodes", "3", "--steps", "5", "--out", str(out), *SMALL]) == 0
    result = json.loads((out / "oracle_check.json").read_text())
    assert result["passed"] and result["problems"] == [] and result["unselected_pairs"] > 0


def test_errors_exit_with_code_2(tmp_path, capsys):
    assert main(["audit", "--dataset", str(tmp_path / "nope"), "--checkpoint", str(tmp_path / "x.ckpt"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "error:" in capsys.readouterr().err
    assert main(["oracle-check", "--episodes", "1", "--steps", "2", "--out", str(tmp_path / "o2"),
                 "--area-threshold", "0"]) == 2


def test_parser_rejects_unknown_choices():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["audit", "--dataset", "d", "--checkpoint", "c", "--out", "o", "--embedder", "x"])


def test_training_subset_is_seeded():
    eps = generate_episodes(0, 2, 5)
    a, b = training_frames(eps, 4, 3), training_frames(eps, 4, 3)
    assert a.shape == (4, 64, 64, 3) and (a == b).all()
    assert len(training_frames(eps, 0, 3)) == 10
