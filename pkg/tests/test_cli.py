"""Operator surface: every command end-to-end on a micro corpus."""

import json

import numpy as np
import pytest

from portraitflow.cli import build_parser, main, write_ppm
from portraitflow.numerics import load_tensor, save_tensor


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Micro corpus + short training run shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    assert main(["gen-data", "--out", str(data), "--count", "10",
                 "--seed", "3", "--identities", "4"]) == 0
    assert main(["train", "--data", str(data), "--out", str(run),
                 "--steps-clip", "4", "--steps-frame", "2", "--batch", "2",
                 "--holdout", "3", "--depth", "2", "--width", "32"]) == 0
    return root


def test_gen_data_outputs(workspace):
    data = workspace / "data"
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["samples"]) == 10
    assert (data / "run_record.json").exists()
    assert (data / "sample_00000" / "video.pft").exists()


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "checkpoint_clip.pfck").exists()
    assert (run / "checkpoint_final.pfck").exists()
    lines = (run / "loss_log.jsonl").read_text().strip().splitlines()
    assert len(lines) == 6
    record = json.loads((run / "run_record.json").read_text())
    assert record["command"] == "train"
    assert record["config"]["train.steps_clip"] == 4
    assert record["config"]["dit.depth"] == 2


def test_sample_command_and_determinism(workspace):
    data, run = workspace / "data", workspace / "run"
    ref = data / "sample_00008" / "video.pft"
    audio = data / "sample_00008" / "envelope.pft"
    out1, out2 = workspace / "s1", workspace / "s2"
    args = ["sample", "--ckpt", str(run / "checkpoint_final.pfck"),
            "--ref", str(ref), "--audio", str(audio),
            "--steps", "3", "--seed", "11", "--dump-frames"]
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    v1 = load_tensor(out1 / "video.pft")
    v2 = load_tensor(out2 / "video.pft")
    assert v1.shape == (8, 32, 32, 3)
    assert np.array_equal(v1, v2)
    assert (out1 / "frame_000.ppm").exists()
    record = json.loads((out1 / "run_record.json").read_text())
    assert record["sample_config"]["cfg_scale"] == 4.5
    assert record["sample_config"]["steps"] == 3


def test_eval_command(workspace):
    data, run = workspace / "data", workspace / "run"
    out = workspace / "eval"
    assert main(["eval", "--ckpt", str(run / "checkpoint_final.pfck"),
                 "--data", str(data), "--out", str(out),
                 "--count", "2", "--steps", "2"]) == 0
    assert (out / "metrics.txt").exists()
    lines = (out / "metrics.jsonl").read_text().strip().splitlines()
    assert len(lines) == 3  # aggregate + 2 samples
    assert (out / "run_record.json").exists()


def test_inspect_command(workspace, capsys):
    run = workspace / "run"
    assert main(["inspect", "--ckpt", str(run / "checkpoint_final.pfck")]) == 0
    printed = capsys.readouterr().out
    assert "trainable parameters" in printed
    assert "train.steps_clip = 4" in printed


def test_frame_only_schedule(workspace):
    data = workspace / "data"
    out = workspace / "frame_only"
    assert main(["train", "--data", str(data), "--out", str(out),
                 "--steps-clip", "0", "--steps-frame", "2", "--batch", "2",
                 "--holdout", "3", "--depth", "2", "--width", "32"]) == 0
    lines = (out / "loss_log.jsonl").read_text().strip().splitlines()
    assert all(json.loads(line)["stage"] == "frame" for line in lines)


def test_config_file_with_flag_override(workspace):
    data = workspace / "data"
    cfg = workspace / "train.cfg"
    cfg.write_text("train.steps_clip = 3\ntrain.steps_frame = 1\n"
                   "train.batch_size = 2\ndit.depth = 2\ndit.width = 32\n")
    out = workspace / "cfg_run"
    assert main(["train", "--data", str(data), "--out", str(out),
                 "--config", str(cfg), "--steps-clip", "2",
                 "--holdout", "3"]) == 0
    record = json.loads((out / "run_record.json").read_text())
    assert record["config"]["train.steps_clip"] == 2  # flag wins
    assert record["config"]["train.steps_frame"] == 1


def test_parser_defaults_match_reference_settings():
    parser = build_parser()
    args = parser.parse_args(["sample", "--ckpt", "x", "--ref", "r",
                              "--audio", "a", "--out", "o"])
    assert args.cfg_scale == 4.5
    assert args.steps == 30
    assert args.motion_l == 0.5 and args.motion_b == 0.5


def test_unreadable_checkpoint_fails_with_diagnostic(workspace, capsys, tmp_path):
    bad = tmp_path / "bad.pfck"
    bad.write_bytes(b"garbage")
    assert main(["inspect", "--ckpt", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err


def test_version_mismatch_fails_cleanly(workspace, capsys, tmp_path):
    run = workspace / "run"
    ckpt = (run / "checkpoint_final.pfck").read_bytes()
    patched = tmp_path / "patched.pfck"
    raw = bytearray(ckpt)
    raw[4] = 99
    patched.write_bytes(bytes(raw))
    assert main(["inspect", "--ckpt", str(patched)]) == 2
    assert "version" in capsys.readouterr().err


def test_unknown_flag_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--nonsense"])
    assert exc.value.code != 0


def test_conflicting_derived_config_rejected(workspace, capsys):
    data = workspace / "data"
    cfg = workspace / "bad.cfg"
    cfg.write_text("dit.latent_h = 7\n")
    assert main(["train", "--data", str(data), "--out",
                 str(workspace / "bad_run"), "--config", str(cfg),
                 "--holdout", "3"]) == 2
    assert "conflicts" in capsys.readouterr().err


def test_write_ppm(tmp_path):
    frame = np.zeros((4, 5, 3))
    frame[1, 2] = [1.0, 0.5, 0.0]
    path = tmp_path / "f.ppm"
    write_ppm(path, frame)
    raw = path.read_bytes()
    assert raw.startswith(b"P6\n5 4\n255\n")
    assert len(raw) == len(b"P6\n5 4\n255\n") + 4 * 5 * 3
