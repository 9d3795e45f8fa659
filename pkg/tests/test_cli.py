import json
import os

import numpy as np
import pytest

from stereoface.cli import main
from stereoface.imaging import CameraRig, encode_pgm
from stereoface.synth import SceneSpec, render_stereo


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One end-to-end CLI run shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    model = root / "model"
    calib = root / "calib"
    gallery = root / "gallery.json"

    assert main(["synth", "--real", "10", "--spoof", "10", "--seed", "5",
                 "--out", str(data)]) == 0
    assert main(["train", "--data", str(data / "manifest.jsonl"), "--seed", "5",
                 "--epochs", "8", "--out", str(model)]) == 0
    assert main(["sweep", "--data", str(data / "manifest.jsonl"),
                 "--weights", str(model / "model.slnn"), "--seed", "5",
                 "--out", str(calib)]) == 0
    assert main(["enroll", "--gallery", str(gallery), "--name", "1", "--face", "1:enroll"]) == 0
    assert main(["enroll", "--gallery", str(gallery), "--name", "2", "--face", "2:enroll"]) == 0
    return root


def read_threshold(workspace):
    with open(workspace / "calib" / "threshold.json") as fh:
        return json.load(fh)["threshold"]


class TestSynth:
    def test_artifacts(self, workspace):
        data = workspace / "data"
        crops = sorted(p.name for p in data.glob("crop_*.pgm"))
        assert len(crops) == 20
        manifest_lines = (data / "manifest.jsonl").read_text().strip().split("\n")
        assert len(manifest_lines) == 20
        assert (data / "run_config.json").exists()

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        again = tmp_path / "again"
        assert main(["synth", "--real", "10", "--spoof", "10", "--seed", "5",
                     "--out", str(again)]) == 0
        src = workspace / "data"
        for name in ["manifest.jsonl", "crop_00000.pgm", "crop_00013.pgm"]:
            assert (again / name).read_bytes() == (src / name).read_bytes()

    def test_zero_counts(self, tmp_path):
        out = tmp_path / "empty"
        assert main(["synth", "--real", "0", "--spoof", "0", "--out", str(out)]) == 0
        assert (out / "manifest.jsonl").read_text() == ""

    def test_negative_count_rejected(self, tmp_path):
        assert main(["synth", "--real", "-1", "--spoof", "0", "--out", str(tmp_path / "x")]) == 2


@pytest.fixture(scope="module")
def pair_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("pair")
    scene = SceneSpec(kind="face_bump", distance=1.1, bump_depth=0.06,
                      rig=CameraRig(500.0, 0.1), width=320, height=160, texture_seed=3)
    pair, _ = render_stereo(scene)
    left = root / "left.pgm"
    right = root / "right.pgm"
    left.write_bytes(encode_pgm(pair.left))
    right.write_bytes(encode_pgm(pair.right))
    return left, right


class TestDepth:
    def test_writes_artifacts(self, pair_files, tmp_path, capsys):
        left, right = pair_files
        out = tmp_path / "depth"
        assert main(["depth", "--left", str(left), "--right", str(right),
                     "--out", str(out), "--time"]) == 0
        for name in ("depth.pgm", "disparity.sdm", "depth.sdm", "run_config.json"):
            assert (out / name).exists()
        assert "elapsed_ms=" in capsys.readouterr().out

    def test_identical_frames_give_dark_map(self, pair_files, tmp_path):
        left, _ = pair_files
        out = tmp_path / "dark"
        assert main(["depth", "--left", str(left), "--right", str(left),
                     "--out", str(out)]) == 0
        from stereoface.imaging import decode_pgm

        img = decode_pgm((out / "depth.pgm").read_bytes())
        assert img.pixels.max() == 0.0

    def test_size_mismatch_exit_2_names_both_sizes(self, pair_files, tmp_path, capsys):
        left, _ = pair_files
        small = tmp_path / "small.pgm"
        small.write_bytes(b"P5\n4 4\n255\n" + bytes(16))
        code = main(["depth", "--left", str(left), "--right", str(small),
                     "--out", str(tmp_path / "o")])
        assert code == 2
        err = capsys.readouterr().err
        assert "320x160" in err and "4x4" in err

    def test_missing_input_exit_3(self, tmp_path):
        code = main(["depth", "--left", str(tmp_path / "nope.pgm"),
                     "--right", str(tmp_path / "nope.pgm"), "--out", str(tmp_path / "o")])
        assert code == 3

    def test_corrupt_input_exit_3(self, tmp_path):
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"P6 trash")
        code = main(["depth", "--left", str(bad), "--right", str(bad),
                     "--out", str(tmp_path / "o")])
        assert code == 3


class TestTrainSweep:
    def test_train_artifacts(self, workspace):
        model = workspace / "model"
        for name in ("model.slnn", "training_stats.csv", "loss_curves.png", "run_config.json"):
            assert (model / name).exists()
        header = (model / "training_stats.csv").read_text().split("\n")[0]
        assert header == "epoch,train_loss,val_loss,train_acc,val_acc"

    def test_sweep_artifacts_and_threshold(self, workspace):
        calib = workspace / "calib"
        for name in ("threshold_sweep.csv", "threshold_sweep.png", "threshold.json",
                     "run_config.json"):
            assert (calib / name).exists()
        threshold = read_threshold(workspace)
        assert 0.0 < threshold < 1.0

    def test_negative_fpr_budget_rejected(self, workspace, tmp_path):
        code = main(["sweep", "--data", str(workspace / "data" / "manifest.jsonl"),
                     "--weights", str(workspace / "model" / "model.slnn"),
                     "--seed", "5", "--max-fpr", "-0.5", "--out", str(tmp_path / "o")])
        assert code == 2

    def test_partial_failure_cleans_outputs(self, workspace, tmp_path, monkeypatch):
        # Force a late failure: weights and CSV are already written when the
        # figure render dies, and the command must remove them again.
        import stereoface.cli as cli_mod

        def boom(*args, **kwargs):
            raise RuntimeError("render exploded")

        monkeypatch.setattr(cli_mod.report, "save_loss_curves", boom)
        out = tmp_path / "broken"
        code = main(["train", "--data", str(workspace / "data" / "manifest.jsonl"),
                     "--seed", "5", "--epochs", "1", "--out", str(out)])
        assert code == 1
        assert not (out / "model.slnn").exists()
        assert not (out / "training_stats.csv").exists()
        assert not (out / "run_config.json").exists()

    def test_corrupt_weights_exit_3(self, workspace, tmp_path):
        bad = tmp_path / "bad.slnn"
        bad.write_bytes(b"JUNKJUNKJUNK")
        code = main(["sweep", "--data", str(workspace / "data" / "manifest.jsonl"),
                     "--weights", str(bad), "--out", str(tmp_path / "o")])
        assert code == 3


class TestAuthFlow:
    def pick_crops(self, workspace):
        """A real crop above and a spoof crop below the swept threshold."""
        from stereoface.classifier import confidences
        from stereoface.nn import decode_weights
        from stereoface.synth import load_dataset

        manifest = workspace / "data" / "manifest.jsonl"
        threshold = read_threshold(workspace)
        net = decode_weights((workspace / "model" / "model.slnn").read_bytes())
        samples = load_dataset(str(manifest))
        conf = confidences(net, samples)
        records = [json.loads(line) for line in manifest.read_text().strip().split("\n")]
        real = spoof = None
        for c, sample, record in zip(conf, samples, records):
            if sample.label == 1 and c >= threshold and real is None:
                real = workspace / "data" / record["path"]
            if sample.label == 0 and c < threshold and spoof is None:
                spoof = workspace / "data" / record["path"]
        assert real is not None and spoof is not None
        return real, spoof

    def test_real_registered_face(self, workspace, capsys):
        real, _ = self.pick_crops(workspace)
        code = main(["auth", "--crop", str(real), "--face", "1:frame2",
                     "--weights", str(workspace / "model" / "model.slnn"),
                     "--threshold-file", str(workspace / "calib" / "threshold.json"),
                     "--gallery", str(workspace / "gallery.json")])
        assert code == 0
        out = capsys.readouterr().out.strip().split("\n")
        assert out[0] == "ID 1"
        assert out[1].startswith("depth_confidence=")

    def test_real_unregistered_face(self, workspace, capsys):
        real, _ = self.pick_crops(workspace)
        code = main(["auth", "--crop", str(real), "--face", "9:frame1",
                     "--weights", str(workspace / "model" / "model.slnn"),
                     "--threshold-file", str(workspace / "calib" / "threshold.json"),
                     "--gallery", str(workspace / "gallery.json")])
        assert code == 0
        assert capsys.readouterr().out.startswith("Unknown")

    def test_spoof_prints_none(self, workspace, capsys):
        _, spoof = self.pick_crops(workspace)
        code = main(["auth", "--crop", str(spoof), "--face", "1:frame9",
                     "--weights", str(workspace / "model" / "model.slnn"),
                     "--threshold-file", str(workspace / "calib" / "threshold.json"),
                     "--gallery", str(workspace / "gallery.json")])
        assert code == 0
        assert capsys.readouterr().out.startswith("None")

    def test_explicit_threshold_flag(self, workspace, capsys):
        real, _ = self.pick_crops(workspace)
        code = main(["auth", "--crop", str(real), "--face", "2:frame1",
                     "--weights", str(workspace / "model" / "model.slnn"),
                     "--threshold", "0.5",
                     "--gallery", str(workspace / "gallery.json")])
        assert code == 0
        assert capsys.readouterr().out.startswith("ID 2")


class TestEval:
    def test_eval_flow(self, workspace, tmp_path, capsys):
        manifest = workspace / "data" / "manifest.jsonl"
        cases = []
        for line in manifest.read_text().strip().split("\n"):
            record = json.loads(line)
            path = os.path.join(str(workspace / "data"), record["path"])
            if record["label"] == 1:
                cases.append({"depth_crop": path, "face": "1:f", "truth": "1"})
            else:
                cases.append({"depth_crop": path, "face": "2:f", "truth": "None"})
        cases_path = tmp_path / "cases.jsonl"
        cases_path.write_text("".join(json.dumps(c) + "\n" for c in cases))
        out = tmp_path / "eval"
        code = main(["eval", "--cases", str(cases_path),
                     "--weights", str(workspace / "model" / "model.slnn"),
                     "--threshold-file", str(workspace / "calib" / "threshold.json"),
                     "--gallery", str(workspace / "gallery.json"), "--out", str(out)])
        assert code == 0
        assert "macro_precision=" in capsys.readouterr().out
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["labels"] == ["1", "2", "Unknown", "None"]
        assert int(np.sum(metrics["matrix"])) == len(cases)
        assert (out / "confusion_matrix.png").exists()


class TestHelp:
    @pytest.mark.parametrize(
        "command", ["synth", "depth", "train", "sweep", "eval", "auth", "enroll"]
    )
    def test_help_exits_zero(self, command, capsys):
        with pytest.raises(SystemExit) as exc:
            main([command, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "--" in out

    def test_missing_required_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--real", "1"])
        assert exc.value.code == 2


class TestConfigFile:
    def test_config_file_and_flag_precedence(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 9, "train": {"epochs": 1}}))
        out = tmp_path / "ds"
        assert main(["synth", "--real", "1", "--spoof", "1", "--config", str(cfg),
                     "--out", str(out)]) == 0
        sidecar = json.loads((out / "run_config.json").read_text())
        assert sidecar["config"]["seed"] == 9
        assert sidecar["config"]["train"]["epochs"] == 1
        out2 = tmp_path / "ds2"
        assert main(["synth", "--real", "1", "--spoof", "1", "--config", str(cfg),
                     "--seed", "11", "--out", str(out2)]) == 0
        sidecar2 = json.loads((out2 / "run_config.json").read_text())
        assert sidecar2["config"]["seed"] == 11

    def test_bad_config_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"gamma": -2.0}))
        code = main(["synth", "--real", "1", "--spoof", "1", "--config", str(cfg),
                     "--out", str(tmp_path / "o")])
        assert code == 2
