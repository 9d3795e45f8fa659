"""End-to-end acceptance checks.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS/FAIL line
per criterion. The suite trains the full classifier once, so expect a few
minutes of wall time.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from stereoface.classifier import (
    DepthClassifier,
    TrainConfig,
    confidences,
    metrics_at_threshold,
    select_threshold,
    split_train_val,
    sweep_thresholds,
    train,
)
from stereoface.imaging import CameraRig, GrayImage, decode_pgm, encode_pgm
from stereoface.nn import PARAM_PLAN, bce_loss, build_model, decode_weights, encode_weights
from stereoface.pipeline import (
    CountingProvider,
    EvalCase,
    Gallery,
    PipelineConfig,
    StubProvider,
    authenticate,
    enroll,
    metrics_from_confusion,
)
from stereoface.rng import SplitMix64
from stereoface.stereo import DisparityMap, MatchParams, compute_disparity, disparity_to_depth
from stereoface.synth import SceneSpec, generate_dataset, render_stereo, write_dataset


@contextmanager
def criterion(num: int, desc: str):
    try:
        yield
    except BaseException:
        print(f"\n[criterion {num:02d}] FAIL {desc}")
        raise
    print(f"\n[criterion {num:02d}] PASS {desc}")


TRAIN_CONFIG = TrainConfig(epochs=30, batch_size=16, lr=1e-3, seed=7, val_fraction=0.2)


@pytest.fixture(scope="module")
def dataset_seed7():
    return generate_dataset(200, 200, 7)


@pytest.fixture(scope="module")
def trained_seed7(dataset_seed7):
    started = time.perf_counter()
    net, stats = train(dataset_seed7, TRAIN_CONFIG)
    elapsed = time.perf_counter() - started
    return net, stats, elapsed


@pytest.fixture(scope="module")
def val_split_seed7(dataset_seed7):
    return split_train_val(dataset_seed7, TRAIN_CONFIG.seed, TRAIN_CONFIG.val_fraction)[1]


def test_c01_depth_formula_roundtrip():
    with criterion(1, "z = f*T/d roundtrips within 1e-12; worked point exact; < 1 s"):
        started = time.perf_counter()
        worked = disparity_to_depth(
            DisparityMap(np.array([[50.0]]), np.array([[True]])), CameraRig(500.0, 0.1)
        )
        assert worked.values[0, 0] == 1.0
        rng = SplitMix64(101)
        for _ in range(1000):
            f = 50.0 + 1950.0 * rng.uniform()
            t = 0.01 + 0.99 * rng.uniform()
            z = 0.1 + 9.9 * rng.uniform()
            d = (f * t) / z
            dmap = DisparityMap(np.array([[d]]), np.array([[True]]))
            back = disparity_to_depth(dmap, CameraRig(f, t)).values[0, 0]
            assert abs(back - z) <= 1e-12 * z
        assert time.perf_counter() - started < 1.0


def test_c02_stereo_oracle_equivalence():
    with criterion(2, "20 synthetic 640x480 scenes: >=99% within 1 px, MAE <= 0.5 px, < 60 s"):
        rig = CameraRig(500.0, 0.1)
        rng = SplitMix64(20268)
        scenes = []
        for i in range(10):
            scenes.append(
                SceneSpec(
                    kind="face_bump",
                    distance=rng.uniform_in(1.0, 1.4),
                    bump_depth=rng.uniform_in(0.03, 0.08),
                    texture_seed=rng.next_u64(),
                    rig=rig,
                    width=640,
                    height=480,
                )
            )
        for i in range(10):
            tilt = (1 if rng.uniform() < 0.5 else -1) * rng.uniform_in(0.05, 0.3)
            folded = i % 3 == 0
            fold = (1 if rng.uniform() < 0.5 else -1) * rng.uniform_in(0.05, 0.3)
            scenes.append(
                SceneSpec(
                    kind="flat_photo",
                    distance=rng.uniform_in(1.0, 1.4),
                    tilt=tilt,
                    fold_tilt=fold if folded else None,
                    texture_seed=rng.next_u64(),
                    rig=rig,
                    width=640,
                    height=480,
                )
            )
        params = MatchParams()  # default: radius 4, d in [0, 64]
        started = time.perf_counter()
        total_err = []
        for scene in scenes:
            pair, truth = render_stereo(scene)
            disp = compute_disparity(pair, params)
            assert disp.valid.mean() > 0.5
            err = np.abs(disp.values - truth.values)[disp.valid]
            assert np.mean(err <= 1.0) >= 0.99, f"scene {scene.kind} within-1px {np.mean(err <= 1.0)}"
            assert err.mean() <= 0.5, f"scene {scene.kind} MAE {err.mean():.3f}"
            total_err.append(err)
        elapsed = time.perf_counter() - started
        all_err = np.concatenate(total_err)
        assert all_err.mean() <= 0.5
        assert np.mean(all_err <= 1.0) >= 0.99
        assert elapsed < 60.0, f"took {elapsed:.1f} s"


def test_c03_layer_chain_and_parameter_count():
    with criterion(3, "forward shapes follow the declared chain; 272,449 parameters"):
        net = build_model(0)
        x = SplitMix64(1).uniforms(96 * 96).reshape(96, 96, 1)
        expected = [
            (96, 96, 8), (96, 96, 8), (32, 32, 8),
            (32, 32, 16), (32, 32, 16), (16, 16, 16),
            (16, 16, 32), (16, 16, 32), (8, 8, 32),
            (2048,), (128,), (128,), (32,), (32,), (1,), (1,),
        ]
        out = x
        shapes = []
        for layer in net.layers:
            out = layer.forward(out)
            shapes.append(out.shape)
        assert shapes == expected
        per_layer = [layer.w.size + layer.b.size for _, layer in net.param_layers()]
        assert per_layer == [208, 1168, 4640, 262272, 4128, 33]
        # Independent arithmetic oracle from the declared plan.
        assert sum(int(np.prod(s)) + s[-1] for _, _, s in PARAM_PLAN) == 272449
        assert net.parameter_count() == 272449


def test_c04_gradients_match_finite_differences():
    with criterion(4, "analytic gradients match central differences (rel err < 1e-4)"):
        net = build_model(404)
        x = SplitMix64(405).uniforms(96 * 96).reshape(96, 96, 1)
        y = 1

        def loss():
            return bce_loss(net.forward(x), y)[0]

        p = net.forward(x)
        _, dp = bce_loss(p, y)
        net.zero_grads()
        net.backward(dp)

        picker = SplitMix64(406)
        step = 1e-5
        checked = 0
        for name, layer in net.param_layers():
            flat_w = layer.w.reshape(-1)
            flat_dw = layer.dw.reshape(-1)
            flat_b = layer.b
            flat_db = layer.db
            n_params = flat_w.size + flat_b.size
            want = min(200, n_params)
            seen = set()
            while len(seen) < want:
                seen.add(picker.below(n_params))
            for idx in sorted(seen):
                if idx < flat_w.size:
                    arr, gref, j = flat_w, flat_dw[idx], idx
                else:
                    arr, gref, j = flat_b, flat_db[idx - flat_w.size], idx - flat_w.size
                saved = arr[j]
                arr[j] = saved + step
                up = loss()
                arr[j] = saved - step
                down = loss()
                arr[j] = saved
                numeric = (up - down) / (2.0 * step)
                assert abs(gref - numeric) <= max(
                    1e-4 * max(abs(gref), abs(numeric)), 1e-7
                ), f"{name}[{idx}]: analytic {gref} vs numeric {numeric}"
                checked += 1
        assert checked >= 200 * 5 + 33


def test_c05_training_reaches_target(dataset_seed7, trained_seed7):
    with criterion(5, "seed-7 dataset: final val acc >= 0.90, train loss < 0.3, deterministic"):
        assert len(dataset_seed7) == 400
        assert sum(s.label for s in dataset_seed7) == 200
        assert all(
            (s.depth_crop.width, s.depth_crop.height) == (96, 96) for s in dataset_seed7
        )
        net, stats, elapsed = trained_seed7
        assert stats[-1].val_acc >= 0.90, f"val acc {stats[-1].val_acc}"
        assert stats[-1].train_loss < 0.3, f"train loss {stats[-1].train_loss}"
        assert elapsed < 15 * 60, f"training took {elapsed:.0f} s"
        # Determinism probe: the first epochs of two fresh runs agree bitwise.
        short = TrainConfig(epochs=3, batch_size=16, lr=1e-3, seed=7, val_fraction=0.2)
        net_a, stats_a = train(dataset_seed7, short)
        net_b, stats_b = train(dataset_seed7, short)
        assert stats_a == stats_b
        for pa, pb in zip(net_a.params(), net_b.params()):
            assert pa.tobytes() == pb.tobytes()
        assert stats_a == stats[:3]


def test_c06_threshold_policy(trained_seed7, val_split_seed7):
    with criterion(6, "max_fpr=0 threshold accepts zero validation spoofs; sweep limits hold"):
        net, _, _ = trained_seed7
        sweep = sweep_thresholds(net, val_split_seed7, grid=99)
        chosen = select_threshold(sweep, max_fpr=0.0)
        assert chosen is not None
        conf = confidences(net, val_split_seed7)
        labels = np.array([s.label for s in val_split_seed7])
        accepted_spoofs = int(np.sum((conf >= chosen) & (labels == 0)))
        assert accepted_spoofs == 0
        # Analytic limits of the sweep family.
        lo = metrics_at_threshold(conf, labels, np.nextafter(0.0, 1.0))
        hi = metrics_at_threshold(conf, labels, np.nextafter(1.0, 0.0))
        assert lo.fpr == 1.0
        assert lo.accuracy == labels.mean()
        assert hi.fpr == 0.0
        assert hi.precision == 1.0
        fprs = [p.fpr for p in sweep.points]
        assert all(b <= a for a, b in zip(fprs, fprs[1:]))


def test_c07_metrics_reproduction():
    with criterion(7, "macro precision on the reference matrix is 0.8875; both F1 readings reported"):
        matrix = np.array([[3, 0, 0, 0], [0, 3, 0, 0], [1, 0, 3, 0], [0, 1, 1, 8]])
        labels = ["1", "2", "Unknown", "None"]
        report = metrics_from_confusion(matrix, labels)
        assert round(report.macro_precision, 4) == 0.8875
        # The two defensible F1 aggregations disagree; both are exposed
        # rather than forced to one figure.
        assert abs(report.macro_f1_mean - 0.8382936507936508) < 1e-12
        assert abs(report.macro_f1_harmonic - 0.8483455882352942) < 1e-12
        assert report.macro_f1_mean != report.macro_f1_harmonic
        print(
            f"\n  macro_precision={report.macro_precision:.4f} "
            f"macro_f1_mean={report.macro_f1_mean:.4f} "
            f"macro_f1_harmonic={report.macro_f1_harmonic:.4f}"
        )


def test_c08_security_gate(trained_seed7, val_split_seed7):
    with criterion(8, "every depth-rejected case returns None without invoking the provider"):
        net, _, _ = trained_seed7
        sweep = sweep_thresholds(net, val_split_seed7, grid=99)
        threshold = select_threshold(sweep, max_fpr=0.0)
        assert threshold is not None
        clf = DepthClassifier(model=net, threshold=threshold)
        base_provider = StubProvider(seed=3)
        gallery = enroll(Gallery(), "1", "1:enroll", base_provider)
        gallery = enroll(gallery, "2", "2:enroll", base_provider)
        cfg = PipelineConfig(depth_threshold=threshold, match_threshold=1.0)

        cases = []
        real_rotation = ["1", "2", "9"]
        for i, sample in enumerate(val_split_seed7):
            if sample.label == 1:
                identity = real_rotation[i % 3]
                truth = identity if identity in gallery.entries else "Unknown"
            else:
                identity = real_rotation[i % 2]  # printed photo of an enrolled face
                truth = "None"
            cases.append(EvalCase(sample.depth_crop, f"{identity}:frame{i}", truth))

        rejected = 0
        for case in cases:
            counter = CountingProvider(StubProvider(seed=3))
            decision, conf = authenticate(
                case.depth_crop, case.face_ref, clf, counter, gallery, cfg
            )
            if conf < threshold:
                rejected += 1
                assert decision.label() == "None"
                assert counter.calls == 0
            else:
                assert counter.calls == 1
        assert rejected > 0  # the gate actually exercised
        print(f"\n  {rejected}/{len(cases)} cases depth-rejected, provider untouched for all")


def test_c09_bit_exactness(tmp_path):
    with criterion(9, "PGM, weight file, and seeded generation are byte-stable"):
        rng = SplitMix64(6502)
        for _ in range(10):
            w = 1 + rng.below(32)
            h = 1 + rng.below(32)
            payload = bytes(rng.below(256) for _ in range(w * h))
            data = f"P5\n{w} {h}\n255\n".encode() + payload
            assert encode_pgm(decode_pgm(data)) == data

        net = build_model(90)
        blob = encode_weights(net)
        back = decode_weights(blob)
        for pa, pb in zip(net.params(), back.params()):
            assert pa.tobytes() == pb.tobytes()
        assert encode_weights(back) == blob

        run_a = generate_dataset(8, 8, 3)
        run_b = generate_dataset(8, 8, 3)
        for sa, sb in zip(run_a, run_b):
            assert sa.depth_crop.pixels.tobytes() == sb.depth_crop.pixels.tobytes()
        dir_a = tmp_path / "a"
        dir_b = tmp_path / "b"
        write_dataset(run_a, str(dir_a))
        write_dataset(run_b, str(dir_b))
        for name in sorted(p.name for p in dir_a.iterdir()):
            assert (dir_a / name).read_bytes() == (dir_b / name).read_bytes()


def test_c10_depth_command_latency(tmp_path):
    with criterion(10, "depth command on a 640x480 pair completes within 3 s"):
        from stereoface.cli import main

        scene = SceneSpec(
            kind="face_bump",
            distance=1.2,
            bump_depth=0.06,
            texture_seed=55,
            rig=CameraRig(500.0, 0.1),
            width=640,
            height=480,
        )
        pair, _ = render_stereo(scene)
        left = tmp_path / "left.pgm"
        right = tmp_path / "right.pgm"
        left.write_bytes(encode_pgm(pair.left))
        right.write_bytes(encode_pgm(pair.right))
        out = tmp_path / "out"
        started = time.perf_counter()
        code = main(["depth", "--left", str(left), "--right", str(right), "--out", str(out)])
        elapsed = time.perf_counter() - started
        assert code == 0
        assert (out / "depth.pgm").exists()
        assert elapsed <= 3.0, f"took {elapsed:.2f} s"
        print(f"\n  depth command wall time {elapsed:.2f} s")
