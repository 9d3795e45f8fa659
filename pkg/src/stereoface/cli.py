"""Command-line workflows: synthesize, match, train, calibrate, evaluate, authenticate.

Every subcommand resolves its settings as flags > config file > built-in
defaults, validates them before any work starts, and echoes the effective
configuration to a run_config.json sidecar next to its outputs. Commands
either write every promised artifact and exit 0, or clean up partial files
and exit nonzero:

    0  success
    2  invalid arguments or configuration
    3  missing or malformed input file
    4  constraint unsatisfiable (no threshold meets the FPR budget)
    5  embedding provider failure
    1  anything unexpected
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from stereoface import classifier as clf_mod
from stereoface import pipeline as pipe_mod
from stereoface import report
from stereoface import synth
from stereoface.errors import FileFormatError, PgmDecodeError, ProviderError
from stereoface.imaging import CameraRig, GrayImage, StereoPair, decode_pgm, encode_pgm, \
    normalize_minmax, power_law
from stereoface.nn import decode_weights, encode_weights
from stereoface.stereo import MatchParams, compute_disparity, depth_to_gray, \
    disparity_to_depth, encode_sdm

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_UNSATISFIABLE = 4
EXIT_PROVIDER = 5

DEFAULTS = {
    "seed": 0,
    "rig": {"focal_length": 500.0, "baseline": 0.1},
    "match": {
        "block_radius": 4,
        "d_min": 0,
        "d_max": 64,
        "uniqueness_ratio": 1.2,
        "texture_threshold": 1e-4,
    },
    "gamma": 0.4,
    "train": {"epochs": 30, "batch_size": 16, "lr": 1e-3, "val_fraction": 0.2},
    "sweep": {"grid": 99, "max_fpr": 0.0},
    "pipeline": {"match_threshold": 1.0, "provider_seed": 0, "embedding_dim": 128},
}


class ThresholdNotFound(Exception):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(args: argparse.Namespace) -> dict:
    """Defaults, then the --config file, then explicit flags."""
    cfg = DEFAULTS
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FileFormatError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ValueError("config file must hold a JSON object")
        cfg = _merge(cfg, file_cfg)
    overrides: dict = {}
    flag_map = {
        "seed": ("seed",),
        "gamma": ("gamma",),
        "focal_length": ("rig", "focal_length"),
        "baseline": ("rig", "baseline"),
        "block_radius": ("match", "block_radius"),
        "d_min": ("match", "d_min"),
        "d_max": ("match", "d_max"),
        "uniqueness_ratio": ("match", "uniqueness_ratio"),
        "texture_threshold": ("match", "texture_threshold"),
        "epochs": ("train", "epochs"),
        "batch_size": ("train", "batch_size"),
        "lr": ("train", "lr"),
        "val_fraction": ("train", "val_fraction"),
        "grid": ("sweep", "grid"),
        "max_fpr": ("sweep", "max_fpr"),
        "match_threshold": ("pipeline", "match_threshold"),
        "provider_seed": ("pipeline", "provider_seed"),
    }
    for flag, path in flag_map.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = overrides
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    cfg = _merge(cfg, overrides)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    """Instantiate every typed sub-config so bad values fail before any work."""
    _rig(cfg)
    _match_params(cfg)
    _train_config(cfg)
    if not (0.0 < cfg["gamma"] and np.isfinite(cfg["gamma"])):
        raise ValueError(f"gamma must be finite and positive, got {cfg['gamma']!r}")
    if cfg["sweep"]["grid"] < 2:
        raise ValueError("sweep.grid must be >= 2")
    if not 0.0 <= cfg["sweep"]["max_fpr"] <= 1.0:
        raise ValueError("sweep.max_fpr must be in [0, 1]")
    if cfg["pipeline"]["match_threshold"] < 0.0:
        raise ValueError("pipeline.match_threshold must be >= 0")


def _rig(cfg: dict) -> CameraRig:
    return CameraRig(cfg["rig"]["focal_length"], cfg["rig"]["baseline"])


def _match_params(cfg: dict) -> MatchParams:
    m = cfg["match"]
    return MatchParams(
        block_radius=int(m["block_radius"]),
        d_min=int(m["d_min"]),
        d_max=int(m["d_max"]),
        uniqueness_ratio=float(m["uniqueness_ratio"]),
        texture_threshold=float(m["texture_threshold"]),
    )


def _train_config(cfg: dict) -> clf_mod.TrainConfig:
    t = cfg["train"]
    return clf_mod.TrainConfig(
        epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]),
        lr=float(t["lr"]),
        seed=int(cfg["seed"]),
        val_fraction=float(t["val_fraction"]),
    )


class OutputSet:
    """Tracks written artifacts so failed commands do not leave partial files."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.written: list[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_bytes(self, name: str, data: bytes) -> str:
        target = self.path(name)
        with open(target, "wb") as fh:
            fh.write(data)
        self.written.append(target)
        return target

    def write_text(self, name: str, text: str) -> str:
        return self.write_bytes(name, text.encode("utf-8"))

    def register(self, name: str) -> str:
        target = self.path(name)
        self.written.append(target)
        return target

    def discard(self) -> None:
        for target in self.written:
            try:
                os.remove(target)
            except OSError:
                pass

    def write_sidecar(self, command: str, cfg: dict, extra: dict | None = None) -> None:
        doc = {"command": command, "config": cfg}
        if extra:
            doc.update(extra)
        self.write_text("run_config.json", json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _read_pgm(path: str) -> GrayImage:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def _read_weights(path: str):
    with open(path, "rb") as fh:
        return decode_weights(fh.read())


def _read_threshold(args) -> float:
    if getattr(args, "threshold", None) is not None:
        value = float(args.threshold)
    else:
        if not getattr(args, "threshold_file", None):
            raise ValueError("provide --threshold or --threshold-file")
        with open(args.threshold_file, "r", encoding="utf-8") as fh:
            try:
                value = float(json.load(fh)["threshold"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FileFormatError(f"bad threshold sidecar: {exc}") from exc
    if not 0.0 < value < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {value}")
    return value


def _read_gallery(path: str) -> pipe_mod.Gallery:
    with open(path, "r", encoding="utf-8") as fh:
        return pipe_mod.gallery_from_json(fh.read())


def _provider(cfg: dict) -> pipe_mod.StubProvider:
    return pipe_mod.StubProvider(
        seed=int(cfg["pipeline"]["provider_seed"]),
        dim=int(cfg["pipeline"]["embedding_dim"]),
    )


def cmd_synth(args) -> int:
    cfg = load_config(args)
    if args.real < 0 or args.spoof < 0:
        raise ValueError("--real and --spoof must be >= 0")
    outputs = OutputSet(args.out)
    try:
        samples = synth.generate_dataset(args.real, args.spoof, int(cfg["seed"]))
        outputs.register("manifest.jsonl")
        for i in range(len(samples)):
            outputs.register(f"crop_{i:05d}.pgm")
        synth.write_dataset(samples, args.out)
        outputs.write_sidecar("synth", cfg, {"real": args.real, "spoof": args.spoof})
    except BaseException:
        outputs.discard()
        raise
    print(f"wrote {args.real} real + {args.spoof} spoof crops to {args.out}")
    return EXIT_OK


def cmd_depth(args) -> int:
    cfg = load_config(args)
    rig = _rig(cfg)
    params = _match_params(cfg)
    left = _read_pgm(args.left)
    right = _read_pgm(args.right)
    if (left.width, left.height) != (right.width, right.height):
        raise ValueError(
            f"stereo frames differ in size: left {left.width}x{left.height}, "
            f"right {right.width}x{right.height}"
        )
    pair = StereoPair(left, right, rig)
    outputs = OutputSet(args.out)
    try:
        started = time.perf_counter()
        disparity = compute_disparity(pair, params)
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        gray = depth_to_gray(disparity, params.d_min, params.d_max)
        shaped = power_law(normalize_minmax(gray), float(cfg["gamma"]))
        depth = disparity_to_depth(disparity, rig)
        outputs.write_bytes("depth.pgm", encode_pgm(shaped))
        outputs.write_bytes("disparity.sdm", encode_sdm(disparity.values, disparity.valid))
        outputs.write_bytes("depth.sdm", encode_sdm(depth.values, depth.valid))
        outputs.write_sidecar("depth", cfg, {"left": args.left, "right": args.right})
    except BaseException:
        outputs.discard()
        raise
    print(f"wrote depth map artifacts to {args.out}")
    if args.time:
        print(f"elapsed_ms={elapsed_ms:.1f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    train_cfg = _train_config(cfg)
    samples = synth.load_dataset(args.data)
    outputs = OutputSet(args.out)
    try:
        net, stats = clf_mod.train(samples, train_cfg)
        outputs.write_bytes("model.slnn", encode_weights(net))
        outputs.write_text("training_stats.csv", clf_mod.epoch_stats_csv(stats))
        report.save_loss_curves(stats, outputs.register("loss_curves.png"))
        outputs.write_sidecar("train", cfg, {"data": args.data, "n_samples": len(samples)})
    except BaseException:
        outputs.discard()
        raise
    last = stats[-1]
    print(
        f"trained {train_cfg.epochs} epochs on {len(samples)} samples: "
        f"train_loss={last.train_loss:.4f} val_acc={last.val_acc:.4f}"
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    train_cfg = _train_config(cfg)
    net = _read_weights(args.weights)
    samples = synth.load_dataset(args.data)
    if args.all:
        subjects = samples
    else:
        _, subjects = clf_mod.split_train_val(samples, train_cfg.seed, train_cfg.val_fraction)
    sweep = clf_mod.sweep_thresholds(net, subjects, grid=int(cfg["sweep"]["grid"]))
    chosen = clf_mod.select_threshold(sweep, max_fpr=float(cfg["sweep"]["max_fpr"]))
    outputs = OutputSet(args.out)
    try:
        if chosen is None:
            raise ThresholdNotFound(
                f"no threshold on the grid keeps FPR <= {cfg['sweep']['max_fpr']}"
            )
        outputs.write_text("threshold_sweep.csv", clf_mod.sweep_csv(sweep))
        report.save_threshold_curves(
            sweep, outputs.register("threshold_sweep.png"), selected=chosen
        )
        outputs.write_text("threshold.json", json.dumps({"threshold": chosen}) + "\n")
        outputs.write_sidecar(
            "sweep", cfg, {"data": args.data, "weights": args.weights, "split": "all" if args.all else "val"}
        )
    except BaseException:
        outputs.discard()
        raise
    print(f"selected_threshold={chosen:g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    net = _read_weights(args.weights)
    threshold = _read_threshold(args)
    gallery = _read_gallery(args.gallery)
    cases = pipe_mod.load_cases(args.cases)
    clf = clf_mod.DepthClassifier(model=net, threshold=threshold)
    pipe_cfg = pipe_mod.PipelineConfig(
        depth_threshold=threshold, match_threshold=float(cfg["pipeline"]["match_threshold"])
    )
    outputs = OutputSet(args.out)
    try:
        result = pipe_mod.evaluate_pipeline(cases, clf, _provider(cfg), gallery, pipe_cfg)
        outputs.write_text(
            "metrics.json", json.dumps(result.to_json_dict(), sort_keys=True, indent=2) + "\n"
        )
        report.save_confusion_matrix(
            result.matrix, list(result.labels), outputs.register("confusion_matrix.png")
        )
        outputs.write_sidecar("eval", cfg, {"cases": args.cases, "n_cases": len(cases)})
    except BaseException:
        outputs.discard()
        raise
    print(
        f"evaluated {len(cases)} cases: macro_precision={result.macro_precision:.4f} "
        f"macro_recall={result.macro_recall:.4f}"
    )
    return EXIT_OK


def cmd_enroll(args) -> int:
    cfg = load_config(args)
    if os.path.exists(args.gallery):
        gallery = _read_gallery(args.gallery)
    else:
        gallery = pipe_mod.Gallery(dim=int(cfg["pipeline"]["embedding_dim"]))
    gallery = pipe_mod.enroll(gallery, args.name, args.face, _provider(cfg))
    with open(args.gallery, "w", encoding="ascii", newline="\n") as fh:
        fh.write(pipe_mod.gallery_to_json(gallery))
    print(f"enrolled {args.name!r}; gallery size is now {len(gallery.entries)}")
    return EXIT_OK


def cmd_auth(args) -> int:
    cfg = load_config(args)
    net = _read_weights(args.weights)
    threshold = _read_threshold(args)
    gallery = _read_gallery(args.gallery)
    crop = _read_pgm(args.crop)
    clf = clf_mod.DepthClassifier(model=net, threshold=threshold)
    pipe_cfg = pipe_mod.PipelineConfig(
        depth_threshold=threshold, match_threshold=float(cfg["pipeline"]["match_threshold"])
    )
    decision, confidence = pipe_mod.authenticate(
        crop, args.face, clf, _provider(cfg), gallery, pipe_cfg
    )
    print(decision)
    print(f"depth_confidence={confidence:.6g}")
    return EXIT_OK


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file merged under built-in defaults")
    parser.add_argument("--seed", type=int, help="master seed for all randomized steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereoface",
        description="Stereo-depth liveness gating for face authentication.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a labeled synthetic depth-crop dataset")
    _add_config_flags(p)
    p.add_argument("--real", type=int, required=True, help="number of real-face scenes")
    p.add_argument("--spoof", type=int, required=True, help="number of flat-photo scenes")
    p.add_argument("--out", required=True, help="output directory for crops + manifest.jsonl")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("depth", help="compute a depth map from a rectified PGM pair")
    _add_config_flags(p)
    p.add_argument("--left", required=True, help="left frame (binary PGM)")
    p.add_argument("--right", required=True, help="right frame (binary PGM)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--gamma", type=float, help="power-law exponent for contrast shaping")
    p.add_argument("--block-radius", dest="block_radius", type=int,
                   help="matcher block radius in pixels (window 2r+1)")
    p.add_argument("--d-min", dest="d_min", type=int, help="smallest disparity candidate, pixels")
    p.add_argument("--d-max", dest="d_max", type=int, help="largest disparity candidate, pixels")
    p.add_argument("--uniqueness-ratio", dest="uniqueness_ratio", type=float,
                   help="reject matches unless best*ratio <= second-best cost")
    p.add_argument("--texture-threshold", dest="texture_threshold", type=float,
                   help="minimum block intensity variance")
    p.add_argument("--focal-length", dest="focal_length", type=float,
                   help="focal length in pixels")
    p.add_argument("--baseline", dest="baseline", type=float, help="camera baseline in meters")
    p.add_argument("--time", action="store_true", help="print matcher wall-clock milliseconds")
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("train", help="train the liveness classifier on a dataset manifest")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="manifest.jsonl from the synth command")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="mini-batch size")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--val-fraction", dest="val_fraction", type=float,
                   help="held-out fraction in (0, 1)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="sweep decision thresholds and pick an operating point")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="manifest.jsonl with labeled crops")
    p.add_argument("--weights", required=True, help="trained model.slnn")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--grid", type=int, help="number of evenly spaced thresholds")
    p.add_argument("--max-fpr", dest="max_fpr", type=float,
                   help="largest acceptable spoof-acceptance rate")
    p.add_argument("--all", action="store_true",
                   help="sweep the whole manifest instead of the validation split")
    p.add_argument("--val-fraction", dest="val_fraction", type=float,
                   help="held-out fraction used to recover the validation split")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="run the gated pipeline over a case manifest")
    _add_config_flags(p)
    p.add_argument("--cases", required=True, help="JSONL cases: depth_crop, face, truth")
    p.add_argument("--weights", required=True, help="trained model.slnn")
    p.add_argument("--threshold-file", dest="threshold_file", help="threshold.json from sweep")
    p.add_argument("--threshold", type=float, help="explicit decision threshold in (0, 1)")
    p.add_argument("--gallery", required=True, help="gallery JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--match-threshold", dest="match_threshold", type=float,
                   help="largest embedding distance that still matches")
    p.add_argument("--provider-seed", dest="provider_seed", type=int,
                   help="seed for the stub embedding provider")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("enroll", help="add an identity to a gallery file")
    _add_config_flags(p)
    p.add_argument("--gallery", required=True, help="gallery JSON file (created if missing)")
    p.add_argument("--name", required=True, help="identity name")
    p.add_argument("--face", required=True, help="face reference (identity[:variant])")
    p.add_argument("--provider-seed", dest="provider_seed", type=int,
                   help="seed for the stub embedding provider")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("auth", help="authenticate one depth crop + face reference")
    _add_config_flags(p)
    p.add_argument("--crop", required=True, help="96x96 depth crop (binary PGM)")
    p.add_argument("--face", required=True, help="face reference (identity[:variant])")
    p.add_argument("--weights", required=True, help="trained model.slnn")
    p.add_argument("--threshold-file", dest="threshold_file", help="threshold.json from sweep")
    p.add_argument("--threshold", type=float, help="explicit decision threshold in (0, 1)")
    p.add_argument("--gallery", required=True, help="gallery JSON file")
    p.add_argument("--match-threshold", dest="match_threshold", type=float,
                   help="largest embedding distance that still matches")
    p.add_argument("--provider-seed", dest="provider_seed", type=int,
                   help="seed for the stub embedding provider")
    p.set_defaults(func=cmd_auth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except (PgmDecodeError, FileFormatError, json.JSONDecodeError, OSError) as exc:
        print(f"error: bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ThresholdNotFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSATISFIABLE
    except ProviderError as exc:
        print(f"error: provider: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # partial outputs were already cleaned up
        print(f"error: internal: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
