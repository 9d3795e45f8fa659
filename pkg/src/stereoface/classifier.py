"""Training and threshold calibration for the depth liveness classifier.

Training is plain mini-batch Adam on binary cross-entropy, fully seeded:
the dataset shuffle, the weight init, and every epoch permutation come from
one SplitMix64 stream, so a (dataset, config) pair reproduces the same model
bit for bit.

The operating threshold is not fixed at 0.5. A sweep evaluates accuracy,
precision, and both error rates over a grid of cutoffs, and selection picks
the smallest threshold whose spoof-acceptance rate (FPR) stays within a
budget, zero by default. That prefers rejecting a real face (a retry for the
user) over ever admitting a spoof.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from stereoface.imaging import GrayImage
from stereoface.nn import Adam, Network, bce_loss, build_model, decode_weights, encode_weights
from stereoface.rng import SplitMix64
from stereoface.synth import CROP_SIZE, Sample


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (np.isfinite(self.lr) and self.lr >= 0.0):
            raise ValueError(f"lr must be finite and >= 0, got {self.lr!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction!r}")


@dataclass(frozen=True)
class EpochStats:
    """Mean BCE and accuracy-at-0.5 for one epoch, train and held-out."""

    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    accuracy: float
    precision: float
    fpr: float
    fnr: float


@dataclass(frozen=True)
class ThresholdSweep:
    points: tuple[SweepPoint, ...]

    def __post_init__(self):
        ts = [p.threshold for p in self.points]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("sweep thresholds must be strictly increasing")


@dataclass(frozen=True, eq=False)
class DepthClassifier:
    """A trained network plus its calibrated accept threshold."""

    model: Network
    threshold: float

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold!r}")


def _check_samples(samples: list[Sample]) -> np.ndarray:
    labels = np.array([s.label for s in samples])
    if labels.size == 0:
        raise ValueError("empty sample list")
    if labels.min() == labels.max():
        raise ValueError("samples must contain both classes")
    return labels


def _split_with_stream(samples: list[Sample], rng: SplitMix64,
                       val_fraction: float) -> tuple[list[Sample], list[Sample]]:
    n = len(samples)
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    order = rng.permutation(n)
    n_val = min(max(int(round(n * val_fraction)), 1), n - 1)
    shuffled = [samples[i] for i in order]
    return shuffled[: n - n_val], shuffled[n - n_val :]


def split_train_val(samples: list[Sample], seed: int,
                    val_fraction: float) -> tuple[list[Sample], list[Sample]]:
    """Seeded shuffle, then hold out the trailing val_fraction.

    The same (seed, val_fraction) always yields the split used inside
    train(), so later sweeps agree on what "validation" means.
    """
    return _split_with_stream(samples, SplitMix64(seed), val_fraction)


def _as_input(crop: GrayImage) -> np.ndarray:
    return crop.pixels[:, :, None]


def train(samples: list[Sample], config: TrainConfig) -> tuple[Network, list[EpochStats]]:
    """Train the liveness network; returns the model and per-epoch stats.

    Train loss/accuracy are accumulated over the samples as they are seen
    during the epoch; validation is evaluated after each epoch.
    """
    _check_samples(samples)
    for s in samples:
        if (s.depth_crop.width, s.depth_crop.height) != (CROP_SIZE, CROP_SIZE):
            raise ValueError("all crops must be 96x96")

    rng = SplitMix64(config.seed)
    train_set, val_set = _split_with_stream(samples, rng, config.val_fraction)
    net = build_model(rng.next_u64())
    optimizer = Adam(net.params(), lr=config.lr)
    stats: list[EpochStats] = []
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train_set))
        loss_sum = 0.0
        hit_sum = 0
        for start in range(0, len(perm), config.batch_size):
            batch = perm[start : start + config.batch_size]
            net.zero_grads()
            inv = 1.0 / len(batch)
            for i in batch:
                sample = train_set[i]
                p = net.forward(_as_input(sample.depth_crop))
                loss, dp = bce_loss(p, sample.label)
                net.backward(dp * inv)
                loss_sum += loss
                hit_sum += int((p >= 0.5) == bool(sample.label))
            optimizer.step(net.grads())
        val_loss, val_acc = _evaluate(net, val_set)
        stats.append(
            EpochStats(
                epoch=epoch,
                train_loss=loss_sum / len(train_set),
                val_loss=val_loss,
                train_acc=hit_sum / len(train_set),
                val_acc=val_acc,
            )
        )
    return net, stats


def _evaluate(net: Network, samples: list[Sample]) -> tuple[float, float]:
    loss_sum = 0.0
    hits = 0
    for s in samples:
        p = net.forward(_as_input(s.depth_crop))
        loss_sum += bce_loss(p, s.label)[0]
        hits += int((p >= 0.5) == bool(s.label))
    n = max(len(samples), 1)
    return loss_sum / n, hits / n


def confidences(model: Network, samples: list[Sample]) -> np.ndarray:
    """Forward every crop once; returns probabilities aligned with samples."""
    return np.array([model.forward(_as_input(s.depth_crop)) for s in samples])


def metrics_at_threshold(conf: np.ndarray, labels: np.ndarray, threshold: float) -> SweepPoint:
    """Confusion counts of the accept rule conf >= threshold.

    Precision with zero accepted samples is 1.0 by convention, keeping sweep
    curves total over the whole (0, 1) range.
    """
    predicted = conf >= threshold
    actual = labels == 1
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    tn = int(np.sum(~predicted & ~actual))
    n_pos = tp + fn
    n_neg = fp + tn
    return SweepPoint(
        threshold=threshold,
        accuracy=(tp + tn) / (n_pos + n_neg),
        precision=tp / (tp + fp) if tp + fp else 1.0,
        fpr=fp / n_neg,
        fnr=fn / n_pos,
    )


def sweep_thresholds(model: Network, samples: list[Sample], grid: int = 99) -> ThresholdSweep:
    """Evaluate the accept rule on `grid` evenly spaced thresholds in (0, 1)."""
    if grid < 2:
        raise ValueError(f"grid must be >= 2, got {grid}")
    labels = _check_samples(samples)
    conf = confidences(model, samples)
    points = tuple(
        metrics_at_threshold(conf, labels, (i + 1) / (grid + 1)) for i in range(grid)
    )
    return ThresholdSweep(points)


def select_threshold(sweep: ThresholdSweep, max_fpr: float = 0.0) -> float | None:
    """Smallest swept threshold whose spoof-acceptance rate is within budget.

    Smallest wins so real faces see the fewest rejections compatible with
    the constraint. Returns None when no point qualifies.
    """
    if not sweep.points:
        raise ValueError("empty sweep")
    for point in sweep.points:
        if point.fpr <= max_fpr:
            return point.threshold
    return None


def apply_threshold(confidence: float, threshold: float) -> bool:
    """Accept rule: a confidence exactly at the threshold counts as real."""
    return confidence >= threshold


def classify(clf: DepthClassifier, crop: GrayImage) -> tuple[float, bool]:
    """Confidence that the crop shows a real face, and the thresholded call."""
    if (crop.width, crop.height) != (CROP_SIZE, CROP_SIZE):
        raise ValueError(f"expected a {CROP_SIZE}x{CROP_SIZE} crop, got {crop.width}x{crop.height}")
    confidence = clf.model.forward(_as_input(crop))
    return confidence, apply_threshold(confidence, clf.threshold)


def _fmt(x: float) -> str:
    return format(x, ".6g")


def epoch_stats_csv(stats: list[EpochStats]) -> str:
    lines = ["epoch,train_loss,val_loss,train_acc,val_acc"]
    for s in stats:
        lines.append(
            f"{s.epoch},{_fmt(s.train_loss)},{_fmt(s.val_loss)},"
            f"{_fmt(s.train_acc)},{_fmt(s.val_acc)}"
        )
    return "\n".join(lines) + "\n"


def sweep_csv(sweep: ThresholdSweep) -> str:
    lines = ["threshold,accuracy,precision,fpr,fnr"]
    for p in sweep.points:
        lines.append(
            f"{_fmt(p.threshold)},{_fmt(p.accuracy)},{_fmt(p.precision)},"
            f"{_fmt(p.fpr)},{_fmt(p.fnr)}"
        )
    return "\n".join(lines) + "\n"


def save_classifier(clf: DepthClassifier, weights_path: str, threshold_path: str) -> None:
    """Persist as a weight file plus a JSON sidecar holding the threshold."""
    with open(weights_path, "wb") as fh:
        fh.write(encode_weights(clf.model))
    with open(threshold_path, "w", encoding="ascii", newline="\n") as fh:
        json.dump({"threshold": clf.threshold}, fh)
        fh.write("\n")


def load_classifier(weights_path: str, threshold_path: str) -> DepthClassifier:
    with open(weights_path, "rb") as fh:
        model = decode_weights(fh.read())
    with open(threshold_path, "r", encoding="ascii") as fh:
        sidecar = json.load(fh)
    return DepthClassifier(model=model, threshold=float(sidecar["threshold"]))
