"""Liveness-gated face authentication over an enrollment gallery.

The depth classifier runs first. If it rejects the crop, the outcome is
None and the embedding provider is never invoked; that ordering is the
security property the whole system exists for. Otherwise the face goes to a
pluggable embedding provider and is matched to the nearest enrolled
identity by Euclidean distance, yielding Id(name) within the match
threshold or Unknown beyond it.

The bundled provider is a deterministic stub that stands in for a real 2D
recognition network: it derives a unit vector from the identity tag of its
input plus a small per-image jitter, which gives tight same-identity
clusters and near-orthogonal different-identity embeddings in 128
dimensions.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from stereoface.classifier import DepthClassifier, classify
from stereoface.errors import FileFormatError, ProviderError
from stereoface.imaging import GrayImage, decode_pgm
from stereoface.rng import SplitMix64, mix64

EMBEDDING_DIM = 128

_RESERVED_NAMES = {"unknown", "none"}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def _fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


@dataclass(frozen=True)
class AuthDecision:
    """Exactly one of: an identity match, Unknown, or None (gate closed)."""

    kind: str
    name: str | None = None

    def __post_init__(self):
        if self.kind not in ("id", "unknown", "none"):
            raise ValueError(f"bad decision kind {self.kind!r}")
        if (self.kind == "id") != (self.name is not None):
            raise ValueError("identity decisions carry a name; the others do not")

    @property
    def is_id(self) -> bool:
        return self.kind == "id"

    def label(self) -> str:
        """The class label used in confusion matrices and CLI output."""
        if self.kind == "id":
            return self.name
        return "Unknown" if self.kind == "unknown" else "None"

    def __str__(self) -> str:
        return f"ID {self.name}" if self.kind == "id" else self.label()


UNKNOWN = AuthDecision("unknown")
NONE = AuthDecision("none")


def id_decision(name: str) -> AuthDecision:
    return AuthDecision("id", name)


@dataclass(frozen=True)
class PipelineConfig:
    """Operating points: liveness threshold and embedding match radius."""

    depth_threshold: float
    match_threshold: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.depth_threshold < 1.0:
            raise ValueError(f"depth_threshold must be in (0, 1), got {self.depth_threshold!r}")
        if not (np.isfinite(self.match_threshold) and self.match_threshold >= 0.0):
            raise ValueError(f"match_threshold must be >= 0, got {self.match_threshold!r}")


class EmbeddingProvider:
    """Interface seam for the 2D recognizer: deterministic face -> vector."""

    dim: int = EMBEDDING_DIM

    def embed(self, face_ref: str) -> np.ndarray:
        raise NotImplementedError


class StubProvider(EmbeddingProvider):
    """Deterministic stand-in recognizer keyed on identity tags.

    A face reference reads as ``identity`` or ``identity:variant``. The
    identity fixes a unit direction; the full reference adds a jitter of
    radius 0.05, so two images of one identity sit within 0.1 of each other
    while distinct identities land nearly orthogonal (distance around 1.4).
    """

    def __init__(self, seed: int = 0, dim: int = EMBEDDING_DIM):
        if dim < 2:
            raise ValueError("embedding dimension must be >= 2")
        self.seed = seed
        self.dim = dim

    def _unit(self, key: str) -> np.ndarray:
        stream = SplitMix64(mix64(self.seed ^ _fnv1a64(key)))
        v = stream.normals(self.dim)
        return v / np.linalg.norm(v)

    def embed(self, face_ref: str) -> np.ndarray:
        ref = str(face_ref)
        identity = ref.split(":", 1)[0]
        if not identity:
            raise ProviderError(f"face reference {ref!r} has no identity tag")
        return self._unit("id|" + identity) + 0.05 * self._unit("img|" + ref)


class CountingProvider(EmbeddingProvider):
    """Wrapper that counts embed() calls; used to prove the gate stays closed."""

    def __init__(self, inner: EmbeddingProvider):
        self.inner = inner
        self.dim = inner.dim
        self.calls = 0

    def embed(self, face_ref: str) -> np.ndarray:
        self.calls += 1
        return self.inner.embed(face_ref)


@dataclass(frozen=True, eq=False)
class Gallery:
    """Enrolled identities: name -> one embedding of a fixed dimension."""

    dim: int = EMBEDDING_DIM
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("embedding dimension must be >= 1")
        normalized = {}
        for name, vec in self.entries.items():
            _check_name(name)
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (self.dim,):
                raise ValueError(f"embedding for {name!r} has shape {arr.shape}, want ({self.dim},)")
            arr.setflags(write=False)
            normalized[name] = arr
        object.__setattr__(self, "entries", normalized)


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not name:
        raise ValueError("identity names must be non-empty strings")
    if name.lower() in _RESERVED_NAMES:
        raise ValueError(f"{name!r} is reserved for non-identity outcomes")


def enroll(gallery: Gallery, name: str, face_ref: str, provider: EmbeddingProvider) -> Gallery:
    """Return a new gallery with name -> provider embedding; re-enrolling overwrites."""
    _check_name(name)
    embedding = _safe_embed(provider, face_ref)
    if embedding.shape != (gallery.dim,):
        raise ValueError(
            f"provider returned dimension {embedding.shape}, gallery expects ({gallery.dim},)"
        )
    entries = dict(gallery.entries)
    entries[name] = embedding
    return Gallery(dim=gallery.dim, entries=entries)


def _safe_embed(provider: EmbeddingProvider, face_ref: str) -> np.ndarray:
    try:
        out = provider.embed(face_ref)
    except ProviderError:
        raise
    except Exception as exc:  # surface infrastructure faults, never swallow them
        raise ProviderError(f"embedding provider failed on {face_ref!r}: {exc}") from exc
    return np.asarray(out, dtype=np.float64)


def authenticate(
    depth_crop: GrayImage,
    face_ref: str,
    clf: DepthClassifier,
    provider: EmbeddingProvider,
    gallery: Gallery,
    cfg: PipelineConfig,
) -> tuple[AuthDecision, float]:
    """Run the gated flow; returns the decision and the depth confidence.

    The provider is only consulted after the liveness gate passes. Nearest
    neighbor ties break toward the lexicographically smallest name.
    """
    confidence, is_real = classify(clf, depth_crop)
    if not is_real:
        return NONE, confidence
    embedding = _safe_embed(provider, face_ref)
    best_name = None
    best_dist = np.inf
    for name in sorted(gallery.entries):
        dist = float(np.linalg.norm(embedding - gallery.entries[name]))
        if dist < best_dist:
            best_name, best_dist = name, dist
    if best_name is not None and best_dist <= cfg.match_threshold:
        return id_decision(best_name), confidence
    return UNKNOWN, confidence


@dataclass(frozen=True, eq=False)
class EvalCase:
    """One labeled authentication attempt; truth is an identity name,
    'Unknown', or 'None'."""

    depth_crop: GrayImage
    face_ref: str
    truth: str


@dataclass(frozen=True, eq=False)
class EvalReport:
    labels: tuple[str, ...]
    matrix: np.ndarray  # rows = predicted, columns = truth
    macro_precision: float
    macro_recall: float
    per_class_f1: dict
    macro_f1_mean: float
    macro_f1_harmonic: float

    def to_json_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "matrix": self.matrix.tolist(),
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "per_class_f1": dict(self.per_class_f1),
            "macro_f1_mean": self.macro_f1_mean,
            "macro_f1_harmonic": self.macro_f1_harmonic,
        }


def metrics_from_confusion(matrix: np.ndarray, labels: list[str]) -> EvalReport:
    """Macro metrics over a predicted-by-true count matrix.

    Per-class precision is diagonal / row sum, with empty rows contributing
    1.0 (a class never predicted made no mistakes); recall mirrors that over
    columns. Two F1 aggregations are reported because they genuinely differ:
    the mean of per-class F1 scores and the harmonic mean of the macro
    precision/recall pair.
    """
    m = np.asarray(matrix, dtype=np.int64)
    n = len(labels)
    if m.shape != (n, n):
        raise ValueError(f"matrix shape {m.shape} does not match {n} labels")
    if (m < 0).any():
        raise ValueError("confusion counts must be non-negative")
    precisions = []
    recalls = []
    f1s = {}
    for i, label in enumerate(labels):
        row = m[i].sum()
        col = m[:, i].sum()
        p = m[i, i] / row if row else 1.0
        r = m[i, i] / col if col else 1.0
        precisions.append(p)
        recalls.append(r)
        f1s[label] = 2.0 * p * r / (p + r) if p + r else 0.0
    macro_p = float(np.mean(precisions))
    macro_r = float(np.mean(recalls))
    return EvalReport(
        labels=tuple(labels),
        matrix=m,
        macro_precision=macro_p,
        macro_recall=macro_r,
        per_class_f1=f1s,
        macro_f1_mean=float(np.mean(list(f1s.values()))),
        macro_f1_harmonic=2.0 * macro_p * macro_r / (macro_p + macro_r),
    )


def evaluate_pipeline(
    cases: list[EvalCase],
    clf: DepthClassifier,
    provider: EmbeddingProvider,
    gallery: Gallery,
    cfg: PipelineConfig,
) -> EvalReport:
    """Authenticate every case and summarize as a confusion matrix + metrics.

    Classes are the enrolled identities (sorted) plus Unknown and None;
    every case's truth must be one of them.
    """
    if not cases:
        raise ValueError("empty case list")
    labels = sorted(gallery.entries) + ["Unknown", "None"]
    index = {label: i for i, label in enumerate(labels)}
    for case in cases:
        if case.truth not in index:
            raise ValueError(f"truth {case.truth!r} is not an enrolled identity, Unknown, or None")
    matrix = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for case in cases:
        decision, _ = authenticate(case.depth_crop, case.face_ref, clf, provider, gallery, cfg)
        matrix[index[decision.label()], index[case.truth]] += 1
    return metrics_from_confusion(matrix, labels)


def gallery_to_json(gallery: Gallery) -> str:
    entries = {name: gallery.entries[name].tolist() for name in sorted(gallery.entries)}
    return json.dumps({"version": 1, "dim": gallery.dim, "entries": entries}, sort_keys=True) + "\n"


def gallery_from_json(text: str) -> Gallery:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"gallery is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise FileFormatError("gallery must be a JSON object with version 1")
    if "dim" not in doc or "entries" not in doc:
        raise FileFormatError("gallery needs 'dim' and 'entries' fields")
    return Gallery(dim=int(doc["dim"]), entries=dict(doc["entries"]))


def load_cases(manifest_path: str) -> list[EvalCase]:
    """Read a JSONL case manifest: {depth_crop: pgm path, face: ref, truth: class}.

    Crop paths resolve relative to the manifest file.
    """
    base = os.path.dirname(os.path.abspath(manifest_path))
    cases = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            with open(os.path.join(base, record["depth_crop"]), "rb") as crop_fh:
                crop = decode_pgm(crop_fh.read())
            cases.append(EvalCase(depth_crop=crop, face_ref=record["face"], truth=record["truth"]))
    return cases
