"""Deterministic synthetic stereo scenes with exact ground-truth disparity.

Scenes are textured depth surfaces seen by a calibrated rig: a face is a
fronto-parallel plane with a smooth raised-cosine relief bump, a spoof is a
flat printed photo, optionally tilted about the vertical axis or folded down
the middle into two planes. The left frame samples a procedural value-noise
texture; the right frame is the same texture warped horizontally by the
analytic disparity field d(x, y) = f * T / z(x, y), so the returned
disparity map is exact by construction.

The generator also builds labeled 96x96 training crops by running every
rendered scene through the real matching-and-shaping path, so the training
data carries genuine matcher artifacts.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from stereoface.imaging import (
    CameraRig,
    GrayImage,
    StereoPair,
    decode_pgm,
    encode_pgm,
    normalize_minmax,
    power_law,
    resize_bilinear,
)
from stereoface.rng import SplitMix64
from stereoface.stereo import DisparityMap, MatchParams, compute_disparity, depth_to_gray

SCENE_KINDS = ("face_bump", "flat_photo")

# Value-noise octaves: (lattice spacing px, weight). Spacing ~6 keeps 9x9
# blocks discriminative; the coarser octave breaks up repetition.
_NOISE_OCTAVES = ((6, 0.65), (17, 0.35))

# Face relief footprint as a fraction of frame size (oval, taller than wide).
_FACE_RX_FRAC = 0.15
_FACE_RY_FRAC = 0.33

# Dataset rendering geometry. The baseline is set per scene so the nominal
# disparity lands in NOMINAL_DISPARITY_RANGE regardless of subject distance;
# an integer-step matcher would otherwise lose sub-pixel face relief
# entirely on far subjects with shallow features.
SCENE_WIDTH = 336
SCENE_HEIGHT = 192
DATASET_FOCAL = 300.0
NOMINAL_DISPARITY_RANGE = (55.0, 70.0)
DATASET_MATCH = MatchParams(
    block_radius=4, d_min=32, d_max=88, uniqueness_ratio=1.2, texture_threshold=1e-4
)
CROP_SIDE = 150  # square cut from the matchable interior before resizing
CROP_GAMMA = 0.4
CROP_SIZE = 96

# Randomization ranges for generate_dataset.
DISTANCE_RANGE = (0.5, 1.5)
TILT_RANGE = (-0.3, 0.3)
BUMP_RANGE = (0.03, 0.08)
FOLD_PROBABILITY = 0.3


@dataclass(frozen=True)
class SceneSpec:
    """Parametric description of one synthetic capture."""

    kind: str
    distance: float
    rig: CameraRig
    width: int
    height: int
    tilt: float = 0.0
    bump_depth: float = 0.0
    fold_tilt: float | None = None
    texture_seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if not (np.isfinite(self.distance) and self.distance > 0.0):
            raise ValueError(f"distance must be positive, got {self.distance!r}")
        if not (0.0 <= self.bump_depth < self.distance):
            raise ValueError("need distance > bump_depth >= 0")
        if abs(self.tilt) >= math.pi / 3:
            raise ValueError(f"|tilt| must stay below pi/3, got {self.tilt!r}")
        if self.fold_tilt is not None:
            if self.kind != "flat_photo":
                raise ValueError("fold_tilt applies to flat_photo scenes only")
            if abs(self.fold_tilt) >= math.pi / 3:
                raise ValueError(f"|fold_tilt| must stay below pi/3, got {self.fold_tilt!r}")
        if self.width < 32 or self.height < 32:
            raise ValueError(f"scene must be at least 32x32, got {self.width}x{self.height}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "distance": self.distance,
            "tilt": self.tilt,
            "bump_depth": self.bump_depth,
            "fold_tilt": self.fold_tilt,
            "texture_seed": self.texture_seed,
            "rig": {"focal_length": self.rig.focal_length, "baseline": self.rig.baseline},
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        return SceneSpec(
            kind=d["kind"],
            distance=d["distance"],
            rig=CameraRig(d["rig"]["focal_length"], d["rig"]["baseline"]),
            width=d["width"],
            height=d["height"],
            tilt=d.get("tilt", 0.0),
            bump_depth=d.get("bump_depth", 0.0),
            fold_tilt=d.get("fold_tilt"),
            texture_seed=d.get("texture_seed", 0),
        )


@dataclass(frozen=True, eq=False)
class Sample:
    """One labeled training crop: 96x96 shaped depth image, 1 = real face."""

    depth_crop: GrayImage
    label: int
    scene: SceneSpec | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if (self.depth_crop.width, self.depth_crop.height) != (CROP_SIZE, CROP_SIZE):
            raise ValueError(
                f"depth crop must be {CROP_SIZE}x{CROP_SIZE}, "
                f"got {self.depth_crop.width}x{self.depth_crop.height}"
            )


def value_noise(height: int, width: int, seed: int) -> np.ndarray:
    """Band-limited texture in [0.1, 0.9] from smoothstep-interpolated lattices."""
    out = np.zeros((height, width))
    stream = SplitMix64(seed)
    xs = np.arange(width)
    ys = np.arange(height)
    for spacing, weight in _NOISE_OCTAVES:
        nx = width // spacing + 2
        ny = height // spacing + 2
        lattice = stream.uniforms(nx * ny).reshape(ny, nx)
        gx = xs / spacing
        gy = ys / spacing
        ix = gx.astype(int)
        iy = gy.astype(int)
        tx = gx - ix
        ty = gy - iy
        tx = tx * tx * (3.0 - 2.0 * tx)
        ty = ty * ty * (3.0 - 2.0 * ty)
        top = lattice[iy][:, ix] * (1.0 - tx) + lattice[iy][:, ix + 1] * tx
        bot = lattice[iy + 1][:, ix] * (1.0 - tx) + lattice[iy + 1][:, ix + 1] * tx
        out += weight * (top * (1.0 - ty[:, None]) + bot * ty[:, None])
    return 0.1 + 0.8 * out


def _surface_depth(scene: SceneSpec, ux: np.ndarray, vy: np.ndarray) -> np.ndarray:
    """Depth z(x, y) in meters on a pixel grid centered at the optical axis.

    ux: (n,) horizontal offsets from center in pixels, vy: (m,) vertical.
    Returns an (m, n) grid.
    """
    f = scene.rig.focal_length
    if scene.kind == "face_bump":
        rx = _FACE_RX_FRAC * scene.width
        ry = _FACE_RY_FRAC * scene.height
        rho = np.sqrt((ux[None, :] / rx) ** 2 + (vy[:, None] / ry) ** 2)
        relief = np.where(
            rho < 1.0, scene.bump_depth * 0.5 * (1.0 + np.cos(np.pi * np.minimum(rho, 1.0))), 0.0
        )
        return scene.distance - relief
    # Flat photo: plane(s) through the frame center at `distance`. A yaw
    # tilt t puts the plane z = distance - tan(t) * X, which projects to
    # z(u) = distance / (1 + tan(t) * u / f), linear in u as disparity.
    slope = np.tan(scene.tilt) / f
    if scene.fold_tilt is not None:
        slope_right = np.tan(scene.fold_tilt) / f
        denom = np.where(ux < 0.0, 1.0 + slope * ux, 1.0 + slope_right * ux)
    else:
        denom = 1.0 + slope * ux
    if denom.min() <= 0.0:
        raise ValueError("tilted plane leaves the camera frustum")
    z = scene.distance / denom
    return np.broadcast_to(z[None, :], (len(vy), len(ux))).copy()


def render_stereo(scene: SceneSpec) -> tuple[StereoPair, DisparityMap]:
    """Render a stereo pair plus its exact disparity field.

    The texture lattice extends past the right edge of the left frame so the
    right frame sees genuine surface everywhere, which keeps every in-range
    correspondence findable.
    """
    w, h = scene.width, scene.height
    f, baseline = scene.rig.focal_length, scene.rig.baseline
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0
    vy = np.arange(h) - cy

    pad = 16
    for _ in range(8):
        x_ext = np.arange(w + pad, dtype=np.float64)
        z = _surface_depth(scene, x_ext - cx, vy)
        if z.min() <= 0.0:
            raise ValueError("surface depth must stay positive")
        d_ext = (f * baseline) / z
        s = x_ext[None, :] - d_ext
        if s[:, -1].min() >= w - 1:
            break
        pad *= 2
    else:
        raise ValueError("disparity too large to render: extension did not converge")

    d_img = d_ext[:, :w]
    if d_img.max() >= w:
        raise ValueError(f"max disparity {d_img.max():.1f} px reaches the image width {w}")
    if np.diff(s, axis=1).min() <= 0.0:
        raise ValueError("surface self-occludes under this rig; reduce tilt or relief")

    tex = value_noise(h, w + pad, scene.texture_seed)
    left = tex[:, :w]
    right = np.empty_like(left)
    x_img = np.arange(w, dtype=np.float64)
    for row in range(h):
        right[row] = np.interp(x_img, s[row], tex[row])

    pair = StereoPair(GrayImage(left), GrayImage(right), scene.rig)
    truth = DisparityMap(d_img.copy(), np.ones_like(d_img, dtype=bool))
    return pair, truth


def depth_crop_from_scene(scene: SceneSpec, params: MatchParams = DATASET_MATCH,
                          gamma: float = CROP_GAMMA) -> GrayImage:
    """Full matching-and-shaping path from a scene to a 96x96 classifier input.

    The gray window sits just below the subject plane's nominal disparity,
    mimicking a capture system that windows depth around the detected face.
    Stray mismatches clamp to the window floor instead of stretching the
    normalization range, which would otherwise crush the facial relief into
    a few gray levels.
    """
    pair, _ = render_stereo(scene)
    disparity = compute_disparity(pair, params)
    nominal = scene.rig.focal_length * scene.rig.baseline / scene.distance
    d_lo = np.floor(nominal) - 2.0
    gray = depth_to_gray(disparity, d_lo, d_lo + 48.0)
    x0 = (scene.width - CROP_SIDE) // 2
    y0 = (scene.height - CROP_SIDE) // 2
    if x0 < params.d_max + params.block_radius or y0 < params.block_radius:
        raise ValueError("scene too small for the matchable interior crop")
    crop = GrayImage(gray.pixels[y0 : y0 + CROP_SIDE, x0 : x0 + CROP_SIDE])
    shaped = power_law(normalize_minmax(crop), gamma)
    return resize_bilinear(shaped, CROP_SIZE, CROP_SIZE)


def _dataset_rig(distance: float, nominal_disparity: float) -> CameraRig:
    """Rig whose baseline puts the subject plane at the given disparity."""
    return CameraRig(
        focal_length=DATASET_FOCAL,
        baseline=nominal_disparity * distance / DATASET_FOCAL,
    )


def generate_dataset(n_real: int, n_spoof: int, seed: int) -> list[Sample]:
    """Render n_real face scenes and n_spoof flat-photo scenes as labeled crops.

    Scene parameters are drawn from one seeded stream in a fixed order
    (reals first, then spoofs; per real: distance, bump depth, nominal
    disparity, texture seed; per spoof: distance, tilt, fold coin, fold
    tilt, nominal disparity, texture seed), so equal seeds give bitwise-equal
    datasets.
    """
    if n_real < 0 or n_spoof < 0:
        raise ValueError("sample counts must be >= 0")
    rng = SplitMix64(seed)
    scenes: list[tuple[SceneSpec, int]] = []
    for _ in range(n_real):
        distance = rng.uniform_in(*DISTANCE_RANGE)
        bump = rng.uniform_in(*BUMP_RANGE)
        rig = _dataset_rig(distance, rng.uniform_in(*NOMINAL_DISPARITY_RANGE))
        tseed = rng.next_u64()
        scenes.append(
            (
                SceneSpec(
                    kind="face_bump",
                    distance=distance,
                    bump_depth=bump,
                    texture_seed=tseed,
                    rig=rig,
                    width=SCENE_WIDTH,
                    height=SCENE_HEIGHT,
                ),
                1,
            )
        )
    for _ in range(n_spoof):
        distance = rng.uniform_in(*DISTANCE_RANGE)
        tilt = rng.uniform_in(*TILT_RANGE)
        folded = rng.uniform() < FOLD_PROBABILITY
        fold_tilt = rng.uniform_in(*TILT_RANGE)
        rig = _dataset_rig(distance, rng.uniform_in(*NOMINAL_DISPARITY_RANGE))
        tseed = rng.next_u64()
        scenes.append(
            (
                SceneSpec(
                    kind="flat_photo",
                    distance=distance,
                    tilt=tilt,
                    fold_tilt=fold_tilt if folded else None,
                    texture_seed=tseed,
                    rig=rig,
                    width=SCENE_WIDTH,
                    height=SCENE_HEIGHT,
                ),
                0,
            )
        )
    return [
        Sample(depth_crop=depth_crop_from_scene(scene), label=label, scene=scene)
        for scene, label in scenes
    ]


def write_dataset(samples: list[Sample], out_dir: str) -> str:
    """Write crops as PGM files plus a JSONL manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    lines = []
    for i, sample in enumerate(samples):
        name = f"crop_{i:05d}.pgm"
        with open(os.path.join(out_dir, name), "wb") as fh:
            fh.write(encode_pgm(sample.depth_crop))
        record = {
            "path": name,
            "label": sample.label,
            "scene": sample.scene.to_dict() if sample.scene else None,
        }
        lines.append(json.dumps(record, sort_keys=True))
    with open(manifest_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))
    return manifest_path


def load_dataset(manifest_path: str) -> list[Sample]:
    """Read a manifest written by write_dataset; crop paths resolve relative to it."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    with open(manifest_path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            with open(os.path.join(base, record["path"]), "rb") as crop_fh:
                crop = decode_pgm(crop_fh.read())
            scene = SceneSpec.from_dict(record["scene"]) if record.get("scene") else None
            samples.append(Sample(depth_crop=crop, label=record["label"], scene=scene))
    return samples
