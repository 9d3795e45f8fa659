"""Dense block-matching disparity along horizontal epipolar lines.

For each left pixel the matcher minimizes the sum of absolute differences
between square blocks in the left frame and disparity-shifted blocks in the
right frame, then converts winning offsets to metric depth via
z = focal_length * baseline / d. Validity is conservative: a pixel counts
only when every candidate block in the full search range stays inside both
frames, the left block has enough texture, and the winning cost is
unambiguous.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from stereoface.errors import FileFormatError
from stereoface.imaging import CameraRig, GrayImage, StereoPair

_SDM_MAGIC = b"SDM1"

# Below this disparity the depth quotient is treated as unresolvable.
D_EPSILON = 1e-6


@dataclass(frozen=True)
class MatchParams:
    """Block matcher knobs.

    block_radius r gives a (2r+1)^2 window. Disparity candidates run over
    [d_min, d_max] inclusive. A match is discarded when
    best_cost * uniqueness_ratio exceeds the best cost outside the winner's
    immediate neighborhood, or when the left block's intensity variance is
    below texture_threshold.
    """

    block_radius: int = 4
    d_min: int = 0
    d_max: int = 64
    uniqueness_ratio: float = 1.2
    texture_threshold: float = 1e-4

    def __post_init__(self):
        if self.block_radius < 0:
            raise ValueError(f"block_radius must be >= 0, got {self.block_radius}")
        if not (0 <= self.d_min < self.d_max):
            raise ValueError(f"need 0 <= d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if not (np.isfinite(self.uniqueness_ratio) and self.uniqueness_ratio >= 1.0):
            raise ValueError(f"uniqueness_ratio must be >= 1, got {self.uniqueness_ratio!r}")
        if not (np.isfinite(self.texture_threshold) and self.texture_threshold >= 0.0):
            raise ValueError(f"texture_threshold must be >= 0, got {self.texture_threshold!r}")


@dataclass(frozen=True, eq=False)
class DisparityMap:
    """Per-pixel horizontal offsets in pixels; NaN marks invalid pixels."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2 or values.shape != valid.shape:
            raise ValueError(
                f"values/valid must be matching 2-D arrays, got {values.shape} vs {valid.shape}"
            )
        picked = values[valid]
        if picked.size and (not np.isfinite(picked).all() or picked.min() < 0.0):
            raise ValueError("valid disparities must be finite and >= 0")
        values = np.where(valid, values, np.nan)
        values.setflags(write=False)
        valid = valid.copy()
        valid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel metric depth in meters; NaN marks invalid pixels."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2 or values.shape != valid.shape:
            raise ValueError(
                f"values/valid must be matching 2-D arrays, got {values.shape} vs {valid.shape}"
            )
        picked = values[valid]
        if picked.size and (not np.isfinite(picked).all() or picked.min() <= 0.0):
            raise ValueError("valid depths must be finite and > 0")
        values = np.where(valid, values, np.nan)
        values.setflags(write=False)
        valid = valid.copy()
        valid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def _window_sum(a: np.ndarray, radius: int) -> np.ndarray:
    """Sliding (2r+1)^2 box sums for fully interior window positions."""
    k = 2 * radius + 1
    ii = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    np.cumsum(a, axis=0, out=ii[1:, 1:])
    np.cumsum(ii[1:, 1:], axis=1, out=ii[1:, 1:])
    return ii[k:, k:] - ii[:-k, k:] - ii[k:, :-k] + ii[:-k, :-k]


def compute_disparity(pair: StereoPair, params: MatchParams) -> DisparityMap:
    """Dense SAD block matching over a rectified pair.

    Ties between equal costs resolve to the smallest disparity, so the
    output is a deterministic function of the inputs.
    """
    left = pair.left.pixels
    right = pair.right.pixels
    h, w = left.shape
    r = params.block_radius
    k = 2 * r + 1
    if k > min(h, w):
        raise ValueError(f"{k}x{k} block does not fit a {w}x{h} image")
    if params.d_max >= w:
        raise ValueError(f"d_max {params.d_max} must be below image width {w}")

    values = np.full((h, w), np.nan)
    valid = np.zeros((h, w), dtype=bool)

    # Only pixels whose whole candidate range stays in-bounds can be valid,
    # so the cost volume covers just that interior.
    y0, y1 = r, h - r
    x0, x1 = params.d_max + r, w - r
    if x0 >= x1 or y0 >= y1:
        return DisparityMap(values, valid)

    n_d = params.d_max - params.d_min + 1
    cost = np.empty((n_d, y1 - y0, x1 - x0))
    for i, d in enumerate(range(params.d_min, params.d_max + 1)):
        ad = np.abs(left[:, d:] - right[:, : w - d])
        sums = _window_sum(ad, r)  # column j holds the window at left x = d + r + j
        cost[i] = sums[:, x0 - d - r : x1 - d - r]

    best_idx = cost.argmin(axis=0)  # first minimum: smallest d wins
    best = np.take_along_axis(cost, best_idx[None], axis=0)[0]

    # Texture gate: variance of the left block.
    m1 = _window_sum(left, r) / (k * k)
    m2 = _window_sum(left * left, r) / (k * k)
    variance = (m2 - m1 * m1)[:, x0 - r : x1 - r]
    ok = variance >= params.texture_threshold

    # Uniqueness gate: winner must beat everything outside its +-1 band.
    for off in (-1, 0, 1):
        neighbor = np.clip(best_idx + off, 0, n_d - 1)
        np.put_along_axis(cost, neighbor[None], np.inf, axis=0)
    second = cost.min(axis=0)
    ok &= ~(np.isfinite(second) & (best * params.uniqueness_ratio > second))

    valid[y0:y1, x0:x1] = ok
    values[y0:y1, x0:x1] = np.where(ok, params.d_min + best_idx.astype(np.float64), np.nan)
    return DisparityMap(values, valid)


def disparity_to_depth(dmap: DisparityMap, rig: CameraRig, d_epsilon: float = D_EPSILON) -> DepthMap:
    """Convert disparities to metric depth, z = f * T / d.

    Pixels with d <= d_epsilon are masked invalid rather than raising, since
    vanishing disparity just means the point is beyond stereo resolution.
    """
    with np.errstate(invalid="ignore", divide="ignore"):
        ok = dmap.valid & (dmap.values > d_epsilon)
        z = np.where(ok, (rig.focal_length * rig.baseline) / dmap.values, np.nan)
    return DepthMap(z, ok)


def depth_to_gray(dmap: DisparityMap, d_lo: float, d_hi: float) -> GrayImage:
    """Render disparities as intensities: nearer surfaces come out brighter.

    Disparity maps linearly from [d_lo, d_hi] onto [0, 1] with clamping;
    invalid pixels render as black.
    """
    if not (np.isfinite(d_lo) and np.isfinite(d_hi) and d_lo < d_hi):
        raise ValueError(f"need d_lo < d_hi, got [{d_lo!r}, {d_hi!r}]")
    with np.errstate(invalid="ignore"):
        t = np.clip((dmap.values - d_lo) / (d_hi - d_lo), 0.0, 1.0)
    return GrayImage(np.where(dmap.valid, t, 0.0))


def encode_sdm(values: np.ndarray, valid: np.ndarray) -> bytes:
    """Serialize a real-valued map as magic SDM1, u32 width/height, LE float64 grid.

    Invalid pixels are stored as NaN.
    """
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    grid = np.where(np.asarray(valid, dtype=bool), values, np.nan)
    return struct.pack("<4sII", _SDM_MAGIC, w, h) + grid.astype("<f8").tobytes()


def decode_sdm(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Parse an SDM1 byte stream back into (values, valid)."""
    if len(data) < 12:
        raise FileFormatError("raw map shorter than its 12-byte header")
    magic, w, h = struct.unpack_from("<4sII", data)
    if magic != _SDM_MAGIC:
        raise FileFormatError(f"bad raw map magic {magic!r}")
    need = 12 + 8 * w * h
    if len(data) != need:
        raise FileFormatError(f"raw map payload is {len(data) - 12} bytes, expected {8 * w * h}")
    grid = np.frombuffer(data, dtype="<f8", offset=12).reshape(h, w).astype(np.float64)
    return grid, ~np.isnan(grid)
