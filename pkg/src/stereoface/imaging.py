"""Grayscale raster images, bit-exact PGM I/O, and intensity transforms.

Intensities are real-valued in [0, 1] everywhere inside the pipeline; 8-bit
quantization happens only at the file boundary. The binary PGM writer emits
one canonical layout so that encoding is byte-exact across platforms, while
the reader tolerates the usual whitespace and '#'-comment freedom.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stereoface.errors import PgmDecodeError

_WHITESPACE = b" \t\n\r\x0b\x0c"


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Immutable grayscale image, row-major float64 intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"expected a 2-D intensity array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image dimensions must be >= 1, got {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("image intensities must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the intensities."""
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class CameraRig:
    """Calibrated two-camera geometry: focal length in pixels, baseline in meters."""

    focal_length: float
    baseline: float

    def __post_init__(self):
        for name in ("focal_length", "baseline"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0.0):
                raise ValueError(f"{name} must be finite and positive, got {v!r}")


@dataclass(frozen=True, eq=False)
class StereoPair:
    """Rectified left/right frame pair sharing one rig."""

    left: GrayImage
    right: GrayImage
    rig: CameraRig

    def __post_init__(self):
        if (self.left.width, self.left.height) != (self.right.width, self.right.height):
            raise ValueError(
                f"stereo frames differ in size: left {self.left.width}x{self.left.height}, "
                f"right {self.right.width}x{self.right.height}"
            )


def _skip_header_space(data: bytes, pos: int) -> int:
    n = len(data)
    while pos < n:
        c = data[pos]
        if c in _WHITESPACE:
            pos += 1
        elif c == ord("#"):
            while pos < n and data[pos] not in b"\n\r":
                pos += 1
        else:
            break
    return pos


def _read_header_int(data: bytes, pos: int, what: str) -> tuple[int, int]:
    pos = _skip_header_space(data, pos)
    if pos >= len(data):
        raise PgmDecodeError(pos, f"header ended while reading {what}")
    start = pos
    while pos < len(data) and data[pos : pos + 1].isdigit():
        pos += 1
    if pos == start:
        raise PgmDecodeError(start, f"expected digits for {what}")
    return int(data[start:pos]), pos


def decode_pgm(data: bytes) -> GrayImage:
    """Parse a binary PGM (magic P5, maxval <= 65535) into a GrayImage.

    Stored values map to intensities as value / maxval. Samples wider than
    one byte are big-endian, per the PNM convention.
    """
    if data[:2] != b"P5":
        raise PgmDecodeError(0, f"bad magic {data[:2]!r}, expected b'P5'")
    if len(data) > 2 and data[2] not in _WHITESPACE and data[2] != ord("#"):
        raise PgmDecodeError(2, "magic not followed by whitespace")
    width, pos = _read_header_int(data, 2, "width")
    height, pos = _read_header_int(data, pos, "height")
    maxval, pos = _read_header_int(data, pos, "maxval")
    if width == 0 or height == 0:
        raise PgmDecodeError(pos, f"zero image dimension {width}x{height}")
    if maxval == 0:
        raise PgmDecodeError(pos, "maxval is zero")
    if maxval > 65535:
        raise PgmDecodeError(pos, f"maxval {maxval} exceeds 65535")
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise PgmDecodeError(pos, "expected single whitespace before payload")
    pos += 1
    bytes_per_sample = 2 if maxval > 255 else 1
    need = width * height * bytes_per_sample
    if len(data) - pos < need:
        raise PgmDecodeError(
            len(data), f"truncated payload: need {need} bytes, have {len(data) - pos}"
        )
    raw = data[pos : pos + need]
    dtype = ">u2" if bytes_per_sample == 2 else np.uint8
    values = np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(height, width)
    if values.max() > maxval:
        raise PgmDecodeError(pos, f"sample exceeds maxval {maxval}")
    return GrayImage(values / maxval)


def encode_pgm(img: GrayImage) -> bytes:
    """Serialize to the canonical binary PGM layout.

    Header is exactly ``P5\\n<width> <height>\\n255\\n``; samples are
    round-half-up of intensity * 255, one byte each, row-major.
    """
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    quantized = np.floor(img.pixels * 255.0 + 0.5).astype(np.uint8)
    return header + quantized.tobytes()


def power_law(img: GrayImage, gamma: float) -> GrayImage:
    """Map every intensity through in**gamma (contrast shaping).

    Exponents below 1 expand the dark range and compress the bright range;
    exponents above 1 do the opposite.
    """
    if not (np.isfinite(gamma) and gamma > 0.0):
        raise ValueError(f"gamma must be finite and positive, got {gamma!r}")
    return GrayImage(np.clip(img.pixels**gamma, 0.0, 1.0))


def normalize_minmax(img: GrayImage) -> GrayImage:
    """Stretch intensities to the full [0, 1] range.

    A constant image maps to all zeros, the flat spoof-like extreme.
    """
    lo = img.pixels.min()
    hi = img.pixels.max()
    if hi == lo:
        return GrayImage(np.zeros_like(img.pixels))
    return GrayImage((img.pixels - lo) / (hi - lo))


def resize_bilinear(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    """Resample to out_w x out_h with corner-aligned bilinear interpolation.

    A singleton output axis samples the source center.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target dimensions must be >= 1, got {out_w}x{out_h}")
    src = img.pixels
    h, w = src.shape
    sy = _sample_grid(h, out_h)
    sx = _sample_grid(w, out_w)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = sx - x0
    rows = src[y0, :] * (1.0 - fy) + src[y1, :] * fy
    out = rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx
    return GrayImage(np.clip(out, 0.0, 1.0))


def _sample_grid(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))
