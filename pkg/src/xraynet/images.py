"""Grayscale image handling: PGM I/O, augmentation, histograms, resizing.

Binary PGM (P5, maxval 255) is the canonical on-disk format; PNG/JPEG decode
through an optional Pillow adapter behind the same `GrayImage` type. Flips
are exact pixel permutations (they preserve the intensity histogram bit for
bit); rotation resamples bilinearly around the image center with zero fill,
and a rotation by 0 degrees is an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import Pcg32


@dataclass
class GrayImage:
    """8-bit grayscale raster, row-major (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise ValueError(f"GrayImage needs a 2-D array, got shape {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            if self.pixels.min() < 0 or self.pixels.max() > 255:
                raise ValueError("intensities must lie in [0, 255]")
            self.pixels = self.pixels.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class AugmentationConfig:
    """Flip/rotation schedule: each transform fires independently.

    `rotation_range` is the half-width in degrees; angles are drawn
    uniformly from [-rotation_range, +rotation_range].
    """

    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 0.3
    rotation_range: float = 15.0

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_rotate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.rotation_range < 0:
            raise ValueError("rotation_range must be non-negative")


# ---------------------------------------------------------------------------
# PGM (P5) codec and the optional Pillow adapter
# ---------------------------------------------------------------------------

def read_pgm(data: bytes) -> GrayImage:
    """Decode binary PGM (P5, maxval <= 255)."""
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM (P5) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise ValueError(f"malformed PGM header fields {fields}") from None
    if width < 1 or height < 1:
        raise ValueError(f"bad PGM dimensions {width}x{height}")
    if not 0 < maxval <= 255:
        raise ValueError(f"unsupported PGM maxval {maxval} (only 8-bit supported)")
    n = width * height
    raster = data[pos:pos + n]
    if len(raster) != n:
        raise ValueError(f"PGM raster has {len(raster)} bytes, expected {n}")
    return GrayImage(np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy())


def write_pgm(img: GrayImage) -> bytes:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def load_image(path) -> GrayImage:
    """Read a grayscale image; PGM natively, other formats via Pillow."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix.lower() == ".pgm":
        try:
            return read_pgm(path.read_bytes())
        except ValueError as e:
            raise ValueError(f"{path}: {e}") from None
    try:
        from PIL import Image
    except ImportError:
        raise ValueError(
            f"{path}: decoding {path.suffix!r} needs Pillow (install the 'png' extra)") from None
    try:
        with Image.open(path) as im:
            return GrayImage(np.asarray(im.convert("L"), dtype=np.uint8))
    except Exception as e:
        raise ValueError(f"{path}: cannot decode image ({e})") from None


# ---------------------------------------------------------------------------
# statistics and transforms
# ---------------------------------------------------------------------------

def intensity_histogram(img: GrayImage) -> np.ndarray:
    """256-bin intensity counts; bins sum to width * height."""
    return np.bincount(img.pixels.reshape(-1), minlength=256).astype(np.int64)


def hflip(img: GrayImage) -> GrayImage:
    return GrayImage(img.pixels[:, ::-1].copy())


def vflip(img: GrayImage) -> GrayImage:
    return GrayImage(img.pixels[::-1, :].copy())


def rotate(img: GrayImage, degrees: float) -> GrayImage:
    """Rotate about the image center, bilinear interpolation, zero fill."""
    h, w = img.pixels.shape
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    # inverse mapping: output pixel samples the source rotated by -degrees
    dx, dy = xs - cx, ys - cy
    sx = cx + cos * dx + sin * dy
    sy = cy - sin * dx + cos * dy
    return GrayImage(_bilinear_zero_fill(img.pixels, sy, sx))


def _bilinear_zero_fill(pix: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = pix.shape
    # 1-pixel zero border lets out-of-range neighbours contribute zero
    padded = np.zeros((h + 2, w + 2), dtype=np.float64)
    padded[1:-1, 1:-1] = pix
    sy = sy + 1.0
    sx = sx + 1.0
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0
    inside = (y0 >= 0) & (y0 + 1 <= h + 1) & (x0 >= 0) & (x0 + 1 <= w + 1)
    y0c = np.clip(y0, 0, h)
    x0c = np.clip(x0, 0, w)
    v00 = padded[y0c, x0c]
    v01 = padded[y0c, x0c + 1]
    v10 = padded[y0c + 1, x0c]
    v11 = padded[y0c + 1, x0c + 1]
    val = (v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx
           + v10 * fy * (1 - fx) + v11 * fy * fx)
    val = np.where(inside, val, 0.0)
    return np.clip(np.rint(val), 0, 255).astype(np.uint8)


def augment(img: GrayImage, config: AugmentationConfig, rng: Pcg32) -> GrayImage:
    """Apply hflip, then vflip, then rotation, each by its own coin.

    Exactly four uniforms are consumed per call regardless of outcomes, so
    the stream position never depends on which transforms fired.
    """
    u_h, u_v, u_r, u_angle = (rng.uniform() for _ in range(4))
    if u_h < config.p_hflip:
        img = hflip(img)
    if u_v < config.p_vflip:
        img = vflip(img)
    if u_r < config.p_rotate:
        angle = -config.rotation_range + 2.0 * config.rotation_range * u_angle
        img = rotate(img, angle)
    return img


def to_unit_float(img: GrayImage) -> np.ndarray:
    """(H, W) float32 in [0, 1]."""
    return img.pixels.astype(np.float32) / np.float32(255.0)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a float image using half-pixel-center sampling.

    A no-op (the same array) when the size already matches, so resizing is
    bit-exact for identity targets.
    """
    h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    v00 = arr[np.ix_(y0, x0)]
    v01 = arr[np.ix_(y0, x1)]
    v10 = arr[np.ix_(y1, x0)]
    v11 = arr[np.ix_(y1, x1)]
    out = (v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx
           + v10 * fy * (1 - fx) + v11 * fy * fx)
    return out.astype(arr.dtype, copy=False)
