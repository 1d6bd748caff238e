"""Grayscale raster type, PNG/PGM I/O, rotation, morphology and Gaussian blur.

Pixel convention: floats in [0, 1] with 0 = ink and 1 = background.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import tensor as T

INK_THRESHOLD = 0.5
BLUR_SIZE = 10
BLUR_SIGMA = 10.0


class ImageFormatError(ValueError):
    """File is not an 8-bit grayscale PNG or a binary PGM, or is truncated."""


@dataclass(frozen=True, eq=False)
class GrayImage:
    pixels: np.ndarray  # (height, width) float64

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"GrayImage needs a 2-d array, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, GrayImage) and np.array_equal(self.pixels, other.pixels)

    @classmethod
    def blank(cls, height: int, width: int, value: float = 1.0) -> "GrayImage":
        return cls(np.full((height, width), value))

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "GrayImage":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    def quantized(self) -> "GrayImage":
        return GrayImage.from_uint8(self.to_uint8())

    def ink_mask(self, threshold: float = INK_THRESHOLD) -> np.ndarray:
        return self.pixels < threshold


# ---------------------------------------------------------------- file I/O

_PGM_HEADER = re.compile(rb"\AP5(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def _read_pgm(data: bytes) -> np.ndarray:
    m = _PGM_HEADER.match(data)
    if not m:
        raise ImageFormatError("malformed PGM header")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PGM supported (maxval {maxval})")
    body = data[m.end():]
    if len(body) < width * height:
        raise ImageFormatError("truncated PGM data")
    return np.frombuffer(body[: width * height], dtype=np.uint8).reshape(height, width)


def _write_pgm(arr: np.ndarray, path: Path) -> None:
    h, w = arr.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def load(path: Union[str, Path]) -> GrayImage:
    """Read an 8-bit grayscale PNG or a P5 PGM.

    Colour PNGs are converted to luminance; anything else is rejected.
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P5":
        return GrayImage.from_uint8(_read_pgm(data))
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise ImageFormatError(f"{path}: not a PNG or P5 PGM file")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "L":
                arr = np.asarray(im)
            elif im.mode in ("1", "P", "RGB", "RGBA", "LA"):
                arr = np.asarray(im.convert("L"))
            else:
                raise ImageFormatError(f"{path}: unsupported PNG mode {im.mode}")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    return GrayImage.from_uint8(arr)


def save(image: GrayImage, path: Union[str, Path]) -> None:
    """Write as PGM if the suffix is .pgm, otherwise as 8-bit grayscale PNG."""
    path = Path(path)
    arr = image.to_uint8()
    if path.suffix.lower() == ".pgm":
        _write_pgm(arr, path)
    else:
        Image.fromarray(arr, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------- geometry


def rotate(image: GrayImage, degrees: float) -> GrayImage:
    """Rotate counter-clockwise about the centre onto a canvas that fits the result.

    Multiples of 90 degrees are exact pixel permutations; other angles use
    bilinear sampling with background (1.0) outside the source.
    """
    degrees = float(degrees) % 360.0
    if degrees % 90.0 == 0.0:
        return GrayImage(np.rot90(image.pixels, int(degrees // 90)))
    h, w = image.height, image.width
    rad = math.radians(degrees)
    c, s = math.cos(rad), math.sin(rad)
    out_w = int(math.ceil(abs(w * c) + abs(h * s) - 1e-9))
    out_h = int(math.ceil(abs(w * s) + abs(h * c) - 1e-9))
    cx_in, cy_in = (w - 1) / 2.0, (h - 1) / 2.0
    cx_out, cy_out = (out_w - 1) / 2.0, (out_h - 1) / 2.0
    yy, xx = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    dx, dy = xx - cx_out, yy - cy_out
    # inverse map; y grows downward so a visual CCW turn flips the sin sign
    sx = c * dx - s * dy + cx_in
    sy = s * dx + c * dy + cy_in
    padded = np.pad(image.pixels, 1, constant_values=1.0)
    sx, sy = sx + 1, sy + 1
    inside = (sx >= 0) & (sx <= w + 1) & (sy >= 0) & (sy <= h + 1)
    sx = np.clip(sx, 0, w + 1)
    sy = np.clip(sy, 0, h + 1)
    x0 = np.minimum(np.floor(sx).astype(int), w)
    y0 = np.minimum(np.floor(sy).astype(int), h)
    fx, fy = sx - x0, sy - y0
    top = padded[y0, x0] * (1 - fx) + padded[y0, x0 + 1] * fx
    bot = padded[y0 + 1, x0] * (1 - fx) + padded[y0 + 1, x0 + 1] * fx
    out = np.where(inside, top * (1 - fy) + bot * fy, 1.0)
    return GrayImage(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------- morphology


def _square_filter(mask: np.ndarray, radius: int, op, outside: bool) -> np.ndarray:
    """all/any of a boolean mask over a (2r+1)^2 window, with ``outside`` beyond the frame."""
    h, w = mask.shape
    k = 2 * radius + 1
    padded = np.pad(mask, radius, constant_values=outside)
    rows = op(np.lib.stride_tricks.sliding_window_view(padded, k, axis=0), axis=-1)
    return op(np.lib.stride_tricks.sliding_window_view(rows, k, axis=1), axis=-1)[:h, :w]


def _binary_result(ink: np.ndarray, like: GrayImage) -> GrayImage:
    return GrayImage(np.where(ink, 0.0, 1.0))


def erode(image: GrayImage, radius: int = 1, threshold: float = INK_THRESHOLD) -> GrayImage:
    """Thin strokes: a pixel stays ink only if its whole square neighbourhood is ink.

    Pixels beyond the frame count as ink here, so strokes cut by the border
    are not eaten from outside and closing always contains the original.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    return _binary_result(_square_filter(image.ink_mask(threshold), radius, np.all, True), image)


def dilate(image: GrayImage, radius: int = 1, threshold: float = INK_THRESHOLD) -> GrayImage:
    """Thicken strokes with a square structuring element of side 2*radius+1."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    return _binary_result(_square_filter(image.ink_mask(threshold), radius, np.any, False), image)


def background_value(image: GrayImage) -> float:
    """Majority value (after thresholding) of the border pixels: 1.0 or 0.0."""
    px = image.pixels
    if px.shape[0] < 2 or px.shape[1] < 2:
        border = px.ravel()
    else:
        border = np.concatenate([px[0], px[-1], px[1:-1, 0], px[1:-1, -1]])
    light = np.count_nonzero(border >= INK_THRESHOLD)
    return 1.0 if 2 * light >= border.size else 0.0


# ---------------------------------------------------------------- Gaussian filter


def gaussian_kernel1d(size: int = BLUR_SIZE, sigma: float = BLUR_SIGMA) -> np.ndarray:
    """Normalized taps for offsets ``-(size // 2) .. size - size // 2 - 1``."""
    offsets = np.arange(size) - size // 2
    k = np.exp(-(offsets.astype(np.float64) ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_pads(size: int):
    before = size // 2
    return before, size - 1 - before


def gaussian_blur(x, size: int = BLUR_SIZE, sigma: float = BLUR_SIGMA):
    """Separable Gaussian filter with replicate edges.

    Accepts a GrayImage, a 2-d array, or an NCHW :class:`Tensor`; tensors stay
    on the tape so the blur can sit inside a loss.
    """
    k = gaussian_kernel1d(size, sigma)
    before, after = _blur_pads(size)
    if isinstance(x, T.Tensor):
        c = x.shape[1]
        if c != 1:
            raise T.DimensionError("gaussian_blur expects single-channel tensors")
        kv = T.Tensor(k.reshape(1, 1, size, 1))
        kh = T.Tensor(k.reshape(1, 1, 1, size))
        y = T.conv2d(T.pad(x, (before, after, 0, 0), "replicate"), kv)
        return T.conv2d(T.pad(y, (0, 0, before, after), "replicate"), kh)
    arr = x.pixels if isinstance(x, GrayImage) else np.asarray(x, dtype=np.float64)
    p = np.pad(arr, ((before, after), (0, 0)), mode="edge")
    arr = np.lib.stride_tricks.sliding_window_view(p, size, axis=0) @ k
    p = np.pad(arr, ((0, 0), (before, after)), mode="edge")
    out = np.lib.stride_tricks.sliding_window_view(p, size, axis=1) @ k
    return GrayImage(np.clip(out, 0.0, 1.0)) if isinstance(x, GrayImage) else out
