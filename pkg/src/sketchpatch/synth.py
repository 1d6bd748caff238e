"""Procedural sketches and deterministic paired styles for desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .image import INK_THRESHOLD, GrayImage

STYLE_KINDS = ("stripes", "dashes", "dots", "hstripes")


@dataclass(frozen=True)
class StyleSpec:
    kind: str = "stripes"
    period: int = 8
    phase: int = 0
    thickness: int = 4

    def __post_init__(self):
        if self.kind not in STYLE_KINDS:
            raise ValueError(f"unknown style {self.kind!r}; expected one of {STYLE_KINDS}")
        if self.period < 1 or not 0 <= self.thickness <= self.period:
            raise ValueError("need period >= 1 and 0 <= thickness <= period")

    @classmethod
    def parse(cls, text: str) -> "StyleSpec":
        """Parse ``kind[:key=value,...]``, e.g. ``stripes:period=6,thickness=3``."""
        kind, _, rest = text.partition(":")
        kwargs = {}
        for item in filter(None, rest.split(",")):
            key, sep, val = item.partition("=")
            if not sep or key not in ("period", "phase", "thickness"):
                raise ValueError(f"bad style parameter {item!r}")
            kwargs[key] = int(val)
        return cls(kind.strip(), **kwargs)

    def __str__(self) -> str:
        return f"{self.kind}:period={self.period},phase={self.phase},thickness={self.thickness}"


def style_keep_mask(spec: StyleSpec, height: int, width: int) -> np.ndarray:
    """Where the style keeps ink, as a (height, width) boolean grid."""
    y, x = np.mgrid[0:height, 0:width]
    on = lambda v: (v + spec.phase) % spec.period < spec.thickness  # noqa: E731
    if spec.kind == "stripes":
        return on(x + y)
    if spec.kind == "hstripes":
        return on(y)
    if spec.kind == "dashes":
        return on(x)
    return on(x) & on(y)


def synth_style(plain: GrayImage, spec: StyleSpec, threshold: float = INK_THRESHOLD) -> GrayImage:
    """Keep ink pixels where the style rule holds; the rest become background."""
    ink = plain.ink_mask(threshold)
    drop = ink & ~style_keep_mask(spec, plain.height, plain.width)
    return GrayImage(np.where(drop, 1.0, plain.pixels))


def synth_sketch(size: int = 256, seed: int = 0, stroke: int = 3, shapes: int = 7) -> GrayImage:
    """Random binary line drawing: lines, circles, boxes and arcs."""
    rng = np.random.default_rng(seed)
    h, w = (size, size) if isinstance(size, int) else size
    im = Image.new("L", (w, h), 255)
    draw = ImageDraw.Draw(im)
    margin = stroke + 2
    for _ in range(shapes):
        kind = rng.integers(4)
        x0, x1 = sorted(rng.integers(margin, w - margin, size=2))
        y0, y1 = sorted(rng.integers(margin, h - margin, size=2))
        if x1 - x0 < 8:
            x1 = min(w - margin, x0 + 8 + int(rng.integers(w // 4)))
        if y1 - y0 < 8:
            y1 = min(h - margin, y0 + 8 + int(rng.integers(h // 4)))
        if kind == 0:
            draw.line([(int(x0), int(rng.integers(margin, h - margin))), (int(x1), int(rng.integers(margin, h - margin)))], fill=0, width=stroke)
        elif kind == 1:
            draw.ellipse([int(x0), int(y0), int(x1), int(y1)], outline=0, width=stroke)
        elif kind == 2:
            draw.rectangle([int(x0), int(y0), int(x1), int(y1)], outline=0, width=stroke)
        else:
            a = float(rng.uniform(0, 360))
            draw.arc([int(x0), int(y0), int(x1), int(y1)], a, a + float(rng.uniform(90, 270)), fill=0, width=stroke)
    arr = (np.asarray(im) >= 128).astype(np.float64)
    return GrayImage(arr)


def stripe_orientation(image: GrayImage, threshold: float = INK_THRESHOLD) -> float:
    """Signed orientation statistic of the ink pattern.

    Positive when ink correlates along the anti-diagonal ``x + y = const``
    (the ``stripes`` rule), negative when it correlates along ``x - y = const``.
    Only pixel pairs where both sites lie inside the stroke support count.
    """
    ink = image.ink_mask(threshold).astype(np.float64)
    a = ink[1:, :-1] * ink[:-1, 1:]  # neighbour along (+1, -1): same x + y
    b = ink[1:, 1:] * ink[:-1, :-1]  # neighbour along (+1, +1): same x - y
    total = a.sum() + b.sum()
    return 0.0 if total == 0 else float((a.sum() - b.sum()) / total)


def rows_vs_cols(image: GrayImage, threshold: float = INK_THRESHOLD) -> float:
    """Positive when ink runs in horizontal bands, negative for vertical bands."""
    ink = image.ink_mask(threshold).astype(np.float64)
    a = (ink[:, 1:] * ink[:, :-1]).sum()
    b = (ink[1:, :] * ink[:-1, :]).sum()
    total = a + b
    return 0.0 if total == 0 else float((a - b) / total)


def polar_sketch(size: int, radius_frac: float = 0.35, stroke: int = 3) -> GrayImage:
    """A single circle; handy for orientation tests that need every direction."""
    y, x = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    d = np.hypot(x - c, y - c)
    r = radius_frac * size
    return GrayImage(np.where(np.abs(d - r) <= stroke / 2, 0.0, 1.0))

