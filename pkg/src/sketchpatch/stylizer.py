"""Whole-sketch inference by overlapping, graph-ordered patch translation.

The sketch is covered by p x p windows at a stride of ``p - o``. Windows that
contain ink become graph nodes; 4-neighbours sharing inked overlap are
joined. Nodes are translated in BFS order from one root per connected
component, each as a hybrid of its plain pixels and the already committed
output of earlier neighbours. Committed pixels are never rewritten.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .hybrid import HybridMask, mask_from_committed
from .image import INK_THRESHOLD, GrayImage, background_value
from .nets import ModelParams, translate

Cell = Tuple[int, int]
Translator = Union[ModelParams, Callable[[np.ndarray], np.ndarray]]

# expansion order for BFS: up, left, right, down
NEIGHBOUR_ORDER = ((-1, 0), (0, -1), (0, 1), (1, 0))


class EmptySketchError(ValueError):
    """The sketch contains no ink, so there is nothing to translate."""


@dataclass(frozen=True, eq=False)
class PatchGrid:
    patch_size: int
    overlap: int
    rows: int
    cols: int
    height: int  # original sketch size
    width: int
    canvas: np.ndarray  # padded sketch, (padded_height, padded_width)
    background: float
    offset: Tuple[int, int] = (0, 0)  # (y, x) of the first window relative to the image

    @property
    def step(self) -> int:
        return self.patch_size - self.overlap

    def origin(self, cell: Cell) -> Tuple[int, int]:
        i, j = cell
        return self.offset[0] + self.step * i, self.offset[1] + self.step * j

    def cells(self) -> List[Cell]:
        return [(i, j) for i in range(self.rows) for j in range(self.cols)]

    def window(self, cell: Cell) -> np.ndarray:
        y, x = self.origin(cell)
        y -= self.offset[0]
        x -= self.offset[1]
        p = self.patch_size
        return self.canvas[y:y + p, x:x + p]

    def shifted(self, dy: int, dx: int) -> "PatchGrid":
        """Same windows, moved by (dy, dx) image pixels (for metric comparisons)."""
        return PatchGrid(
            self.patch_size, self.overlap, self.rows, self.cols, self.height + dy, self.width + dx,
            self.canvas, self.background, (self.offset[0] + dy, self.offset[1] + dx),
        )


def build_grid(sketch: GrayImage, p: int = 64, o: int = 16) -> PatchGrid:
    """Windows at ((p-o)*i, (p-o)*j); margins padded with the sketch background."""
    if p < 1 or o < 0 or o >= p:
        raise ValueError(f"need 0 <= overlap < patch size, got p={p}, o={o}")
    step = p - o
    rows = math.ceil(sketch.height / step)
    cols = math.ceil(sketch.width / step)
    bg = background_value(sketch)
    canvas = np.full((step * (rows - 1) + p, step * (cols - 1) + p), bg)
    canvas[: sketch.height, : sketch.width] = sketch.pixels
    canvas.flags.writeable = False
    return PatchGrid(p, o, rows, cols, sketch.height, sketch.width, canvas, bg)


# ---------------------------------------------------------------- graph


@dataclass
class PatchGraph:
    nodes: List[Cell]
    edges: Dict[Cell, List[Cell]]
    order: List[Cell]
    roots: List[Cell]
    component: Dict[Cell, int] = field(default_factory=dict)

    def parents_before(self, cell: Cell) -> List[Cell]:
        """Neighbours that precede ``cell`` in the traversal order."""
        pos = {c: k for k, c in enumerate(self.order)}
        return [n for n in self.edges[cell] if pos[n] < pos[cell]]


def _overlap_band(grid: PatchGrid, a: Cell, b: Cell) -> np.ndarray:
    (i0, j0), (i1, j1) = sorted((a, b))
    p, step = grid.patch_size, grid.step
    if i0 == i1:  # horizontal neighbours share columns
        y = step * i0
        return grid.canvas[y:y + p, step * j1: step * j0 + p]
    x = step * j0
    return grid.canvas[step * i1: step * i0 + p, x:x + p]


def build_graph(
    grid: PatchGrid,
    threshold: float = INK_THRESHOLD,
    root_policy: str = "raster",
    seed: Optional[int] = None,
) -> PatchGraph:
    """Ink-bearing cells, inked-overlap edges, and a BFS order per component.

    ``root_policy`` is ``"raster"`` (first unvisited node in raster order) or
    ``"random"`` (uniform among unvisited nodes, drawn from ``seed``).
    """
    if root_policy not in ("raster", "random"):
        raise ValueError(f"unknown root policy {root_policy!r}")
    ink = lambda a: bool((a < threshold).any())  # noqa: E731
    nodes = [c for c in grid.cells() if ink(grid.window(c))]
    if not nodes:
        raise EmptySketchError("sketch has no ink")
    node_set = set(nodes)
    edges: Dict[Cell, List[Cell]] = {c: [] for c in nodes}
    for c in nodes:
        for di, dj in NEIGHBOUR_ORDER:
            n = (c[0] + di, c[1] + dj)
            if n in node_set and ink(_overlap_band(grid, c, n)):
                edges[c].append(n)
    rng = np.random.default_rng(seed)
    order: List[Cell] = []
    roots: List[Cell] = []
    component: Dict[Cell, int] = {}
    while len(component) < len(nodes):
        remaining = [c for c in nodes if c not in component]
        root = remaining[0] if root_policy == "raster" else remaining[int(rng.integers(len(remaining)))]
        k = len(roots)
        roots.append(root)
        component[root] = k
        queue = deque([root])
        while queue:
            c = queue.popleft()
            order.append(c)
            for n in edges[c]:
                if n not in component:
                    component[n] = k
                    queue.append(n)
    return PatchGraph(nodes, edges, order, roots, component)


def raster_order(grid: PatchGrid, threshold: float = INK_THRESHOLD) -> List[Cell]:
    cells = [c for c in grid.cells() if bool((grid.window(c) < threshold).any())]
    if not cells:
        raise EmptySketchError("sketch has no ink")
    return cells


# ---------------------------------------------------------------- orientation seeding


@dataclass(frozen=True)
class SeedRegion:
    """Window rectangle (y, x, h, w) filled from the exemplar at (src_y, src_x)."""

    y: int
    x: int
    h: int
    w: int
    src_y: int = 0
    src_x: int = 0

    @classmethod
    def parse(cls, text: str) -> "SeedRegion":
        """``y,x,h,w`` or ``y,x,h,w@src_y,src_x``."""
        rect, _, src = text.partition("@")
        vals = [int(v) for v in rect.split(",")]
        if len(vals) != 4:
            raise ValueError(f"seed region needs y,x,h,w; got {text!r}")
        sv = [int(v) for v in src.split(",")] if src else [0, 0]
        if len(sv) != 2:
            raise ValueError(f"seed source needs src_y,src_x; got {text!r}")
        return cls(*vals, *sv)


def seed_orientation(
    root_window: np.ndarray,
    exemplar: GrayImage,
    region: SeedRegion,
    threshold: float = INK_THRESHOLD,
) -> Tuple[np.ndarray, np.ndarray]:
    """Paste an exemplar sub-patch into an ink-free part of the root window.

    Returns the conditioned hybrid and the boolean mask of pasted pixels,
    which the caller must drop from the committed output.
    """
    p = root_window.shape[0]
    y, x, h, w = region.y, region.x, region.h, region.w
    if h < 1 or w < 1 or y < 0 or x < 0 or y + h > p or x + w > root_window.shape[1]:
        raise ValueError(f"seed region {region} does not fit a {p}x{p} window")
    sy, sx = region.src_y, region.src_x
    if sy < 0 or sx < 0 or sy + h > exemplar.height or sx + w > exemplar.width:
        raise ValueError(f"seed source {region} outside the {exemplar.width}x{exemplar.height} exemplar")
    if (root_window[y:y + h, x:x + w] < threshold).any():
        raise ValueError("seed region overlaps sketch ink; choose an empty area")
    out = np.array(root_window, dtype=np.float64)
    out[y:y + h, x:x + w] = exemplar.pixels[sy:sy + h, sx:sx + w]
    pasted = np.zeros(root_window.shape, dtype=bool)
    pasted[y:y + h, x:x + w] = True
    return out, pasted


# ---------------------------------------------------------------- inference


@dataclass
class StylizeOptions:
    order: str = "bfs"  # or "raster"
    root: str = "raster"  # or "random"
    root_seed: Optional[int] = None
    conditioning: bool = True
    threshold: float = INK_THRESHOLD
    seed_region: Optional[SeedRegion] = None
    seed_exemplar: Optional[GrayImage] = None


@dataclass
class Step:
    cell: Cell
    origin: Tuple[int, int]
    mask: HybridMask
    conditioned: bool  # had committed pixels when translated


def _as_translator(generator: Translator) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(generator, ModelParams):
        return lambda patch: translate(generator, patch[None])[0]
    return generator


def stylize(
    sketch: GrayImage,
    generator: Translator,
    p: int = 64,
    o: int = 16,
    options: Optional[StylizeOptions] = None,
    on_step: Optional[Callable[[Step, np.ndarray, np.ndarray], None]] = None,
    log: Optional[List[Step]] = None,
) -> GrayImage:
    """Translate ``sketch`` patch by patch; returns an image of the same size.

    ``generator`` is trained :class:`ModelParams` or any callable mapping an
    image-space p x p hybrid to a p x p output. ``on_step`` receives the step,
    the padded output canvas and the committed mask after each write.
    """
    opts = options or StylizeOptions()
    grid = build_grid(sketch, p, o)
    if opts.order == "bfs":
        order = build_graph(grid, opts.threshold, opts.root, opts.root_seed).order
    elif opts.order == "raster":
        order = raster_order(grid, opts.threshold)
    else:
        raise ValueError(f"unknown order {opts.order!r}")
    run = _as_translator(generator)
    out = np.full(grid.canvas.shape, grid.background)
    committed = np.zeros(grid.canvas.shape, dtype=bool)
    for k, cell in enumerate(order):
        y, x = grid.origin(cell)
        sl = (slice(y, y + p), slice(x, x + p))
        plain = grid.canvas[sl]
        done = committed[sl].copy()
        if opts.conditioning and done.any():
            hybrid = np.where(done, out[sl], plain)
        else:
            hybrid = np.array(plain, dtype=np.float64)
        pasted = np.zeros((p, p), dtype=bool)
        if k == 0 and opts.seed_region is not None:
            if opts.seed_exemplar is None:
                raise ValueError("orientation seeding needs an exemplar image")
            hybrid, pasted = seed_orientation(hybrid, opts.seed_exemplar, opts.seed_region, opts.threshold)
        result = np.clip(np.asarray(run(hybrid), dtype=np.float64), 0.0, 1.0)
        if result.shape != (p, p):
            raise ValueError(f"translator returned shape {result.shape}, expected {(p, p)}")
        write = ~done & ~pasted
        out[sl][write] = result[write]
        committed[sl] |= ~pasted
        step = Step(cell, (y, x), mask_from_committed(done), bool(done.any()))
        if log is not None:
            log.append(step)
        if on_step is not None:
            on_step(step, out, committed)
    return GrayImage(out[: sketch.height, : sketch.width])


# ---------------------------------------------------------------- seam metric


def boundary_lines(grid: PatchGrid) -> Tuple[List[int], List[int]]:
    """Interior x (vertical lines) and y (horizontal lines) where a window starts or ends.

    A line at ``c`` separates pixel ``c - 1`` from pixel ``c``. The outer edge
    of the grid is not a boundary between windows and is left out.
    """
    p, step = grid.patch_size, grid.step
    oy, ox = grid.offset
    xs = {ox + step * j + e for j in range(grid.cols) for e in (0, p)}
    ys = {oy + step * i + e for i in range(grid.rows) for e in (0, p)}
    return (
        sorted(x for x in xs if ox < x < grid.width),
        sorted(y for y in ys if oy < y < grid.height),
    )


def seam_metric(image: GrayImage, grid: PatchGrid, threshold: float = INK_THRESHOLD) -> float:
    """Mean absolute jump across window boundaries, counted where ink touches the line.

    Each boundary contributes the mean |left - right| (or |above - below|)
    over positions where either neighbouring pixel is ink; boundaries that
    touch no ink are skipped. Returns 0 when no boundary touches ink.
    """
    px = image.pixels
    xs, ys = boundary_lines(grid)
    per_line = []
    for x in xs:
        if x >= px.shape[1]:
            continue
        a, b = px[:, x - 1], px[:, x]
        sel = (a < threshold) | (b < threshold)
        if sel.any():
            per_line.append(np.abs(a - b)[sel].mean())
    for y in ys:
        if y >= px.shape[0]:
            continue
        a, b = px[y - 1, :], px[y, :]
        sel = (a < threshold) | (b < threshold)
        if sel.any():
            per_line.append(np.abs(a - b)[sel].mean())
    return float(np.mean(per_line)) if per_line else 0.0
