"""Paired patch mining from aligned exemplars and the on-disk dataset format.

Layout of a dataset directory::

    manifest.txt              key=value lines
    pairs/000000.plain.pgm
    pairs/000000.styled.pgm
    ...
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple, Union

import numpy as np

from . import image as img
from .image import INK_THRESHOLD, GrayImage

DEFAULT_PATCH_SIZE = 64
DEFAULT_ROTATION_STEP = 8
DEFAULT_STRIDE = 8


class AlignmentError(ValueError):
    """Plain and styled exemplars do not have the same dimensions."""


class EmptyDatasetError(ValueError):
    """Mining produced no pair with ink in its plain patch."""


@dataclass(frozen=True, eq=False)
class PatchPair:
    plain: np.ndarray
    styled: np.ndarray
    exemplar: str
    origin: Tuple[int, int]  # (x, y) in the rotated exemplar
    rotation: float


@dataclass
class DatasetManifest:
    patch_size: int = DEFAULT_PATCH_SIZE
    rotation_step: int = DEFAULT_ROTATION_STEP
    stride: int = DEFAULT_STRIDE
    ink_threshold: float = INK_THRESHOLD
    exemplars: List[str] = field(default_factory=list)
    pair_count: int = 0


@dataclass
class PairDataset:
    """Stacked patches stored as uint8 (the on-disk precision), ready for batch sampling."""

    plain: np.ndarray  # (N, p, p) uint8, image space times 255
    styled: np.ndarray
    manifest: DatasetManifest
    meta: List[Tuple[str, float, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.plain)

    @property
    def patch_size(self) -> int:
        return self.plain.shape[1]

    def take(self, idx) -> Tuple[np.ndarray, np.ndarray]:
        """Float32 image-space (plain, styled) batches for the given indices."""
        return _to_float(self.plain[idx]), _to_float(self.styled[idx])

    @classmethod
    def from_pairs(cls, pairs: Sequence[PatchPair], manifest: DatasetManifest) -> "PairDataset":
        if not pairs:
            raise EmptyDatasetError("no patch pairs")
        plain = np.stack([_to_uint8(pp.plain) for pp in pairs])
        styled = np.stack([_to_uint8(pp.styled) for pp in pairs])
        meta = [(pp.exemplar, pp.rotation, pp.origin[0], pp.origin[1]) for pp in pairs]
        manifest.pair_count = len(pairs)
        return cls(plain, styled, manifest, meta)


def _to_uint8(a: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(a, dtype=np.float64) * 255.0).astype(np.uint8)


def _to_float(a: np.ndarray) -> np.ndarray:
    return (a.astype(np.float64) / 255.0).astype(np.float32)


def is_empty(patch: np.ndarray, threshold: float = INK_THRESHOLD) -> bool:
    return not bool((np.asarray(patch) < threshold).any())


def rotation_angles(step: float) -> List[float]:
    if step <= 0 or step > 360:
        raise ValueError(f"rotation step must be in (0, 360], got {step}")
    n = int(np.ceil(360.0 / step - 1e-9))
    return [k * step for k in range(n)]


def _check_exemplars(plain: GrayImage, styled: GrayImage, patch_size: int, stride: int) -> None:
    if (plain.height, plain.width) != (styled.height, styled.width):
        raise AlignmentError(
            f"exemplar sizes differ: plain {plain.width}x{plain.height}, styled {styled.width}x{styled.height}"
        )
    if patch_size > min(plain.height, plain.width):
        raise ValueError(f"patch size {patch_size} exceeds exemplar {plain.width}x{plain.height}")
    if stride < 1:
        raise ValueError("stride must be >= 1")


def _windows(plain, styled, p, rotation_step, stride, threshold) -> Iterator[Tuple[float, int, int, np.ndarray, np.ndarray]]:
    for angle in rotation_angles(rotation_step):
        a = img.rotate(plain, angle).pixels
        s = img.rotate(styled, angle).pixels
        h, w = a.shape
        for y in range(0, h - p + 1, stride):
            for x in range(0, w - p + 1, stride):
                pa = a[y:y + p, x:x + p]
                if not is_empty(pa, threshold):
                    yield angle, x, y, pa, s[y:y + p, x:x + p]


def mine(
    plain: GrayImage,
    styled: GrayImage,
    patch_size: int = DEFAULT_PATCH_SIZE,
    rotation_step: float = DEFAULT_ROTATION_STEP,
    stride: int = DEFAULT_STRIDE,
    threshold: float = INK_THRESHOLD,
    exemplar: str = "exemplar0",
) -> List[PatchPair]:
    """Rotate both exemplars through every multiple of ``rotation_step`` and
    cut aligned windows every ``stride`` pixels, keeping those with plain ink.

    Output is ordered by (rotation, y, x).
    """
    _check_exemplars(plain, styled, patch_size, stride)
    pairs = [
        PatchPair(pa.copy(), sa.copy(), exemplar, (x, y), angle)
        for angle, x, y, pa, sa in _windows(plain, styled, patch_size, rotation_step, stride, threshold)
    ]
    if not pairs:
        raise EmptyDatasetError("no non-empty plain patches found in the exemplars")
    return pairs


def mine_dataset(
    exemplars: Sequence[Tuple[str, GrayImage, GrayImage]],
    patch_size: int = DEFAULT_PATCH_SIZE,
    rotation_step: float = DEFAULT_ROTATION_STEP,
    stride: int = DEFAULT_STRIDE,
    threshold: float = INK_THRESHOLD,
) -> PairDataset:
    """Mine several (name, plain, styled) exemplar pairs into one dataset.

    Same pairs and order as :func:`mine`, but patches go straight to uint8 so
    large rotation sweeps fit in memory.
    """
    plains, styleds, meta = [], [], []
    for name, plain, styled in exemplars:
        _check_exemplars(plain, styled, patch_size, stride)
        for angle, x, y, pa, sa in _windows(plain, styled, patch_size, rotation_step, stride, threshold):
            plains.append(_to_uint8(pa))
            styleds.append(_to_uint8(sa))
            meta.append((name, angle, x, y))
    if not plains:
        raise EmptyDatasetError("no non-empty plain patches found in the exemplars")
    manifest = DatasetManifest(patch_size, rotation_step, stride, threshold, [e[0] for e in exemplars], len(plains))
    return PairDataset(np.stack(plains), np.stack(styleds), manifest, meta)


# ---------------------------------------------------------------- disk format


def _fmt(v) -> str:
    if isinstance(v, list):
        return ",".join(v)
    return str(v)


def write_dataset(ds: PairDataset, root: Union[str, Path]) -> Path:
    root = Path(root)
    (root / "pairs").mkdir(parents=True, exist_ok=True)
    for i, (a, s) in enumerate(zip(ds.plain, ds.styled)):
        img.save(GrayImage.from_uint8(a), root / "pairs" / f"{i:06d}.plain.pgm")
        img.save(GrayImage.from_uint8(s), root / "pairs" / f"{i:06d}.styled.pgm")
    m = ds.manifest
    lines = [
        f"patch_size={m.patch_size}",
        f"rotation_step={m.rotation_step}",
        f"stride={m.stride}",
        f"ink_threshold={m.ink_threshold}",
        f"exemplars={_fmt(list(m.exemplars))}",
        f"pair_count={len(ds)}",
    ]
    for i, (name, rot, x, y) in enumerate(ds.meta):
        lines.append(f"pair.{i:06d}={name} {rot:g} {x} {y}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root


def read_manifest(path: Union[str, Path]) -> Tuple[DatasetManifest, List[Tuple[str, float, int, int]]]:
    kv = {}
    meta = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"bad manifest line {raw!r}")
        if key.startswith("pair."):
            name, rot, x, y = val.split()
            meta.append((name, float(rot), int(x), int(y)))
        else:
            kv[key.strip()] = val.strip()
    step = float(kv.get("rotation_step", DEFAULT_ROTATION_STEP))
    m = DatasetManifest(
        patch_size=int(kv.get("patch_size", DEFAULT_PATCH_SIZE)),
        rotation_step=int(step) if step.is_integer() else step,
        stride=int(kv.get("stride", DEFAULT_STRIDE)),
        ink_threshold=float(kv.get("ink_threshold", INK_THRESHOLD)),
        exemplars=[e for e in kv.get("exemplars", "").split(",") if e],
        pair_count=int(kv.get("pair_count", 0)),
    )
    return m, meta


def read_dataset(root: Union[str, Path]) -> PairDataset:
    root = Path(root)
    manifest, meta = read_manifest(root / "manifest.txt")
    plains, styleds = [], []
    for i in range(manifest.pair_count):
        plains.append(img.load(root / "pairs" / f"{i:06d}.plain.pgm").to_uint8())
        styleds.append(img.load(root / "pairs" / f"{i:06d}.styled.pgm").to_uint8())
    extra = root / "pairs" / f"{manifest.pair_count:06d}.plain.pgm"
    if extra.exists():
        raise ValueError(f"{root}: more pairs on disk than pair_count={manifest.pair_count}")
    if not plains:
        raise EmptyDatasetError(f"{root}: dataset has no pairs")
    return PairDataset(np.stack(plains), np.stack(styleds), manifest, meta)
