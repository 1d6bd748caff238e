"""Hybrid patches: plain interior with styled border bands."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

DEFAULT_DELTA = 8


class HybridMask(NamedTuple):
    """Widths (pixels) of the styled band at the top, bottom, left and right."""

    t: int
    b: int
    l: int
    r: int

    def band_mask(self, p: int) -> np.ndarray:
        """Boolean p x p array, True where the styled patch is copied."""
        m = np.zeros((p, p), dtype=bool)
        m[: self.t, :] = True
        m[p - self.b:, :] = True
        m[:, : self.l] = True
        m[:, p - self.r:] = True
        return m


def _check_delta(p: int, delta: int) -> int:
    hi = p // 2 - delta
    if delta < 0 or hi < 1:
        raise ValueError(f"delta={delta} must satisfy 0 <= delta < p/2 (p={p})")
    return hi


def sample_mask(p: int, delta: int, rng: np.random.Generator) -> HybridMask:
    """Draw t, b, l, r independently: 0 with probability 1/2, else uniform on 1..p/2-delta."""
    hi = _check_delta(p, delta)
    zero = rng.random(4) < 0.5
    vals = rng.integers(1, hi + 1, size=4)
    t, b, l, r = (0 if z else int(v) for z, v in zip(zero, vals))
    return HybridMask(t, b, l, r)


def sample_masks(n: int, p: int, delta: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`sample_mask`; returns an ``(n, 4)`` int array of (t, b, l, r)."""
    hi = _check_delta(p, delta)
    zero = rng.random((n, 4)) < 0.5
    vals = rng.integers(1, hi + 1, size=(n, 4))
    return np.where(zero, 0, vals)


def compose(plain: np.ndarray, styled: np.ndarray, mask: HybridMask) -> np.ndarray:
    """Start from ``plain`` and paste the styled border bands given by ``mask``."""
    plain = np.asarray(plain)
    styled = np.asarray(styled)
    if plain.shape != styled.shape or plain.ndim != 2 or plain.shape[0] != plain.shape[1]:
        raise ValueError(f"compose needs two equal square patches, got {plain.shape} and {styled.shape}")
    p = plain.shape[0]
    t, b, l, r = (int(v) for v in mask)
    if min(t, b, l, r) < 0 or max(t, b, l, r) > p:
        raise ValueError(f"mask {tuple(mask)} out of range for p={p}")
    out = plain.copy()
    out[:t, :] = styled[:t, :]
    out[p - b:, :] = styled[p - b:, :]
    out[:, :l] = styled[:, :l]
    out[:, p - r:] = styled[:, p - r:]
    return out


def compose_batch(plain: np.ndarray, styled: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Compose ``[N,p,p]`` batches with an ``(N, 4)`` array of masks."""
    return np.stack([compose(a, s, HybridMask(*m)) for a, s, m in zip(plain, styled, masks)])


def mask_from_committed(committed: np.ndarray) -> HybridMask:
    """Largest fully committed border bands of a p x p coverage map."""
    committed = np.asarray(committed, dtype=bool)
    rows = committed.all(axis=1)
    cols = committed.all(axis=0)

    def run(flags: np.ndarray) -> int:
        n = 0
        for f in flags:
            if not f:
                break
            n += 1
        return n

    return HybridMask(run(rows), run(rows[::-1]), run(cols), run(cols[::-1]))
