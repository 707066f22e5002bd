"""Pixel-offset tables for the radius-limited neighbourhood graph."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def radius_offsets(gamma: float, forward_only: bool = False) -> tuple[tuple[int, int], ...]:
    """All ``(dy, dx)`` with ``dy**2 + dx**2 < gamma**2``, row-major order.

    ``forward_only`` keeps the half whose target has a larger linear index
    (``dy > 0``, or ``dy == 0`` and ``dx > 0``), so each unordered pair is
    produced once.  The full table includes ``(0, 0)``.
    """
    r = int(math.ceil(gamma))
    g2 = gamma * gamma
    out = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx >= g2:
                continue
            if forward_only and not (dy > 0 or (dy == 0 and dx > 0)):
                continue
            out.append((dy, dx))
    return tuple(out)


def offset_pairs(height: int, width: int, dy: int, dx: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear indices ``(i, j)`` of every in-bounds pair ``j = i + (dy, dx)``."""
    ys = np.arange(max(0, -dy), min(height, height - dy))
    xs = np.arange(max(0, -dx), min(width, width - dx))
    if ys.size == 0 or xs.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    i = (yy * width + xx).reshape(-1).astype(np.int64)
    j = ((yy + dy) * width + (xx + dx)).reshape(-1).astype(np.int64)
    return i, j
