"""Random-walk revision of score maps over the radius-gamma pixel graph.

A :class:`NeighborSparseMatrix` stores one value per (pixel, offset) with
the offset table shared by every pixel.  Entries whose offset leaves the
map are held as zero and masked out of every reduction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DimMismatch, NotPowerOfTwo, ValidationError, ZeroRowSum
from .grid import radius_offsets
from .seed_maps import ScoreStack
from .tensor_io import Tensor, read_json, read_tensor, write_json, write_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NeighborSparseMatrix:
    """Row ``p`` has entry ``values[k, y, x]`` at column ``p + offsets[k]``."""

    height: int
    width: int
    gamma: float
    offsets: tuple[tuple[int, int], ...]
    values: np.ndarray  # (K, H, W)
    kind: str = "affinity"

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def in_bounds(self) -> np.ndarray:
        """Boolean ``(K, H, W)`` mask of offsets landing inside the map."""
        ys = np.arange(self.height)[:, None]
        xs = np.arange(self.width)[None, :]
        mask = np.empty((len(self.offsets), self.height, self.width), dtype=bool)
        for k, (dy, dx) in enumerate(self.offsets):
            mask[k] = (
                (ys + dy >= 0) & (ys + dy < self.height) & (xs + dx >= 0) & (xs + dx < self.width)
            )
        return mask

    def row_sums(self) -> np.ndarray:
        return self.values.astype(np.float64).sum(axis=0)

    def to_csr(self) -> sp.csr_matrix:
        """Same matrix as an ``N x N`` scipy CSR matrix (float64)."""
        mask = self.in_bounds()
        rows, cols, vals = [], [], []
        idx = np.arange(self.n_pixels).reshape(self.height, self.width)
        for k, (dy, dx) in enumerate(self.offsets):
            m = mask[k]
            r = idx[m]
            rows.append(r)
            cols.append(r + dy * self.width + dx)
            vals.append(self.values[k][m].astype(np.float64))
        mat = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_pixels, self.n_pixels),
        )
        mat.sort_indices()
        return mat


def build_affinity_matrix(features, gamma: float) -> NeighborSparseMatrix:
    """``W_ij = exp(-||f_i - f_j||_1)`` for every pair closer than ``gamma``.

    Each unordered pair is evaluated once and written to both orientations,
    so the stored matrix is bitwise symmetric; the diagonal is exactly 1.
    """
    if not gamma > 0:
        raise ValidationError(f"gamma must be > 0, got {gamma}")
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise DimMismatch(f"feature map must be [D, H, W], got {f.shape}")
    _, h, w = f.shape
    offsets = radius_offsets(float(gamma))
    index = {o: k for k, o in enumerate(offsets)}
    values = np.zeros((len(offsets), h, w), dtype=np.float32)
    for dy, dx in radius_offsets(float(gamma), forward_only=True):
        ys, ye = 0, h - dy
        xs, xe = max(0, -dx), min(w, w - dx)
        if ys >= ye or xs >= xe:
            continue
        a = f[:, ys:ye, xs:xe]
        b = f[:, ys + dy:ye + dy, xs + dx:xe + dx]
        wij = np.exp(-np.abs(a - b).sum(axis=0)).astype(np.float32)
        values[index[(dy, dx)], ys:ye, xs:xe] = wij
        values[index[(-dy, -dx)], ys + dy:ye + dy, xs + dx:xe + dx] = wij
    values[index[(0, 0)]] = 1.0
    return NeighborSparseMatrix(h, w, float(gamma), offsets, values, "affinity")


def transition_matrix(w: NeighborSparseMatrix, beta: float) -> NeighborSparseMatrix:
    """Row-normalised Hadamard power ``D^-1 W^beta``, held in float64."""
    if not beta >= 1:
        raise ValidationError(f"beta must be >= 1, got {beta}")
    powered = np.where(w.in_bounds(), w.values.astype(np.float64) ** beta, 0.0)
    d = powered.sum(axis=0)
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise ZeroRowSum("transition row sum is zero or non-finite")
    return NeighborSparseMatrix(w.height, w.width, w.gamma, w.offsets, powered / d, "transition")


def _is_power_of_two(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n >= 1 and (n & (n - 1)) == 0


def _apply_iterative(t_mat: NeighborSparseMatrix, maps: np.ndarray, steps: int) -> np.ndarray:
    """``steps`` successive sparse products ``v <- T v`` on every channel."""
    mat = t_mat.to_csr()
    cur = maps.reshape(maps.shape[0], -1).astype(np.float64).T
    for _ in range(steps):
        cur = mat @ cur
    return cur.T.reshape(maps.shape)


def _matrix_power_by_squaring(t_mat: NeighborSparseMatrix, steps: int, max_entries: int):
    """``T^steps`` by repeated squaring, or ``None`` if it would exceed ``max_entries``.

    Starts sparse; switches to a dense array once fill passes one half.
    """
    n = t_mat.n_pixels
    mat = t_mat.to_csr()
    for _ in range(steps.bit_length() - 1):
        if sp.issparse(mat):
            row_nnz = np.diff(mat.indptr)
            bound = min(n * n, int(row_nnz.sum()) * min(int(row_nnz.max()), n))
            if bound > max_entries:
                return None
            mat = mat @ mat
            if mat.nnz > n * n // 2:
                mat = mat.toarray()
        else:
            if n * n > max_entries:
                return None
            mat = mat @ mat
    return mat


def propagate(
    t_mat: NeighborSparseMatrix,
    stack: ScoreStack,
    t_steps: int,
    mode: str = "iterative",
    max_entries: int = 4_000_000,
) -> ScoreStack:
    """Apply ``T^t`` to every vectorised channel (objects and background).

    ``squaring`` forms ``T^t`` with ``log2 t`` squarings and applies it once;
    it falls back to ``iterative`` when the densified power would hold more
    than ``max_entries`` entries.
    """
    if not _is_power_of_two(t_steps):
        raise NotPowerOfTwo(f"t must be a power of two >= 1, got {t_steps}")
    if (stack.height, stack.width) != (t_mat.height, t_mat.width):
        raise DimMismatch(
            f"score map {stack.height}x{stack.width} vs matrix {t_mat.height}x{t_mat.width}"
        )
    if mode not in ("iterative", "squaring"):
        raise ValidationError(f"unknown propagation mode {mode!r}")

    maps = stack.scores
    out = None
    if mode == "squaring":
        power = _matrix_power_by_squaring(t_mat, int(t_steps), max_entries)
        if power is None:
            log.info("squaring would exceed %d entries; falling back to iterative", max_entries)
        else:
            flat = maps.reshape(maps.shape[0], -1).astype(np.float64)
            out = np.asarray(power @ flat.T).T.reshape(maps.shape)
    if out is None:
        out = _apply_iterative(t_mat, maps, int(t_steps))
    return stack.with_scores(out.astype(np.float32))


def save_neighbor_matrix(m: NeighborSparseMatrix, path) -> None:
    """Values as an AFT1 ``[K, H, W]`` tensor plus a ``<path>.json`` header.

    AFT1 holds float32, so a saved transition matrix is not exactly row-stochastic
    after reload; cache affinity matrices and renormalise instead.
    """
    write_tensor(Tensor(m.values.astype(np.float32)), path)
    p = Path(path)
    write_json(
        {
            "height": m.height,
            "width": m.width,
            "gamma": m.gamma,
            "kind": m.kind,
            "offsets": [list(o) for o in m.offsets],
        },
        p.with_name(p.name + ".json"),
    )


def load_neighbor_matrix(path) -> NeighborSparseMatrix:
    p = Path(path)
    meta = read_json(p.with_name(p.name + ".json"))
    t = read_tensor(p)
    offsets = tuple(tuple(o) for o in meta["offsets"])
    if t.dims != (len(offsets), meta["height"], meta["width"]):
        raise DimMismatch(f"matrix values {t.dims} disagree with header")
    return NeighborSparseMatrix(
        meta["height"], meta["width"], meta["gamma"], offsets, t.data.copy(), meta["kind"]
    )
