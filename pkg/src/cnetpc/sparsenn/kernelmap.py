"""Coordinate-keyed kernel maps and causal masks.

Coordinates are (batch, x, y, z) rows; (N, 3) input is treated as batch 0.
For a kernel offset ``delta`` an output row ``o`` reads the input row whose
coordinate is ``coord_out[o] + delta`` (cross-correlation convention).
Offsets are enumerated in raster order over ``[-k//2, k//2]**3``, so an
offset with raster index below the centre always points at a voxel that
comes earlier in the raster scan.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

_AXIS_BITS = 18
_AXIS_BIAS = 1 << 3
_MAX_AXIS = (1 << _AXIS_BITS) - 2 * _AXIS_BIAS
_MAX_BATCH = 1 << (63 - 3 * _AXIS_BITS)

TYPE_A = "A"
TYPE_B = "B"


def kernel_offsets(k: int) -> np.ndarray:
    """All ``k**3`` offsets in raster order (dx slowest, dz fastest)."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {k}")
    h = k // 2
    r = np.arange(-h, h + 1)
    g = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1)
    return g.reshape(-1, 3).astype(np.int64)


def mask_offsets(k: int, mask: str | None) -> set[int]:
    """Indices of offsets whose weights a causal mask forces to zero.

    Type A removes the centre and everything after it; type B keeps the
    centre.
    """
    n = k ** 3
    c = (n - 1) // 2
    if mask is None or mask == "none":
        return set()
    if mask == TYPE_A:
        return set(range(c, n))
    if mask == TYPE_B:
        return set(range(c + 1, n))
    raise ValueError(f"unknown mask type {mask!r}")


def kept_offsets(k: int, mask: str | None) -> np.ndarray:
    zeroed = mask_offsets(k, mask)
    return np.array([i for i in range(k ** 3) if i not in zeroed], dtype=np.int64)


def as_batched(coords) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    if c.ndim != 2 or c.shape[1] not in (3, 4):
        raise ValueError("coords must be (N, 3) or (N, 4)")
    if c.shape[1] == 3:
        c = np.hstack([np.zeros((len(c), 1), dtype=np.int64), c])
    return c


def coord_keys(c4: np.ndarray) -> np.ndarray:
    """Order-preserving int64 keys for batched coordinates (axes may be slightly negative)."""
    if len(c4) and (c4[:, 0].max() >= _MAX_BATCH or c4[:, 1:].max() >= _MAX_AXIS):
        raise ValueError("coordinates too large to key")
    xyz = c4[:, 1:] + _AXIS_BIAS
    return (((c4[:, 0] << _AXIS_BITS | xyz[:, 0]) << _AXIS_BITS | xyz[:, 1]) << _AXIS_BITS) | xyz[:, 2]


class KernelMap:
    """Neighbour table: ``nbr[o, j]`` is the input row for output ``o`` at offset ``j`` or -1."""

    def __init__(self, nbr: np.ndarray, n_in: int, k: int):
        self.nbr = nbr
        self.n_in = n_in
        self.n_out = nbr.shape[0]
        self.k = k
        self._cols: dict = {}
        self._scatter: dict = {}

    def pairs(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """(input rows, output rows) connected through offset ``j``."""
        col = self.nbr[:, j]
        out = np.nonzero(col >= 0)[0]
        return col[out], out

    def gather_index(self, kept: np.ndarray) -> np.ndarray:
        """Neighbour columns for ``kept`` offsets with -1 redirected to a zero pad row."""
        key = kept.tobytes()
        idx = self._cols.get(key)
        if idx is None:
            idx = self.nbr[:, kept].copy()
            idx[idx < 0] = self.n_in
            self._cols[key] = idx
        return idx

    def scatter_matrix(self, kept: np.ndarray) -> sp.csr_matrix:
        """Sparse (n_in, n_out * len(kept)) selection used by the backward pass."""
        key = kept.tobytes()
        mat = self._scatter.get(key)
        if mat is None:
            idx = self.nbr[:, kept].ravel()
            valid = np.nonzero(idx >= 0)[0]
            mat = sp.csr_matrix(
                (np.ones(len(valid)), (idx[valid], valid)),
                shape=(self.n_in, idx.size),
            )
            self._scatter[key] = mat
        return mat


def build_kernel_map(coords_in, coords_out, k: int) -> KernelMap:
    """Kernel map by key lookup of ``coords_in``.

    Both sets must be duplicate-free; ordering is arbitrary.
    """
    cin = as_batched(coords_in)
    cout = as_batched(coords_out)
    offs = kernel_offsets(k)
    keys_in = coord_keys(cin)
    order = np.argsort(keys_in, kind="stable")
    sorted_keys = keys_in[order]
    if len(sorted_keys) > 1 and np.any(np.diff(sorted_keys) == 0):
        raise ValueError("duplicate input coordinates")
    nbr = np.full((len(cout), len(offs)), -1, dtype=np.int64)
    if len(cin) == 0 or len(cout) == 0:
        return KernelMap(nbr, len(cin), k)
    for j, delta in enumerate(offs):
        q = cout.copy()
        q[:, 1:] += delta
        qk = coord_keys(q)
        pos = np.searchsorted(sorted_keys, qk)
        pos_c = np.minimum(pos, len(sorted_keys) - 1)
        hit = sorted_keys[pos_c] == qk
        nbr[hit, j] = order[pos_c[hit]]
    return KernelMap(nbr, len(cin), k)


def brute_force_kernel_map(coords_in, coords_out, k: int) -> list[set[tuple[int, int]]]:
    """O(N^2 k^3) reference: per offset, the set of (in, out) pairs."""
    cin = as_batched(coords_in).tolist()
    cout = as_batched(coords_out).tolist()
    result = []
    for delta in kernel_offsets(k).tolist():
        pairs = set()
        for o, co in enumerate(cout):
            for i, ci in enumerate(cin):
                if ci[0] == co[0] and all(ci[a + 1] == co[a + 1] + delta[a] for a in range(3)):
                    pairs.add((i, o))
        result.append(pairs)
    return result


@lru_cache(maxsize=32)
def grid_coords(d: int, batch: int = 1) -> np.ndarray:
    """All ``batch * d**3`` coordinates in (batch, raster) order."""
    r = np.arange(d)
    g = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    b = np.repeat(np.arange(batch), d ** 3)[:, None]
    out = np.hstack([b, np.tile(g, (batch, 1))]).astype(np.int64)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=32)
def grid_kernel_map(d: int, k: int, batch: int = 1) -> KernelMap:
    """Kernel map of the full grid onto itself (cached, shared read-only)."""
    g = grid_coords(d, batch)
    offs = kernel_offsets(k)
    nbr = np.full((len(g), len(offs)), -1, dtype=np.int64)
    xyz = g[:, 1:]
    base = np.arange(len(g))
    for j, (dx, dy, dz) in enumerate(offs):
        tgt = xyz + (dx, dy, dz)
        ok = np.all((tgt >= 0) & (tgt < d), axis=1)
        nbr[ok, j] = base[ok] + dx * d * d + dy * d + dz
    return KernelMap(nbr, len(g), k)


def sparse_into_grid_map(grid_map: KernelMap, grid_rows: np.ndarray) -> KernelMap:
    """Kernel map from a sparse input set onto the full grid.

    ``grid_rows[i]`` is the grid row of input ``i``. The result equals
    ``build_kernel_map(inputs, grid, k)`` but reuses the cached grid map.
    """
    lookup = np.full(grid_map.n_in + 1, -1, dtype=np.int64)
    lookup[grid_rows] = np.arange(len(grid_rows))
    nbr = lookup[grid_map.nbr]  # -1 indexes the trailing sentinel
    return KernelMap(nbr, len(grid_rows), grid_map.k)
