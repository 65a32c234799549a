"""Block partitioning of a voxelized cloud and its octree signalling.

A cloud at bit depth ``n`` is cut into ``d = 2**log2_block`` cubes. The set
of occupied cubes is signalled breadth-first: one byte per internal node,
bit ``7 - child`` set when octant ``child`` is occupied, where the child
index follows the same x-major raster convention as voxels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pcloud import SparseTensor, lex_keys


class CorruptSignalError(ValueError):
    pass


@dataclass
class Block:
    origin: tuple[int, int, int]
    points: SparseTensor  # block-local coordinates in [0, d)


@dataclass
class Partition:
    n: int
    log2_block: int = 6
    blocks: list[Block] = field(default_factory=list)

    @property
    def d(self) -> int:
        return 1 << self.log2_block

    @property
    def origins(self) -> list[tuple[int, int, int]]:
        return [b.origin for b in self.blocks]

    def reassemble(self) -> SparseTensor:
        if not self.blocks:
            return SparseTensor(np.zeros((0, 3)), np.zeros((0, 0)), ())
        ref = self.blocks[0].points
        coords = np.concatenate([b.points.coords + np.asarray(b.origin) for b in self.blocks])
        feats = np.concatenate([b.points.features for b in self.blocks])
        order = np.argsort(lex_keys(coords), kind="stable")
        return SparseTensor(coords[order], feats[order], ref.bitdepths, ref.offset, ref.geometry_only)


def _block_sort_key(origins: np.ndarray) -> np.ndarray:
    return lex_keys(np.asarray(origins, dtype=np.int64).reshape(-1, 3))


def partition(cloud: SparseTensor, n: int, log2_block: int = 6) -> Partition:
    if log2_block > n:
        raise ValueError("block larger than the cloud grid")
    d = 1 << log2_block
    part = Partition(n, log2_block)
    if len(cloud) == 0:
        return part
    cell = cloud.coords >> log2_block
    keys = _block_sort_key(cell)
    order = np.argsort(keys, kind="stable")
    uniq, starts = np.unique(keys[order], return_index=True)
    bounds = list(starts) + [len(order)]
    for i in range(len(uniq)):
        rows = order[bounds[i]:bounds[i + 1]]
        origin = tuple(int(v) for v in cell[rows[0]] << log2_block)
        local = cloud.coords[rows] - np.asarray(origin)
        sub = np.argsort(lex_keys(local), kind="stable")
        pts = SparseTensor(local[sub], cloud.features[rows][sub], cloud.bitdepths,
                           cloud.offset, cloud.geometry_only)
        part.blocks.append(Block(origin, pts))
    assert all(b.points.coords.max() < d for b in part.blocks)
    return part


def encode_octree(p: Partition) -> bytes:
    """Breadth-first child-occupancy bytes locating ``p``'s blocks."""
    levels = p.n - p.log2_block
    if not p.blocks:
        return b""
    cells = {tuple(int(v) >> p.log2_block for v in b.origin) for b in p.blocks}
    out = bytearray()
    frontier = [(0, 0, 0)]
    for level in range(levels):
        shift = levels - level - 1
        nxt = []
        occupied_children = {}
        for c in cells:
            parent = (c[0] >> (shift + 1), c[1] >> (shift + 1), c[2] >> (shift + 1))
            child = (((c[0] >> shift) & 1) << 2) | (((c[1] >> shift) & 1) << 1) | ((c[2] >> shift) & 1)
            occupied_children.setdefault(parent, set()).add(child)
        for node in frontier:
            byte = 0
            for child in range(8):
                if child in occupied_children[node]:
                    byte |= 0x80 >> child
                    nxt.append((node[0] * 2 + (child >> 2), node[1] * 2 + ((child >> 1) & 1),
                                node[2] * 2 + (child & 1)))
            out.append(byte)
        frontier = nxt
    return bytes(out)


def decode_octree(signal: bytes, n: int, log2_block: int = 6) -> list[tuple[int, int, int]]:
    """Block origins in raster order. An empty signal with levels > 0 means no blocks."""
    levels = n - log2_block
    if levels < 0:
        raise ValueError("block larger than the cloud grid")
    if levels == 0:
        if signal:
            raise CorruptSignalError("octree bytes present for a single-block grid")
        return [(0, 0, 0)]
    if not signal:
        return []
    pos = 0
    frontier = [(0, 0, 0)]
    for _ in range(levels):
        nxt = []
        for node in frontier:
            if pos >= len(signal):
                raise CorruptSignalError(f"octree signal truncated at byte {pos}")
            byte = signal[pos]
            if byte == 0:
                raise CorruptSignalError(f"empty internal node at byte {pos}")
            pos += 1
            for child in range(8):
                if byte & (0x80 >> child):
                    nxt.append((node[0] * 2 + (child >> 2), node[1] * 2 + ((child >> 1) & 1),
                                node[2] * 2 + (child & 1)))
        frontier = nxt
    if pos != len(signal):
        raise CorruptSignalError(f"{len(signal) - pos} trailing octree bytes")
    cells = np.asarray(frontier, dtype=np.int64)
    cells = cells[np.argsort(_block_sort_key(cells), kind="stable")]
    return [tuple(int(v) << log2_block for v in c) for c in cells]
