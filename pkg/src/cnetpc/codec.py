"""Block-based lossless encoder/decoder.

Bitstream layout (little-endian)::

    magic "CNET" | version u8 | n u8 | log2_block u8 | flags u8
    | shift 3 x i32 | model checksum (8 bytes)
    | octree_len u32 | octree bytes
    | 4 feature groups, each: per block (in raster order of origins)
          payload_len u32 | point_count u32 | payload

flags: bit 0 = YCoCg colour, bit 1 = geometry only, bit 2 = empty cloud.
Colour groups of a geometry-only stream hold zero-length entries.

Inside a block, occupancy is coded for all ``d**3`` voxels in raster order,
then each colour feature for the occupied points in raster order. The first
symbol of each feature uses a uniform distribution.
"""

from __future__ import annotations

import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rangecoder as rc
from .blocktree import CorruptSignalError, decode_octree, encode_octree, partition
from .colorspace import ycocg_array_to_rgb
from .models import ConfigError, CoordGraph, ModelBundle, FEATURE_NAMES
from .pcloud import SparseTensor, lex_keys, raster_coords, raster_index
from .sparsenn import softmax
from .trainer import (
    channel_history,
    color_symbols,
    norm_params,
    normalize,
    previous_features,
)

MAGIC = b"CNET"
VERSION = 1
FLAG_YCOCG = 1
FLAG_GEOMETRY_ONLY = 2
FLAG_EMPTY = 4
_HEADER = struct.Struct("<4sBBBB3i8s")


class DecodeError(ValueError):
    pass


class ModelMismatchError(ValueError):
    pass


@dataclass
class Bitstream:
    n: int
    log2_block: int
    colorspace: str
    geometry_only: bool
    empty: bool
    shift: tuple[int, int, int]
    model_checksum: bytes
    octree: bytes
    groups: list[list[tuple[int, bytes]]]  # 4 x blocks x (point_count, payload)
    version: int = VERSION
    # filled by the encoder, not serialized
    quantized_bits: list[float] = field(default_factory=lambda: [0.0] * 4)
    model_bits: list[float] = field(default_factory=lambda: [0.0] * 4)
    timings: dict = field(default_factory=dict)

    @property
    def flags(self) -> int:
        return ((FLAG_YCOCG if self.colorspace == "ycocg" else 0)
                | (FLAG_GEOMETRY_ONLY if self.geometry_only else 0)
                | (FLAG_EMPTY if self.empty else 0))

    def to_bytes(self) -> bytes:
        out = bytearray(_HEADER.pack(MAGIC, self.version, self.n, self.log2_block, self.flags,
                                     *self.shift, self.model_checksum))
        out += struct.pack("<I", len(self.octree)) + self.octree
        for group in self.groups:
            for count, payload in group:
                out += struct.pack("<II", len(payload), count) + payload
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size + 4:
            raise DecodeError("bitstream shorter than its header")
        magic, version, n, log2_block, flags, sx, sy, sz, checksum = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise DecodeError("bad magic")
        if version != VERSION:
            raise DecodeError(f"unsupported bitstream version {version}")
        if flags & ~7:
            raise DecodeError("unknown flag bits")
        if log2_block > n:
            raise DecodeError("block size exceeds grid")
        pos = _HEADER.size
        (olen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        octree = data[pos:pos + olen]
        if len(octree) != olen:
            raise DecodeError("truncated octree section")
        pos += olen
        empty = bool(flags & FLAG_EMPTY)
        try:
            n_blocks = 0 if empty else len(decode_octree(octree, n, log2_block))
        except CorruptSignalError as exc:
            raise DecodeError(str(exc)) from exc
        groups = []
        for _ in range(4):
            group = []
            for _ in range(n_blocks):
                if pos + 8 > len(data):
                    raise DecodeError("truncated payload table")
                plen, count = struct.unpack_from("<II", data, pos)
                pos += 8
                payload = data[pos:pos + plen]
                if len(payload) != plen:
                    raise DecodeError("truncated payload")
                pos += plen
                group.append((count, payload))
            groups.append(group)
        if pos != len(data):
            raise DecodeError(f"{len(data) - pos} trailing bytes")
        return cls(n, log2_block, "ycocg" if flags & FLAG_YCOCG else "rgb",
                   bool(flags & FLAG_GEOMETRY_ONLY), empty, (sx, sy, sz), checksum, octree, groups, version)

    def feature_bits(self) -> list[int]:
        return [8 * sum(len(p) for _, p in g) for g in self.groups]

    def total_bits(self) -> int:
        return 8 * len(self.to_bytes())


@dataclass
class CodecStats:
    n_points: int
    n_blocks: int
    feature_names: tuple[str, ...]
    feature_bits: list[int]
    header_bits: int
    total_bits: int
    timings: dict = field(default_factory=dict)

    @property
    def feature_bpp(self) -> list[float]:
        return [b / self.n_points if self.n_points else 0.0 for b in self.feature_bits]

    @property
    def total_bpp(self) -> float:
        return self.total_bits / self.n_points if self.n_points else 0.0

    def as_dict(self) -> dict:
        return {
            "points": self.n_points,
            "blocks": self.n_blocks,
            "features": {
                name: {"bits": bits, "bpp": bpp}
                for name, bits, bpp in zip(self.feature_names, self.feature_bits, self.feature_bpp)
            },
            "header_bits": self.header_bits,
            "total_bits": self.total_bits,
            "total_bpp": self.total_bpp,
            "timings": self.timings,
        }


def stats(bs: Bitstream | bytes, cloud: SparseTensor | None = None) -> CodecStats:
    """Rate breakdown; per-feature bits count payload bytes only."""
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bytes(bs))
    n_points = len(cloud) if cloud is not None else sum(c for c, _ in bs.groups[0]) if bs.groups else 0
    fbits = bs.feature_bits()
    total = bs.total_bits()
    return CodecStats(n_points, len(bs.groups[0]) if bs.groups else 0, FEATURE_NAMES[bs.colorspace],
                      fbits, total - sum(fbits), total, dict(bs.timings))


# --- per-block coding ----------------------------------------------------------

class _Trace:
    """Collects every CDF handed to the coder, for encoder/decoder agreement checks."""

    def __init__(self):
        self.items: dict[tuple[int, int], list[bytes]] = {}

    def add(self, block: int, feature: int, cdf: np.ndarray) -> None:
        self.items.setdefault((block, feature), []).append(np.asarray(cdf, dtype=np.int64).tobytes())


def _check_models(bundle: ModelBundle, log2_block: int) -> None:
    if bundle.cfg.d != 1 << log2_block:
        raise ConfigError(f"models built for d={bundle.cfg.d}, stream uses d={1 << log2_block}")


def _model_bits(picked: np.ndarray) -> float:
    # probabilities that underflowed to 0.0 are reported at the smallest normal double
    return float(-np.sum(np.log2(np.maximum(picked, np.finfo(np.float64).tiny))))


def _encode_block(bundle: ModelBundle, local: SparseTensor, geometry_only: bool, trace=None, block_id=0):
    cfg = bundle.cfg
    d = cfg.d
    k_all = cfg.alphabets
    qbits = [0.0] * 4
    mbits = [0.0] * 4
    results = []

    occ = np.zeros(d ** 3, dtype=np.int64)
    occ[raster_index(local.coords, d)] = 1
    probs = softmax(bundle.occupancy.forward([local.coords])[0])
    cdfs = rc.quantize_rows(probs)
    cdfs[0] = rc.uniform_cdf(2)
    rows = np.arange(d ** 3)
    picked = probs[rows, occ]
    picked[0] = 0.5
    mass = cdfs[rows, occ + 1] - cdfs[rows, occ]
    qbits[0] = float(np.sum(rc.PRECISION - np.log2(mass)))
    mbits[0] = _model_bits(picked)
    if trace is not None:
        for c in cdfs:
            trace.add(block_id, 0, c)
    results.append((len(local), rc.encode(occ.tolist(), cdfs)))

    if geometry_only:
        return results + [(0, b"")] * 3, qbits, mbits
    symbols = color_symbols(local.features, cfg.colorspace)
    graph = CoordGraph(local.coords)
    for f, net in enumerate(bundle.colors, start=1):
        target = symbols[:, f - 1]
        probs = softmax(net.forward(graph, channel_history(symbols, f, cfg.colorspace),
                                    previous_features(symbols, f, cfg.colorspace))[0])
        cdfs = rc.quantize_rows(probs)
        cdfs[0] = rc.uniform_cdf(k_all[f])
        rows = np.arange(len(target))
        picked = probs[rows, target]
        picked[0] = 1.0 / k_all[f]
        mass = cdfs[rows, target + 1] - cdfs[rows, target]
        qbits[f] = float(np.sum(rc.PRECISION - np.log2(mass)))
        mbits[f] = _model_bits(picked)
        if trace is not None:
            for c in cdfs:
                trace.add(block_id, f, c)
        results.append((len(local), rc.encode(target.tolist(), cdfs)))
    return results, qbits, mbits


def _decode_block(bundle: ModelBundle, entries, geometry_only: bool, trace=None, block_id=0):
    """Re-run the networks after every decoded symbol that changes their input."""
    cfg = bundle.cfg
    d = cfg.d
    count, payload = entries[0]
    try:
        dec = rc.RangeDecoder(payload)
        occupied: list[int] = []
        probs = None
        uniform2 = rc.uniform_cdf(2)
        for i in range(d ** 3):
            if i == 0:
                cdf = uniform2
            else:
                if probs is None:
                    probs = softmax(bundle.occupancy.forward([raster_coords(occupied, d)])[0])
                cdf = rc.quantize_rows(probs[i:i + 1])[0]
            if trace is not None:
                trace.add(block_id, 0, cdf)
            if dec.decode(cdf):
                occupied.append(i)
                probs = None  # input changed: forward again before the next voxel
        dec.finish()
    except rc.CoderError as exc:
        raise DecodeError(f"block {block_id} geometry: {exc}") from exc
    if len(occupied) != count:
        raise DecodeError(f"block {block_id}: decoded {len(occupied)} points, header says {count}")
    coords = raster_coords(occupied, d).reshape(-1, 3)
    n = len(coords)
    if geometry_only:
        for f in (1, 2, 3):
            if entries[f][1] or entries[f][0]:
                raise DecodeError("colour payload in a geometry-only stream")
        return coords, np.zeros((n, 0), dtype=np.int64)

    graph = CoordGraph(coords)
    symbols = np.zeros((n, 3), dtype=np.int64)
    for f, net in enumerate(bundle.colors, start=1):
        fcount, payload = entries[f]
        if fcount != n:
            raise DecodeError(f"block {block_id} feature {f}: count {fcount} != {n} points")
        k = cfg.alphabets[f]
        npar = norm_params(cfg.colorspace, f)
        prev = previous_features(symbols, f, cfg.colorspace)
        hist = np.zeros((n, 1))
        try:
            dec = rc.RangeDecoder(payload)
            for i in range(n):
                if i == 0:
                    cdf = rc.uniform_cdf(k)
                else:
                    probs = softmax(net.forward(graph, hist, prev)[0])[i:i + 1]
                    cdf = rc.quantize_rows(probs)[0]
                if trace is not None:
                    trace.add(block_id, f, cdf)
                s = dec.decode(cdf)
                symbols[i, f - 1] = s
                hist[i, 0] = normalize(s, npar)
            dec.finish()
        except rc.CoderError as exc:
            raise DecodeError(f"block {block_id} feature {f}: {exc}") from exc
    return coords, symbols


# --- public API ------------------------------------------------------------------

def encode(cloud: SparseTensor, bundle: ModelBundle, n: int, workers: int = 8, trace=None) -> Bitstream:
    """Encode a voxelized cloud at bit depth ``n``."""
    t0 = time.perf_counter()
    cfg = bundle.cfg
    log2_block = int(math.log2(cfg.d))
    geometry_only = cloud.geometry_only or cloud.features.shape[1] == 0
    if not geometry_only and cloud.features.shape[1] != 3:
        raise ConfigError("expected three RGB feature columns")
    if len(cloud) and cloud.coords.max() >= 1 << n:
        raise ConfigError(f"cloud does not fit a {n}-bit grid")
    part = partition(cloud, n, log2_block)
    octree = encode_octree(part)
    blocks = part.blocks

    def work(item):
        i, blk = item
        return _encode_block(bundle, blk.points, geometry_only, trace, i)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, enumerate(blocks)))
    else:
        results = [work(item) for item in enumerate(blocks)]
    groups = [[r[0][f] for r in results] for f in range(4)]
    qbits = [sum(r[1][f] for r in results) for f in range(4)]
    mbits = [sum(r[2][f] for r in results) for f in range(4)]
    bs = Bitstream(n, log2_block, cfg.colorspace, geometry_only, len(cloud) == 0,
                   tuple(int(v) for v in cloud.offset), bundle.checksum(), octree, groups,
                   quantized_bits=qbits, model_bits=mbits)
    bs.timings["encode_s"] = time.perf_counter() - t0
    return bs


def decode(data: Bitstream | bytes, bundle: ModelBundle, workers: int = 8, trace=None) -> SparseTensor:
    t0 = time.perf_counter()
    bs = Bitstream.from_bytes(bytes(data)) if isinstance(data, (bytes, bytearray)) else data
    if bs.model_checksum != bundle.checksum():
        raise ModelMismatchError("bitstream was produced with different model parameters")
    if bs.colorspace != bundle.cfg.colorspace:
        raise ModelMismatchError("colour space of stream and models differ")
    _check_models(bundle, bs.log2_block)
    bitdepths = () if bs.geometry_only else (8, 8, 8)
    if bs.empty:
        return SparseTensor(np.zeros((0, 3)), np.zeros((0, len(bitdepths))), bitdepths, bs.shift, bs.geometry_only)
    origins = decode_octree(bs.octree, bs.n, bs.log2_block)

    def work(i):
        return _decode_block(bundle, [bs.groups[f][i] for f in range(4)], bs.geometry_only, trace, i)

    if workers > 1 and len(origins) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(len(origins))))
    else:
        results = [work(i) for i in range(len(origins))]

    coords = np.concatenate([c + np.asarray(o) for (c, _), o in zip(results, origins)])
    feats = np.concatenate([s for _, s in results])
    if not bs.geometry_only and bs.colorspace == "ycocg":
        try:
            feats = ycocg_array_to_rgb(feats)
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
    order = np.argsort(lex_keys(coords), kind="stable")
    out = SparseTensor(coords[order], feats[order], bitdepths, bs.shift, bs.geometry_only)
    bs.timings["decode_s"] = time.perf_counter() - t0
    return out


def encode_bytes(cloud: SparseTensor, bundle: ModelBundle, n: int, workers: int = 8) -> tuple[bytes, CodecStats]:
    bs = encode(cloud, bundle, n, workers)
    st = stats(bs, cloud)
    return bs.to_bytes(), st
