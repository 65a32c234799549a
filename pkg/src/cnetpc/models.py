"""Occupancy and colour context networks.

``OccupancyNet`` predicts, for every voxel of a ``d``-block in raster
order, the probability of it being occupied given the occupancy of all
earlier voxels. ``ColorNet`` predicts one colour channel per occupied point
given earlier points of that channel (masked main branch) and all
previously coded features at every point (unmasked side branch).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .pcloud import raster_index
from .sparsenn import (
    TYPE_A,
    TYPE_B,
    KernelMap,
    Linear,
    Param,
    ResidualBlock,
    SparseConv,
    build_kernel_map,
    digest,
    dump_params,
    elu,
    elu_backward,
    grid_kernel_map,
    load_params,
    softmax,
    softmax_ce,
    sparse_into_grid_map,
    sparse_to_dense,
    sparse_to_dense_backward,
)
from .sparsenn.kernelmap import as_batched

ALPHABETS = {"rgb": (2, 256, 256, 256), "ycocg": (2, 256, 512, 512)}
FEATURE_NAMES = {"rgb": ("geometry", "R", "G", "B"), "ycocg": ("geometry", "Y", "Co", "Cg")}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    channels: int = 32
    o_res_blocks: int = 2
    c_res_blocks: int = 10
    k_first: int = 5
    branch_layers: int = 2
    tail_layers: int = 2
    colorspace: str = "rgb"

    def __post_init__(self):
        if self.d < 2 or self.d & (self.d - 1):
            raise ConfigError(f"block size {self.d} is not a power of two")
        if self.colorspace not in ALPHABETS:
            raise ConfigError(f"unknown colorspace {self.colorspace!r}")
        if self.k_first % 2 == 0:
            raise ConfigError("first-layer kernel must be odd")

    @property
    def alphabets(self) -> tuple[int, int, int, int]:
        return ALPHABETS[self.colorspace]

    @property
    def bitdepth(self) -> int:
        """Highest bit depth among colour features; drives input normalization."""
        return 9 if self.colorspace == "ycocg" else 8


class CoordGraph:
    """Kernel maps over one fixed (batched) coordinate set, built on demand."""

    def __init__(self, coords):
        self.coords = as_batched(coords)
        self._maps: dict[int, KernelMap] = {}

    def __len__(self):
        return len(self.coords)

    def kmap(self, k: int) -> KernelMap:
        km = self._maps.get(k)
        if km is None:
            if k == 1:
                n = len(self.coords)
                km = KernelMap(np.arange(n, dtype=np.int64)[:, None], n, 1)
            else:
                km = build_kernel_map(self.coords, self.coords, k)
            self._maps[k] = km
        return km


def _seq_params(layers):
    out = []
    for layer in layers:
        out.extend(layer.params())
    return out


class OccupancyNet:
    """Typed-A first layer onto the full grid, type-B residual blocks, dense k=1 head."""

    def __init__(self, cfg: ModelConfig, rng=None):
        self.cfg = cfg
        c = cfg.channels
        self.first = SparseConv(1, c, cfg.k_first, TYPE_A, rng, name="occ.first")
        self.blocks = [ResidualBlock(c, TYPE_B, rng, name=f"occ.res{i}") for i in range(cfg.o_res_blocks)]
        self.head = Linear(c, 2, rng, zero_init=True, name="occ.head")

    def params(self) -> list[Param]:
        return _seq_params([self.first, *self.blocks, self.head])

    def forward(self, blocks: list[np.ndarray]):
        """Logits for ``len(blocks) * d**3`` voxels from block-local occupied coords."""
        d = self.cfg.d
        nb = len(blocks)
        size = nb * d ** 3
        rows = np.concatenate(
            [raster_index(np.asarray(c, dtype=np.int64).reshape(-1, 3), d) + b * d ** 3
             if len(c) else np.zeros(0, dtype=np.int64) for b, c in enumerate(blocks)]
        ) if nb else np.zeros(0, dtype=np.int64)
        km_first = sparse_into_grid_map(grid_kernel_map(d, self.cfg.k_first, nb), rows)
        kmaps = {1: grid_kernel_map(d, 1, nb), 3: grid_kernel_map(d, 3, nb)}
        x = np.ones((len(rows), 1))
        h, c_first = self.first.forward(x, km_first)
        h, e_first = elu(h)
        res_caches = []
        for blk in self.blocks:
            h, cache = blk.forward(h, kmaps)
            res_caches.append(cache)
        grid_rows = np.arange(size)
        dense = sparse_to_dense(h, grid_rows, size)
        logits, c_head = self.head.forward(dense)
        return logits, (c_first, e_first, res_caches, grid_rows, c_head)

    def backward(self, dlogits, tape) -> None:
        c_first, e_first, res_caches, grid_rows, c_head = tape
        g = self.head.backward(dlogits, c_head)
        g = sparse_to_dense_backward(g, grid_rows)
        for blk, cache in zip(reversed(self.blocks), reversed(res_caches)):
            g = blk.backward(g, cache)
        self.first.backward(elu_backward(g, e_first), c_first)

    def probabilities(self, coords) -> np.ndarray:
        logits, _ = self.forward([coords])
        return softmax(logits)


class ColorNet:
    """Masked main branch over one channel plus an unmasked branch over earlier features."""

    def __init__(self, cfg: ModelConfig, feature: int, rng=None):
        if feature not in (1, 2, 3):
            raise ConfigError("colour feature index must be 1, 2 or 3")
        self.cfg = cfg
        self.feature = feature
        self.alphabet = cfg.alphabets[feature]
        c = cfg.channels
        tag = f"col{feature}"
        self.first = SparseConv(1, c, cfg.k_first, TYPE_A, rng, name=f"{tag}.first")
        self.main = []
        for i in range(cfg.c_res_blocks):
            self.main.append(ResidualBlock(c, TYPE_B, rng, name=f"{tag}.res{i}"))
            self.main.append(SparseConv(c, c, 3, TYPE_B, rng, name=f"{tag}.conv{i}"))
        self.branch = [SparseConv(feature if i == 0 else c, c, 3, None, rng, name=f"{tag}.prev{i}")
                       for i in range(max(cfg.branch_layers, 1))]
        self.tail = [SparseConv(c, c, 3, TYPE_B, rng, name=f"{tag}.tail{i}") for i in range(cfg.tail_layers)]
        self.head = SparseConv(c, self.alphabet, 1, TYPE_B, zero_init=True, name=f"{tag}.head")

    def params(self) -> list[Param]:
        return _seq_params([self.first, *self.main, *self.branch, *self.tail, self.head])

    def forward(self, graph: CoordGraph, history: np.ndarray, previous: np.ndarray):
        """Logits (N, K). ``history``: (N, 1) normalized channel; ``previous``: (N, feature)."""
        n = len(graph)
        history = np.asarray(history, dtype=np.float64).reshape(n, 1)
        previous = np.asarray(previous, dtype=np.float64).reshape(n, -1)
        if previous.shape[1] != self.feature:
            raise ValueError(f"expected {self.feature} previous feature columns, got {previous.shape[1]}")
        tape = []
        h, cache = self.first.forward(history, graph.kmap(self.cfg.k_first))
        h, e = elu(h)
        tape.append(("conv", self.first, cache, e))
        kmaps = {1: graph.kmap(1), 3: graph.kmap(3)}
        for layer in self.main:
            if isinstance(layer, ResidualBlock):
                h, cache = layer.forward(h, kmaps)
                tape.append(("res", layer, cache, None))
            else:
                h, cache = layer.forward(h, kmaps[3])
                h, e = elu(h)
                tape.append(("conv", layer, cache, e))
        main_len = len(tape)
        p = previous
        for layer in self.branch:
            p, cache = layer.forward(p, kmaps[3])
            p, e = elu(p)
            tape.append(("conv", layer, cache, e))
        h = h + p
        for layer in self.tail:
            h, cache = layer.forward(h, kmaps[3])
            h, e = elu(h)
            tape.append(("conv", layer, cache, e))
        logits, cache = self.head.forward(h, kmaps[1])
        return logits, (tape, main_len, cache)

    def backward(self, dlogits, state) -> tuple[np.ndarray, np.ndarray]:
        """Accumulate parameter gradients; returns (d history, d previous)."""
        tape, main_len, head_cache = state
        g = self.head.backward(dlogits, head_cache)
        n_tail = len(self.tail)
        tail_part = tape[len(tape) - n_tail:]
        branch_part = tape[main_len:len(tape) - n_tail]
        main_part = tape[:main_len]
        for _, layer, cache, e in reversed(tail_part):
            g = layer.backward(elu_backward(g, e), cache)
        gp = g
        for _, layer, cache, e in reversed(branch_part):
            gp = layer.backward(elu_backward(gp, e), cache)
        gm = g
        for kind, layer, cache, e in reversed(main_part):
            if kind == "res":
                gm = layer.backward(gm, cache)
            else:
                gm = layer.backward(elu_backward(gm, e), cache)
        return gm, gp

    def probabilities(self, graph: CoordGraph, history, previous) -> np.ndarray:
        logits, _ = self.forward(graph, history, previous)
        return softmax(logits)


def ocnet_forward(model: OccupancyNet, coords) -> np.ndarray:
    """Dense ``(d**3, 2)`` occupancy probabilities for one block."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(c) and (c.min() < 0 or c.max() >= model.cfg.d):
        raise IndexError("block coordinate outside [0, d)^3")
    return model.probabilities(c)


def ccnet_forward(model: ColorNet, coords, history, previous, graph: CoordGraph | None = None) -> np.ndarray:
    """``(N, K)`` probabilities for one block's colour channel."""
    if graph is None:
        graph = CoordGraph(coords)
    if len(previous) != len(graph) or len(history) != len(graph):
        raise ValueError("branches are defined on different coordinate sets")
    return model.probabilities(graph, history, previous)


def total_loss(losses: list[float]) -> tuple[list[float], float]:
    """Four per-feature cross-entropies (bits) and their sum."""
    parts = [float(v) for v in losses]
    return parts, float(sum(parts))


def feature_loss(probs: np.ndarray, targets) -> float:
    """Mean ``-log2 p(target)`` over rows."""
    t = np.asarray(targets, dtype=np.int64)
    if len(t) == 0:
        return 0.0
    p = probs[np.arange(len(t)), t]
    return float(np.mean(-np.log2(p)))


def accuracy(probs: np.ndarray, targets) -> float:
    """Argmax hit rate; ``np.argmax`` already breaks ties toward the smallest index."""
    t = np.asarray(targets, dtype=np.int64)
    if len(t) == 0:
        return 1.0
    return float(np.mean(np.argmax(probs, axis=1) == t))


def logits_loss(logits: np.ndarray, targets) -> float:
    return softmax_ce(logits, targets)[0]


# --- bundle ----------------------------------------------------------------

BUNDLE_MAGIC = b"CNMB"
BUNDLE_VERSION = 1


class ModelBundle:
    """The four networks needed to code a cloud, plus their shared config."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.occupancy = OccupancyNet(cfg, rng)
        self.colors = [ColorNet(cfg, f, rng) for f in (1, 2, 3)]
        self._checksum: bytes | None = None

    @property
    def nets(self):
        return [self.occupancy, *self.colors]

    def to_bytes(self) -> bytes:
        cfgd = asdict(self.cfg)
        blobs = []
        for name, net in zip(("f0", "f1", "f2", "f3"), self.nets):
            blobs.append((name, dump_params(cfgd, [(p.name, p.value) for p in net.params()])))
        head = bytearray(BUNDLE_MAGIC)
        head += struct.pack("<BB", BUNDLE_VERSION, len(blobs))
        toc_size = sum(1 + len(n) + 16 for n, _ in blobs)
        offset = len(head) + toc_size
        for name, blob in blobs:
            head += struct.pack("<B", len(name)) + name.encode()
            head += struct.pack("<QQ", offset, len(blob))
            offset += len(blob)
        body = bytes(head) + b"".join(b for _, b in blobs)
        return body + digest(body)

    def checksum(self) -> bytes:
        """8-byte identity of the current parameters."""
        return digest(self.to_bytes())

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelBundle":
        from .sparsenn import ParamFileError

        if data[:4] != BUNDLE_MAGIC or len(data) < 14:
            raise ParamFileError("not a model bundle")
        if digest(data[:-8]) != data[-8:]:
            raise ParamFileError("model bundle checksum mismatch")
        version, count = struct.unpack_from("<BB", data, 4)
        if version != BUNDLE_VERSION or count != 4:
            raise ParamFileError("unsupported model bundle")
        pos = 6
        entries = []
        for _ in range(count):
            ln = data[pos]
            name = data[pos + 1:pos + 1 + ln].decode()
            off, size = struct.unpack_from("<QQ", data, pos + 1 + ln)
            entries.append((name, off, size))
            pos += 1 + ln + 16
        loaded = [load_params(data[off:off + size]) for _, off, size in entries]
        cfg = ModelConfig(**loaded[0][0])
        bundle = cls(cfg)
        for net, (c, named) in zip(bundle.nets, loaded):
            if ModelConfig(**c) != cfg:
                raise ParamFileError("networks disagree on configuration")
            params = net.params()
            if [p.name for p in params] != [n for n, _ in named]:
                raise ParamFileError("parameter layout does not match configuration")
            for p, (_, arr) in zip(params, named):
                if p.value.shape != arr.shape:
                    raise ParamFileError(f"shape mismatch for {p.name}")
                p.value[...] = arr
        return bundle

    @classmethod
    def load(cls, path) -> "ModelBundle":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def describe(self) -> str:
        return json.dumps(asdict(self.cfg), sort_keys=True)
