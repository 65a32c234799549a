"""Point cloud data model, PLY I/O and voxelization.

Voxel coordinates are ordered in 3D raster-scan order: x varies slowest and
z fastest, i.e. ``index = x*d*d + y*d + z``. This ordering is part of the
bitstream contract.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np


class PlyError(ValueError):
    """Malformed or unsupported PLY input. ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class RawPointCloud:
    xyz: np.ndarray  # (N, 3) float64
    colors: np.ndarray  # (N, 3) uint8
    has_color: bool = True
    bitdepth: int | None = None

    def __len__(self) -> int:
        return len(self.xyz)


@dataclass
class SparseTensor:
    """Raster-sorted voxel coordinates with integer feature rows.

    ``offset`` is the world position of voxel (0, 0, 0); it lets a voxelized
    cloud be placed back where it came from.
    """

    coords: np.ndarray  # (N, 3) int64
    features: np.ndarray  # (N, k) int64
    bitdepths: tuple[int, ...] = ()
    offset: tuple[int, int, int] = (0, 0, 0)
    geometry_only: bool = field(default=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(self.features, dtype=np.int64)
        self.features = feats.reshape(len(self.coords), -1) if feats.size else np.zeros(
            (len(self.coords), len(self.bitdepths)), dtype=np.int64)
        if self.features.shape[1] != len(self.bitdepths):
            raise ValueError("one bit depth per feature column required")

    def __len__(self) -> int:
        return len(self.coords)

    def validate(self) -> None:
        if len(self.coords) > 1:
            keys = lex_keys(self.coords)
            if np.any(np.diff(keys) <= 0):
                raise ValueError("coords not strictly raster-sorted")
        if np.any(self.coords < 0):
            raise ValueError("negative voxel coordinate")
        for col, bd in enumerate(self.bitdepths):
            v = self.features[:, col]
            if v.size and (v.min() < 0 or v.max() >= 1 << bd):
                raise ValueError(f"feature column {col} exceeds {bd} bits")

    def equals(self, other: "SparseTensor") -> bool:
        return (
            self.coords.shape == other.coords.shape
            and np.array_equal(self.coords, other.coords)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and tuple(self.offset) == tuple(other.offset)
        )


def lex_keys(coords: np.ndarray) -> np.ndarray:
    """Pack non-negative coords (< 2**20 per axis) into raster-ordered int64 keys."""
    c = np.asarray(coords, dtype=np.int64)
    return (c[:, 0] << 40) | (c[:, 1] << 20) | c[:, 2]


def raster_index(c, d: int):
    """Raster index of coordinate(s) ``c`` inside a ``d``-cube.

    Accepts a single (x, y, z) triple or an (N, 3) array.
    """
    arr = np.asarray(c, dtype=np.int64)
    if np.any(arr < 0) or np.any(arr >= d):
        raise IndexError(f"coordinate {c} outside [0, {d})^3")
    if arr.ndim == 1:
        return int(arr[0] * d * d + arr[1] * d + arr[2])
    return arr[:, 0] * d * d + arr[:, 1] * d + arr[:, 2]


def raster_coords(index, d: int) -> np.ndarray:
    """Inverse of :func:`raster_index` for an array of indices."""
    idx = np.asarray(index, dtype=np.int64)
    return np.stack([idx // (d * d), (idx // d) % d, idx % d], axis=-1)


def to_global(origin, local, d: int, n: int = 16):
    o = np.asarray(origin, dtype=np.int64)
    loc = np.asarray(local, dtype=np.int64)
    if np.any(loc < 0) or np.any(loc >= d):
        raise IndexError("local coordinate outside block")
    g = o + loc
    if np.any(g >= 1 << n):
        raise IndexError(f"global coordinate overflows {n} bits")
    return g


def to_local(origin, coord, d: int):
    loc = np.asarray(coord, dtype=np.int64) - np.asarray(origin, dtype=np.int64)
    if np.any(loc < 0) or np.any(loc >= d):
        raise IndexError("coordinate not inside block")
    return loc


def voxelize(pc: RawPointCloud, n: int, shift: bool = False) -> SparseTensor:
    """Quantize a raw cloud onto the ``2**n`` grid.

    Coincident voxels are merged; the merged colour is the mean of the
    contributing colours rounded half up. With ``shift`` the grid is anchored
    at the floored minimum corner of the cloud.
    """
    if not 3 <= n <= 16:
        raise ValueError(f"bit depth {n} outside [3, 16]")
    xyz = np.asarray(pc.xyz, dtype=np.float64)
    offset = np.zeros(3, dtype=np.int64)
    if shift and len(xyz):
        offset = np.floor(xyz.min(axis=0)).astype(np.int64)
    q = np.floor(xyz - offset).astype(np.int64)
    if len(q) and (q.min() < 0 or q.max() >= 1 << n):
        raise IndexError(f"point outside [0, 2^{n}) after quantization")
    keys = lex_keys(q)
    uniq, inverse = np.unique(keys, return_inverse=True)
    coords = np.stack([uniq >> 40, (uniq >> 20) & 0xFFFFF, uniq & 0xFFFFF], axis=1)
    if pc.has_color:
        counts = np.bincount(inverse, minlength=len(uniq)).astype(np.int64)
        feats = np.empty((len(uniq), 3), dtype=np.int64)
        for ch in range(3):
            sums = np.bincount(inverse, weights=pc.colors[:, ch].astype(np.float64),
                               minlength=len(uniq)).astype(np.int64)
            feats[:, ch] = (2 * sums + counts) // (2 * counts)
        bitdepths = (8, 8, 8)
    else:
        feats = np.zeros((len(uniq), 0), dtype=np.int64)
        bitdepths = ()
    return SparseTensor(coords, feats, bitdepths, tuple(int(v) for v in offset),
                        geometry_only=not pc.has_color)


# --- PLY -----------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_COORD_TYPES = {"f4", "f8", "i4", "u4", "i2", "u2", "u1", "i1"}


@dataclass
class _Element:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype code)
    has_list: bool = False


def _parse_header(data: bytes):
    if not data.startswith(b"ply"):
        raise PlyError("missing 'ply' magic", 0)
    end = re.search(rb"end_header\r?\n", data)
    if end is None:
        raise PlyError("missing end_header", len(data))
    fmt = None
    elements: list[_Element] = []
    pos = 0
    for raw in data[: end.start()].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            pass
        elif tok[0] == "format":
            if len(tok) < 3 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PlyError(f"unsupported format line {line!r}", pos)
            fmt = tok[1]
        elif tok[0] == "element":
            try:
                elements.append(_Element(tok[1], int(tok[2])))
            except (IndexError, ValueError):
                raise PlyError(f"bad element line {line!r}", pos) from None
        elif tok[0] == "property":
            if not elements:
                raise PlyError("property before element", pos)
            if len(tok) >= 2 and tok[1] == "list":
                elements[-1].has_list = True
                elements[-1].props.append((tok[-1], "list"))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise PlyError(f"unsupported property {line!r}", pos)
        else:
            raise PlyError(f"unknown header keyword {tok[0]!r}", pos)
        pos += len(raw) + 1
    if fmt is None:
        raise PlyError("missing format line", 0)
    return fmt, elements, end.end()


def load_ply(path) -> RawPointCloud:
    with open(path, "rb") as f:
        data = f.read()
    return parse_ply(data)


def parse_ply(data: bytes) -> RawPointCloud:
    fmt, elements, body = _parse_header(data)
    vertex = next((e for e in elements if e.name == "vertex"), None)
    if vertex is None:
        raise PlyError("no vertex element", 0)
    names = [p[0] for p in vertex.props]
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex lacks property {axis}", 0)
        if dict(vertex.props)[axis] not in _COORD_TYPES:
            raise PlyError(f"unsupported type for {axis}", 0)
    has_color = all(c in names for c in ("red", "green", "blue"))
    if has_color and any(dict(vertex.props)[c] != "u1" for c in ("red", "green", "blue")):
        raise PlyError("colour properties must be uchar", 0)
    if vertex.has_list:
        raise PlyError("list properties on vertex are unsupported", 0)

    if fmt == "ascii":
        table = _read_ascii(data, body, elements, vertex)
    else:
        table = _read_binary(data, body, elements, vertex, "<" if fmt.endswith("little_endian") else ">")

    xyz = np.stack([table[a].astype(np.float64) for a in "xyz"], axis=1) if vertex.count else np.zeros((0, 3))
    if has_color and vertex.count:
        colors = np.stack([table[c].astype(np.uint8) for c in ("red", "green", "blue")], axis=1)
    else:
        colors = np.zeros((vertex.count, 3), dtype=np.uint8)
    return RawPointCloud(xyz.reshape(-1, 3), colors, has_color)


def _read_ascii(data, body, elements, vertex):
    pos = body
    rows = []
    for el in elements:
        for _ in range(el.count):
            if pos >= len(data):
                raise PlyError(f"truncated {el.name} element", pos)
            nl = data.find(b"\n", pos)
            nl = len(data) if nl < 0 else nl
            if el is vertex:
                tok = data[pos:nl].split()
                if len(tok) != len(el.props):
                    raise PlyError("wrong number of values in vertex row", pos)
                try:
                    rows.append([float(t) for t in tok])
                except ValueError:
                    raise PlyError("non-numeric vertex value", pos) from None
            pos = nl + 1
        if el is vertex:
            break
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, len(vertex.props))
    table = {}
    for col, (name, code) in enumerate(vertex.props):
        vals = arr[:, col]
        if code == "u1" and vals.size and (vals.min() < 0 or vals.max() > 255):
            raise PlyError(f"{name} value outside uchar range", body)
        table[name] = vals
    return table


def _read_binary(data, body, elements, vertex, endian):
    pos = body
    for el in elements:
        if el.has_list:
            raise PlyError(f"list property in element {el.name!r} is unsupported", pos)
        dtype = np.dtype([(name, endian + code) for name, code in el.props])
        size = dtype.itemsize * el.count
        if pos + size > len(data):
            raise PlyError(f"truncated {el.name} element", len(data))
        if el is vertex:
            return np.frombuffer(data, dtype=dtype, count=el.count, offset=pos)
        pos += size
    raise AssertionError("unreachable")


def write_ply(path, cloud: SparseTensor, binary: bool = False) -> None:
    """Write integer voxel positions (plus offset) and optional RGB."""
    with open(path, "wb") as f:
        f.write(format_ply(cloud, binary))


def format_ply(cloud: SparseTensor, binary: bool = False) -> bytes:
    xyz = cloud.coords + np.asarray(cloud.offset, dtype=np.int64)
    color = cloud.features.shape[1] == 3 and not cloud.geometry_only
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            f"element vertex {len(cloud)}",
            "property int x", "property int y", "property int z"]
    if color:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head.append("end_header")
    out = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        fields = [("x", "<i4"), ("y", "<i4"), ("z", "<i4")]
        if color:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        rec = np.zeros(len(cloud), dtype=fields)
        for i, a in enumerate("xyz"):
            rec[a] = xyz[:, i]
        if color:
            for i, a in enumerate(("red", "green", "blue")):
                rec[a] = cloud.features[:, i]
        return out + rec.tobytes()
    rows = np.hstack([xyz, cloud.features]) if color else xyz
    return out + "".join(" ".join(map(str, r)) + "\n" for r in rows.tolist()).encode("ascii")
