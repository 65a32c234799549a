"""Parameter file format.

::

    magic "CNPM" | version u8 | header_len u32 | header (UTF-8 JSON)
    | float64 LE blocks in declaration order | blake2b-64 digest of all preceding bytes

The JSON header carries the architecture config and the name and shape of
every parameter block.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"CNPM"
VERSION = 1


class ParamFileError(ValueError):
    pass


def digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def dump_params(config: dict, named: list[tuple[str, np.ndarray]]) -> bytes:
    header = {
        "config": config,
        "params": [{"name": n, "shape": list(a.shape)} for n, a in named],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<BI", VERSION, len(hbytes))
    body += hbytes
    for _, a in named:
        body += np.ascontiguousarray(a, dtype="<f8").tobytes()
    return bytes(body) + digest(bytes(body))


def load_params(blob: bytes) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    if len(blob) < 17 or blob[:4] != MAGIC:
        raise ParamFileError("not a parameter file")
    if digest(blob[:-8]) != blob[-8:]:
        raise ParamFileError("parameter file checksum mismatch")
    version, hlen = struct.unpack_from("<BI", blob, 4)
    if version != VERSION:
        raise ParamFileError(f"unsupported parameter file version {version}")
    pos = 9
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    named = []
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(blob) - 8:
            raise ParamFileError("parameter file truncated")
        named.append((entry["name"], np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).copy()))
        pos = end
    if pos != len(blob) - 8:
        raise ParamFileError("trailing bytes in parameter file")
    return header["config"], named
