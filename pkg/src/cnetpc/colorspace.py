"""Reversible integer RGB <-> YCoCg (lifting form).

Luma stays 8-bit; the two chroma channels span 9 bits and are stored
offset-binary (+256) so every coded symbol is a non-negative index.
"""

from __future__ import annotations

import numpy as np

CHROMA_OFFSET = 256


def rgb_to_ycocg(r, g, b):
    """Forward lifting. Works on Python ints or integer numpy arrays."""
    r, g, b = (np.asarray(v, dtype=np.int64) for v in (r, g, b))
    co = r - b
    t = b + (co >> 1)
    cg = g - t
    y = t + (cg >> 1)
    out = (y, co + CHROMA_OFFSET, cg + CHROMA_OFFSET)
    if np.ndim(y) == 0:
        return tuple(int(v) for v in out)
    return out


def ycocg_to_rgb(y, co, cg):
    y, co, cg = (np.asarray(v, dtype=np.int64) for v in (y, co, cg))
    co = co - CHROMA_OFFSET
    cg = cg - CHROMA_OFFSET
    t = y - (cg >> 1)
    g = cg + t
    b = t - (co >> 1)
    r = b + co
    for v in (r, g, b):
        if np.any(v < 0) or np.any(v > 255):
            raise ValueError("YCoCg triple outside the image of the forward transform")
    if np.ndim(r) == 0:
        return int(r), int(g), int(b)
    return r, g, b


def rgb_array_to_ycocg(rgb: np.ndarray) -> np.ndarray:
    """(N, 3) RGB -> (N, 3) [Y, Co+256, Cg+256]."""
    rgb = np.asarray(rgb, dtype=np.int64).reshape(-1, 3)
    return np.stack(rgb_to_ycocg(rgb[:, 0], rgb[:, 1], rgb[:, 2]), axis=1).reshape(-1, 3)


def ycocg_array_to_rgb(ycc: np.ndarray) -> np.ndarray:
    ycc = np.asarray(ycc, dtype=np.int64).reshape(-1, 3)
    return np.stack(ycocg_to_rgb(ycc[:, 0], ycc[:, 1], ycc[:, 2]), axis=1).reshape(-1, 3)


def exhaustive_roundtrip_mismatches(chunk_bits: int = 20) -> int:
    """Round-trip every 24-bit RGB triple and count failures."""
    mismatches = 0
    total = 1 << 24
    step = 1 << chunk_bits
    for start in range(0, total, step):
        v = np.arange(start, start + step, dtype=np.int64)
        r, g, b = v >> 16, (v >> 8) & 255, v & 255
        y, co, cg = rgb_to_ycocg(r, g, b)
        if y.min() < 0 or y.max() > 255 or co.min() < 0 or co.max() > 511 or cg.min() < 0 or cg.max() > 511:
            mismatches += 1
        r2, g2, b2 = ycocg_to_rgb(y, co, cg)
        mismatches += int(np.count_nonzero((r2 != r) | (g2 != g) | (b2 != b)))
    return mismatches
