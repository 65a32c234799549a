"""Deterministic 64-bit range coder with 16-bit quantized CDFs.

Payload format
--------------
The encoder keeps ``low`` (64 bits plus a carry) and ``range`` (64 bits).
Each symbol narrows the interval with ``r = range >> 16``::

    low   += r * cum[s]
    range  = r * (cum[s + 1] - cum[s])

Whenever ``range < 2**56`` the top byte of ``low`` is shifted out and
``range`` is scaled by 256. Carries are resolved with a one-byte cache plus
a run counter of pending 0xFF bytes (as in LZMA). The stream therefore
starts with one cache byte (always 0) and ends with a flush of the 8 bytes
of ``low``. The decoder reads 9 bytes up front, then one byte per
renormalization; it never reads past the end of a well-formed payload.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from typing import Callable, Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 64
_MASK = _TOP - 1
_RENORM = 1 << 56


class CoderError(ValueError):
    """Raised when a payload cannot be decoded consistently."""


def quantize_pmf(probs) -> np.ndarray:
    """Turn a probability vector into an integer CDF with total ``2**16``.

    Masses start at ``floor(p * 2**16)`` (after normalizing to sum 1); the
    deficit goes one unit at a time to the largest remainders, ties to the
    smaller index. Any symbol left at zero is then raised to one unit taken
    from the currently largest mass.
    """
    p = np.asarray(probs, dtype=np.float64).ravel()
    return quantize_rows(p[None, :])[0]


def quantize_rows(probs: np.ndarray) -> np.ndarray:
    """Row-wise :func:`quantize_pmf`; ``(M, K)`` -> ``(M, K + 1)`` CDFs.

    Every step is row-local (exact ``fsum`` normalizer, elementwise maths,
    stable per-row sort), so a row quantizes identically on its own or
    inside any batch.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ValueError("alphabet needs at least two symbols")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("probabilities must be finite and non-negative")
    sums = np.array([math.fsum(row) for row in p.tolist()])
    if np.any(sums <= 0):
        raise ValueError("all-zero probability vector")
    scaled = p * (TOTAL / sums)[:, None]
    mass = np.floor(scaled).astype(np.int64)
    deficit = TOTAL - mass.sum(axis=1)
    if np.any(deficit < 0):
        raise AssertionError("quantized mass exceeds the total")
    order = np.argsort(-(scaled - mass), axis=1, kind="stable")
    bump = (np.arange(p.shape[1])[None, :] < deficit[:, None]).astype(np.int64)
    np.put_along_axis(mass, order, np.take_along_axis(mass, order, axis=1) + bump, axis=1)
    zero_rows = np.nonzero((mass == 0).any(axis=1))[0]
    for r in zero_rows:
        row = mass[r]
        zeros = int(np.count_nonzero(row == 0))
        row[row == 0] = 1
        _take_units(row, zeros)
    cum = np.zeros((p.shape[0], p.shape[1] + 1), dtype=np.int64)
    np.cumsum(mass, axis=1, out=cum[:, 1:])
    return cum


def _take_units(mass: np.ndarray, units: int) -> None:
    """Remove ``units`` one at a time from the largest mass (ties -> lower index)."""
    while units:
        j = int(np.argmax(mass))
        m1 = int(mass[j])
        others = mass.copy()
        others[j] = -1
        j2 = int(np.argmax(others))
        m2 = int(others[j2])
        # j stays the argmax while it exceeds m2 (or equals it with j < j2)
        take = m1 - m2 + (1 if j < j2 else 0)
        take = max(1, min(take, units, m1 - 1))
        mass[j] -= take
        units -= take


def uniform_cdf(k: int) -> np.ndarray:
    return quantize_pmf(np.full(k, 1.0 / k))


def symbol_bits(cum: np.ndarray, s: int) -> float:
    return PRECISION - math.log2(int(cum[s + 1]) - int(cum[s]))


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.cache = 0
        self.pending = 1  # the cache byte itself counts as pending output
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF << 56 or self.low >= _TOP:
            carry = self.low >> 64
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.pending -= 1
                if not self.pending:
                    break
            self.cache = (self.low >> 56) & 0xFF
        self.pending += 1
        self.low = (self.low << 8) & _MASK

    def encode(self, cum, s: int) -> None:
        lo = int(cum[s])
        hi = int(cum[s + 1])
        if not 0 <= lo < hi <= TOTAL:
            raise ValueError(f"symbol {s} has no mass in the CDF")
        r = self.range >> PRECISION
        self.low += r * lo
        self.range = r * (hi - lo)
        while self.range < _RENORM:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(9):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, payload: bytes):
        self.data = payload
        self.pos = 0
        self.range = _MASK
        self.code = 0
        for _ in range(9):
            self.code = ((self.code << 8) | self._byte()) & _MASK
        if self.code >= self.range:
            raise CoderError("payload header inconsistent")

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise CoderError(f"payload exhausted at byte {self.pos}")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, cum) -> int:
        r = self.range >> PRECISION
        value = self.code // r
        if value >= TOTAL:
            raise CoderError(f"inconsistent code value near byte {self.pos}")
        s = bisect_right(cum, value) - 1 if isinstance(cum, list) else int(
            np.searchsorted(cum, value, side="right")) - 1
        lo = int(cum[s])
        hi = int(cum[s + 1])
        self.code -= r * lo
        self.range = r * (hi - lo)
        while self.range < _RENORM:
            self.range <<= 8
            self.code = ((self.code << 8) | self._byte()) & _MASK
        if self.code >= self.range:
            raise CoderError(f"inconsistent renormalization near byte {self.pos}")
        return s

    def finish(self) -> None:
        """Check the payload was consumed exactly.

        The encoder flushes every byte of ``low``, so a well-formed stream
        leaves ``code == 0`` after its last symbol.
        """
        if self.pos != len(self.data):
            raise CoderError(f"{len(self.data) - self.pos} unread payload bytes")
        if self.code != 0:
            raise CoderError("payload tail inconsistent with decoded symbols")


def encode(symbols: Sequence[int], cdfs: Sequence) -> bytes:
    enc = RangeEncoder()
    for s, cum in zip(symbols, cdfs, strict=True):
        enc.encode(cum, int(s))
    return enc.finish()


def decode(payload: bytes, count: int, cdf_provider: Callable[[int, list], object]) -> list[int]:
    """Decode ``count`` symbols; ``cdf_provider(i, decoded_so_far)`` yields each CDF."""
    dec = RangeDecoder(payload)
    out: list[int] = []
    for i in range(count):
        out.append(dec.decode(cdf_provider(i, out)))
    dec.finish()
    return out
