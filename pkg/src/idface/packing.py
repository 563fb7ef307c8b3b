"""Digit packing of sign-split ternary templates into big integers.

Templates ``z_1..z_m`` are split into binary vectors and stacked as base-B
digits, ``x+ = sum_i B^(i-1) z_i+`` (likewise for ``x-``), with
``B = 2^ceil(log2 p)`` and ``p = min(alpha, beta) + 1``.  A single inner
product against a binary query then scores all ``m`` templates at once,
each result sitting in its own digit without carrying.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CapacityTooSmall, DimensionMismatch, Overflow, TooManyTemplates

__all__ = [
    "PackingParams",
    "PackedVector",
    "capacity",
    "encode",
    "decode",
    "decode_many",
]


@dataclass(frozen=True)
class PackingParams:
    p: int
    m: int
    slot_bits: int

    def __post_init__(self):
        if self.p < 2:
            raise ValueError(f"digit bound p={self.p} must be >= 2")
        if self.m < 1:
            raise CapacityTooSmall(f"m={self.m}: no template fits in a slot")
        if self.m * self.digit_bits > self.slot_bits:
            raise CapacityTooSmall(
                f"{self.m} digits of {self.digit_bits} bits exceed {self.slot_bits} slot bits"
            )

    @property
    def digit_bits(self) -> int:
        return (self.p - 1).bit_length()

    @property
    def radix(self) -> int:
        return 1 << self.digit_bits

    @property
    def max_score(self) -> int:
        return self.p - 1

    @property
    def bound(self) -> int:
        """Exclusive upper bound on a packed value."""
        return 1 << (self.m * self.digit_bits)


def capacity(slot_bits: int, alpha: int, beta: int) -> PackingParams:
    """Largest ``m`` fitting in ``slot_bits`` for enrolment/query sizes alpha, beta."""
    if alpha < 1 or beta < 1:
        raise ValueError("alpha and beta must be positive")
    p = min(alpha, beta) + 1
    width = (p - 1).bit_length()
    m = slot_bits // width
    if m < 1:
        raise CapacityTooSmall(
            f"{slot_bits} slot bits cannot hold one {width}-bit digit (p={p})"
        )
    return PackingParams(p=p, m=m, slot_bits=slot_bits)


@dataclass(frozen=True)
class PackedVector:
    digits: tuple[int, ...]
    params: PackingParams

    def __len__(self) -> int:
        return len(self.digits)

    def to_bytes(self) -> bytes:
        parts = [struct.pack(">I", len(self.digits))]
        for v in self.digits:
            raw = v.to_bytes((v.bit_length() + 7) // 8, "big")
            parts.append(struct.pack(">I", len(raw)))
            parts.append(raw)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, params: PackingParams) -> "PackedVector":
        (count,) = struct.unpack_from(">I", data, 0)
        off = 4
        digits = []
        for _ in range(count):
            (ln,) = struct.unpack_from(">I", data, off)
            off += 4
            if off + ln > len(data):
                raise ValueError("truncated packed vector")
            digits.append(int.from_bytes(data[off:off + ln], "big"))
            off += ln
        if off != len(data):
            raise ValueError("trailing bytes after packed vector")
        return cls(tuple(digits), params)


def _stack(bits: np.ndarray, width: int) -> list[int]:
    """Pack an (m, d) 0/1 array column-wise into d integers, row i at bit i*width."""
    m, d = bits.shape
    spread = np.zeros((d, m * width), dtype=np.uint8)
    spread[:, ::width] = bits.T
    raw = np.packbits(spread, axis=1, bitorder="little")
    return [int.from_bytes(row.tobytes(), "little") for row in raw]


def encode(templates, params: PackingParams) -> tuple[PackedVector, PackedVector]:
    """Stack up to ``m`` ternary templates into the packed pair ``(x+, x-)``.

    Short batches are padded with all-zero templates, which decode to a
    score of zero.
    """
    Z = np.atleast_2d(np.asarray(templates))
    if Z.shape[0] > params.m:
        raise TooManyTemplates(f"{Z.shape[0]} templates exceed capacity m={params.m}")
    if Z.shape[0] == 0:
        raise DimensionMismatch("no templates given")
    if not np.all((Z == -1) | (Z == 0) | (Z == 1)):
        raise ValueError("templates must be ternary")
    w = params.digit_bits
    plus = _stack((Z > 0).astype(np.uint8), w)
    minus = _stack((Z < 0).astype(np.uint8), w)
    return PackedVector(tuple(plus), params), PackedVector(tuple(minus), params)


def _digits(value: int, params: PackingParams) -> np.ndarray:
    w, m = params.digit_bits, params.m
    nbytes = (m * w + 7) // 8
    raw = np.frombuffer(value.to_bytes(nbytes, "little"), dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little")[: m * w].reshape(m, w)
    return bits.astype(np.int64) @ (1 << np.arange(w, dtype=np.int64))


def decode(s_plus: int, s_minus: int, params: PackingParams) -> list[int]:
    """Per-template signed scores ``digit_i(s_plus) - digit_i(s_minus)``."""
    return decode_many([s_plus], [s_minus], params)[0].tolist()


def decode_many(s_plus: Sequence[int], s_minus: Sequence[int], params: PackingParams) -> np.ndarray:
    """Vectorised :func:`decode`; returns an int64 array of shape (len, m)."""
    if len(s_plus) != len(s_minus):
        raise DimensionMismatch("plus and minus sequences differ in length")
    out = np.empty((len(s_plus), params.m), dtype=np.int64)
    for row, (sp, sm) in enumerate(zip(s_plus, s_minus)):
        sp, sm = int(sp), int(sm)
        if sp < 0 or sm < 0 or sp >= params.bound or sm >= params.bound:
            raise Overflow(f"packed value outside [0, 2^{params.m * params.digit_bits})")
        dp = _digits(sp, params)
        dm = _digits(sm, params)
        if dp.max(initial=0) >= params.p or dm.max(initial=0) >= params.p:
            raise Overflow(f"digit exceeds p-1={params.p - 1}; accumulation carried")
        out[row] = dp - dm
    return out
