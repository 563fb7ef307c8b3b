"""Binary framing and message codecs.

Every frame is ``b"IDF1" | type:u8 | length:u64 | payload`` (big-endian).
Ciphertexts travel as opaque byte strings produced by the backend's
``serialize``; bit vectors travel packed MSB-first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import LengthMismatch, MalformedFrame, UnknownMessageType

MAGIC = b"IDF1"
HEADER = struct.Struct(">4sBQ")
HEADER_SIZE = HEADER.size  # 13
MAX_PAYLOAD = 1 << 34


# message type codes
SCORE_BATCH_REQUEST = 0x01
IDX_RESPONSE = 0x02
ENROLL_BROADCAST = 0x03
IDENTIFY_REQUEST = 0x04
IDENTIFY_REPLY = 0x05
ERROR_REPLY = 0x06
SHARE_UPLOAD = 0x10
QUERY_BROADCAST = 0x11
SUBVECTOR_REPLY = 0x12
ACK = 0x13


def pack_bits(bits) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def unpack_bits(data: bytes, count: int) -> np.ndarray:
    if (count + 7) // 8 != len(data):
        raise LengthMismatch(f"{len(data)} bytes cannot hold exactly {count} bits")
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=count)


def _bits_equal(a, b) -> bool:
    return np.array_equal(np.asarray(a, dtype=np.uint8), np.asarray(b, dtype=np.uint8))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.off + n > len(self.data):
            raise MalformedFrame("payload truncated")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def blob(self) -> bytes:
        (n,) = self.unpack(">I")
        return self.take(n)

    def done(self) -> None:
        if self.off != len(self.data):
            raise LengthMismatch(f"{len(self.data) - self.off} trailing payload bytes")


def _blob(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


# -- messages ----------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreEntry:
    n_valid: int
    ct_plus: bytes
    ct_minus: bytes


@dataclass(frozen=True)
class ScoreBatchRequest:
    """Encrypted per-batch score pairs plus what the key server needs to decode them."""

    p: int
    m: int
    tau_int: int
    entries: tuple = ()

    type_code = SCORE_BATCH_REQUEST

    @property
    def batch_count(self) -> int:
        return len(self.entries)

    def payload(self) -> bytes:
        out = [struct.pack(">IIqI", self.p, self.m, self.tau_int, len(self.entries))]
        for e in self.entries:
            out.append(struct.pack(">I", e.n_valid))
            out.append(_blob(e.ct_plus))
            out.append(_blob(e.ct_minus))
        return b"".join(out)

    @classmethod
    def parse(cls, r: _Reader) -> "ScoreBatchRequest":
        p, m, tau, count = r.unpack(">IIqI")
        entries = []
        for _ in range(count):
            (nv,) = r.unpack(">I")
            entries.append(ScoreEntry(nv, r.blob(), r.blob()))
        return cls(p, m, tau, tuple(entries))


@dataclass(frozen=True)
class IdxResponse:
    accept: bool
    batch_idx: int = 0
    within_idx: int = 0

    type_code = IDX_RESPONSE

    def payload(self) -> bytes:
        if not self.accept:
            return b"\x00"
        return struct.pack(">BII", 1, self.batch_idx, self.within_idx)

    @classmethod
    def parse(cls, r: _Reader) -> "IdxResponse":
        (flag,) = r.unpack(">B")
        if flag == 0:
            return cls(False)
        if flag != 1:
            raise MalformedFrame(f"bad IdxResponse flag {flag}")
        b, w = r.unpack(">II")
        return cls(True, b, w)


@dataclass(frozen=True, eq=False)
class EnrollBroadcast:
    """Transformed template and identity relayed to peer servers."""

    identity: str
    plus: np.ndarray
    minus: np.ndarray

    type_code = ENROLL_BROADCAST

    def __eq__(self, other):
        return (isinstance(other, EnrollBroadcast) and self.identity == other.identity
                and _bits_equal(self.plus, other.plus) and _bits_equal(self.minus, other.minus))

    def payload(self) -> bytes:
        d = len(self.plus)
        return (_blob(self.identity.encode()) + struct.pack(">I", d)
                + pack_bits(self.plus) + pack_bits(self.minus))

    @classmethod
    def parse(cls, r: _Reader) -> "EnrollBroadcast":
        ident = r.blob().decode()
        (d,) = r.unpack(">I")
        nb = (d + 7) // 8
        return cls(ident, unpack_bits(r.take(nb), d), unpack_bits(r.take(nb), d))


@dataclass(frozen=True, eq=False)
class IdentifyRequest:
    template: np.ndarray
    tau: float

    type_code = IDENTIFY_REQUEST

    def __eq__(self, other):
        return (isinstance(other, IdentifyRequest) and self.tau == other.tau
                and np.array_equal(self.template, other.template))

    def payload(self) -> bytes:
        t = np.asarray(self.template, dtype=">f8")
        return struct.pack(">dI", self.tau, t.size) + t.tobytes()

    @classmethod
    def parse(cls, r: _Reader) -> "IdentifyRequest":
        tau, d = r.unpack(">dI")
        arr = np.frombuffer(r.take(8 * d), dtype=">f8").astype(np.float64)
        return cls(arr, tau)


@dataclass(frozen=True)
class IdentifyReply:
    accept: bool
    identity: str = ""

    type_code = IDENTIFY_REPLY

    def payload(self) -> bytes:
        return struct.pack(">B", int(self.accept)) + _blob(self.identity.encode())

    @classmethod
    def parse(cls, r: _Reader) -> "IdentifyReply":
        (flag,) = r.unpack(">B")
        return cls(bool(flag), r.blob().decode())


@dataclass(frozen=True)
class ErrorReply:
    message: str

    type_code = ERROR_REPLY

    def payload(self) -> bytes:
        return self.message.encode()

    @classmethod
    def parse(cls, r: _Reader) -> "ErrorReply":
        return cls(r.take(len(r.data) - r.off).decode(errors="replace"))


@dataclass(frozen=True, eq=False)
class ShareUpload:
    """One party's XOR shares of an enrolled template."""

    identity: str
    plus: np.ndarray
    minus: np.ndarray

    type_code = SHARE_UPLOAD

    def __eq__(self, other):
        return (isinstance(other, ShareUpload) and self.identity == other.identity
                and _bits_equal(self.plus, other.plus) and _bits_equal(self.minus, other.minus))

    payload = EnrollBroadcast.payload

    @classmethod
    def parse(cls, r: _Reader) -> "ShareUpload":
        b = EnrollBroadcast.parse(r)
        return cls(b.identity, b.plus, b.minus)


@dataclass(frozen=True, eq=False)
class QueryBroadcast:
    plus: np.ndarray
    minus: np.ndarray

    type_code = QUERY_BROADCAST

    def __eq__(self, other):
        return (isinstance(other, QueryBroadcast) and _bits_equal(self.plus, other.plus)
                and _bits_equal(self.minus, other.minus))

    def payload(self) -> bytes:
        return struct.pack(">I", len(self.plus)) + pack_bits(self.plus) + pack_bits(self.minus)

    @classmethod
    def parse(cls, r: _Reader) -> "QueryBroadcast":
        (d,) = r.unpack(">I")
        nb = (d + 7) // 8
        return cls(unpack_bits(r.take(nb), d), unpack_bits(r.take(nb), d))

    @property
    def bit_count(self) -> int:
        return 2 * len(self.plus)


@dataclass(frozen=True, eq=False)
class SubvectorReply:
    """Per identity, the concatenated subvectors ``z+[y+] | z-[y-] | z+[y-] | z-[y+]``.

    ``bits`` has shape (D, k_plus + k_minus + k_minus + k_plus).
    """

    k_plus: int
    k_minus: int
    bits: np.ndarray

    type_code = SUBVECTOR_REPLY

    def __eq__(self, other):
        return (isinstance(other, SubvectorReply) and (self.k_plus, self.k_minus) == (other.k_plus, other.k_minus)
                and _bits_equal(self.bits, other.bits))

    @property
    def bit_count(self) -> int:
        return int(np.asarray(self.bits).size)

    def payload(self) -> bytes:
        bits = np.asarray(self.bits, dtype=np.uint8)
        D = bits.shape[0] if bits.ndim == 2 else 0
        return struct.pack(">III", self.k_plus, self.k_minus, D) + pack_bits(bits.reshape(-1))

    @classmethod
    def parse(cls, r: _Reader) -> "SubvectorReply":
        kp, km, D = r.unpack(">III")
        width = 2 * (kp + km)
        total = D * width
        flat = unpack_bits(r.take((total + 7) // 8), total)
        return cls(kp, km, flat.reshape(D, width))


@dataclass(frozen=True)
class Ack:
    count: int = 0

    type_code = ACK

    def payload(self) -> bytes:
        return struct.pack(">Q", self.count)

    @classmethod
    def parse(cls, r: _Reader) -> "Ack":
        return cls(*r.unpack(">Q"))


Message = Union[ScoreBatchRequest, IdxResponse, EnrollBroadcast, IdentifyRequest, IdentifyReply,
                ErrorReply, ShareUpload, QueryBroadcast, SubvectorReply, Ack]

_REGISTRY = {
    cls.type_code: cls
    for cls in (ScoreBatchRequest, IdxResponse, EnrollBroadcast, IdentifyRequest, IdentifyReply,
                ErrorReply, ShareUpload, QueryBroadcast, SubvectorReply, Ack)
}


def wire_encode(msg) -> bytes:
    body = msg.payload()
    return HEADER.pack(MAGIC, msg.type_code, len(body)) + body


def parse_header(header: bytes) -> tuple[int, int]:
    if len(header) < HEADER_SIZE:
        raise MalformedFrame(f"frame shorter than the {HEADER_SIZE}-byte header")
    magic, mtype, length = HEADER.unpack(header[:HEADER_SIZE])
    if magic != MAGIC:
        raise MalformedFrame(f"bad magic {magic!r}")
    if mtype not in _REGISTRY:
        raise UnknownMessageType(f"unknown message type 0x{mtype:02x}")
    if length > MAX_PAYLOAD:
        raise MalformedFrame(f"declared payload of {length} bytes is too large")
    return mtype, length


def wire_decode(frame: bytes):
    mtype, length = parse_header(frame)
    body = frame[HEADER_SIZE:]
    if len(body) < length:
        raise MalformedFrame(f"frame truncated: {len(body)} of {length} payload bytes")
    if len(body) > length:
        raise LengthMismatch(f"{len(body) - length} bytes beyond the declared payload")
    r = _Reader(body)
    msg = _REGISTRY[mtype].parse(r)
    r.done()
    return msg


# -- stream helpers ------------------------------------------------------------------

def recv_exact(sock, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise MalformedFrame(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def recv_frame(sock) -> bytes:
    header = recv_exact(sock, HEADER_SIZE)
    _, length = parse_header(header)
    return header + recv_exact(sock, length)


def send_frame(sock, frame: bytes) -> None:
    sock.sendall(frame)
