import random

import numpy as np
import pytest

from idface import wire
from idface.errors import LengthMismatch, MalformedFrame, UnknownMessageType


def bits(rng, *shape):
    return rng.integers(0, 2, size=shape, dtype=np.uint8)


def random_message(rng, rnd):
    kind = rnd.randrange(10)
    blob = lambda: bytes(rnd.randrange(256) for _ in range(rnd.randrange(40)))  # noqa: E731
    d = rnd.randrange(1, 70)
    if kind == 0:
        entries = tuple(wire.ScoreEntry(rnd.randrange(400), blob(), blob()) for _ in range(rnd.randrange(4)))
        return wire.ScoreBatchRequest(rnd.randrange(2, 400), rnd.randrange(1, 400), rnd.randrange(-5, 400), entries)
    if kind == 1:
        return wire.IdxResponse(False) if rnd.random() < 0.5 else wire.IdxResponse(
            True, rnd.randrange(1 << 32), rnd.randrange(1 << 32))
    if kind == 2:
        return wire.EnrollBroadcast(f"id{rnd.randrange(1000)}", bits(rng, d), bits(rng, d))
    if kind == 3:
        return wire.IdentifyRequest(rng.standard_normal(d), rnd.random())
    if kind == 4:
        return wire.IdentifyReply(rnd.random() < 0.5, f"id{rnd.randrange(9)}")
    if kind == 5:
        return wire.ErrorReply(f"boom {rnd.randrange(9)}")
    if kind == 6:
        return wire.ShareUpload(f"s{rnd.randrange(9)}", bits(rng, d), bits(rng, d))
    if kind == 7:
        return wire.QueryBroadcast(bits(rng, d), bits(rng, d))
    if kind == 8:
        kp, km = rnd.randrange(5), rnd.randrange(5)
        return wire.SubvectorReply(kp, km, bits(rng, rnd.randrange(6), 2 * (kp + km)))
    return wire.Ack(rnd.randrange(1 << 40))


def test_reject_frame_is_14_bytes():
    frame = wire.wire_encode(wire.IdxResponse(False))
    assert len(frame) == 14
    assert frame[:4] == b"IDF1" and frame[4] == wire.IDX_RESPONSE and frame[-1] == 0
    assert len(wire.wire_encode(wire.IdxResponse(True, 3, 7))) == 22


def test_roundtrip_random():
    rng, rnd = np.random.default_rng(0), random.Random(0)
    for _ in range(1000):
        msg = random_message(rng, rnd)
        assert wire.wire_decode(wire.wire_encode(msg)) == msg


def test_truncated_and_bad_frames():
    frame = wire.wire_encode(wire.IdxResponse(True, 1, 2))
    with pytest.raises(MalformedFrame):
        wire.wire_decode(frame[:-1])
    with pytest.raises(MalformedFrame):
        wire.wire_decode(frame[:5])
    with pytest.raises(LengthMismatch):
        wire.wire_decode(frame + b"\x00")
    with pytest.raises(MalformedFrame):
        wire.wire_decode(b"XXXX" + frame[4:])
    with pytest.raises(UnknownMessageType):
        wire.wire_decode(frame[:4] + b"\x7f" + frame[5:])
    bad_flag = wire.wire_encode(wire.IdxResponse(False))[:-1] + b"\x02"
    with pytest.raises(MalformedFrame):
        wire.wire_decode(bad_flag)


def test_payload_too_short_for_fields():
    frame = wire.wire_encode(wire.Ack(5))
    short = wire.HEADER.pack(wire.MAGIC, wire.ACK, 3) + frame[wire.HEADER_SIZE:][:3]
    with pytest.raises(MalformedFrame):
        wire.wire_decode(short)


def test_bit_packing():
    b = np.array([1, 0, 1, 1, 0, 0, 0, 0, 1], dtype=np.uint8)
    assert wire.pack_bits(b) == bytes([0b10110000, 0b10000000])
    assert np.array_equal(wire.unpack_bits(wire.pack_bits(b), 9), b)


class _FakeSock:
    def __init__(self, data, chunk=3):
        self.data, self.chunk = data, chunk

    def recv(self, n):
        out, self.data = self.data[:min(n, self.chunk)], self.data[min(n, self.chunk):]
        return out


def test_recv_frame_chunks():
    frame = wire.wire_encode(wire.IdentifyReply(True, "alice"))
    assert wire.recv_frame(_FakeSock(frame)) == frame
    with pytest.raises(MalformedFrame):
        wire.recv_frame(_FakeSock(frame[:-2]))
