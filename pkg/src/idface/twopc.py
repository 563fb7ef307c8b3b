"""Secret-shared identification over XOR shares of sign-split templates.

Each party stores one XOR share of every enrolled ``(z+, z-)``.  For a
public query split ``(y+, y-)`` every party ANDs its shares with the query
(equivalently, reads the bits at the query's support), the helpers send
those subvectors to the initiating party, and the initiator XORs them
together and takes Hamming weights:

    <z, y> = HW(z+[y+]) + HW(z-[y-]) - HW(z+[y-]) - HW(z-[y+])

Shares are held packed 64 bits per word.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import wire
from .errors import DimensionMismatch, DuplicateId, IDFaceError, TransportFailure
from .protocol import MatchResult, Transcript, threshold_to_int
from .transform import BinarySplit, split, ternarize

__all__ = [
    "ShareSet",
    "BitMatrix",
    "gen_share",
    "subvector",
    "hamming_weight",
    "score_2pc",
    "score_shares",
    "SharingParty",
    "SecretSharedInitiator",
    "make_in_process_parties",
]


def hamming_weight(words) -> np.ndarray:
    """Population count summed over the last axis of a uint64 (or uint8) array."""
    return np.bitwise_count(np.asarray(words)).sum(axis=-1, dtype=np.int64)


def _pack_words(bits: np.ndarray) -> np.ndarray:
    bits = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    n, d = bits.shape
    width = -(-d // 64) * 64
    padded = np.zeros((n, width), dtype=np.uint8)
    padded[:, :d] = bits
    return np.packbits(padded, axis=1).view(">u8").astype(np.uint64)


def _unpack_words(words: np.ndarray, d: int) -> np.ndarray:
    raw = np.ascontiguousarray(words.astype(">u8")).view(np.uint8)
    return np.unpackbits(raw.reshape(words.shape[0], -1), axis=1)[:, :d]


class BitMatrix:
    """Growable matrix of d-bit rows, stored as packed uint64 words."""

    def __init__(self, d: int):
        self.d = int(d)
        self._words = np.zeros((0, -(-self.d // 64)), dtype=np.uint64)

    def __len__(self) -> int:
        return self._words.shape[0]

    @property
    def words(self) -> np.ndarray:
        return self._words

    def append(self, bits) -> None:
        bits = np.atleast_2d(bits)
        if bits.shape[1] != self.d:
            raise DimensionMismatch(f"row has {bits.shape[1]} bits, expected {self.d}")
        self._words = np.vstack([self._words, _pack_words(bits)])

    def bits(self) -> np.ndarray:
        return _unpack_words(self._words, self.d)

    def columns(self, mask) -> np.ndarray:
        """Bits of every row at the support of ``mask``, ascending index order."""
        idx = np.flatnonzero(np.asarray(mask))
        return self.bits()[:, idx]

    def and_popcount(self, mask) -> np.ndarray:
        """Per-row ``HW(row AND mask)`` on the packed words."""
        m = _pack_words(np.asarray(mask, dtype=np.uint8))[0]
        return hamming_weight(self._words & m)


@dataclass(frozen=True, eq=False)
class ShareSet:
    """XOR shares ``plus[k]``, ``minus[k]`` held by party ``k``."""

    plus: np.ndarray
    minus: np.ndarray

    @property
    def parties(self) -> int:
        return self.plus.shape[0]

    def reconstruct(self) -> np.ndarray:
        zp = np.bitwise_xor.reduce(self.plus, axis=0).astype(np.int8)
        zm = np.bitwise_xor.reduce(self.minus, axis=0).astype(np.int8)
        return zp - zm

    def party(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.plus[k], self.minus[k]


def gen_share(x, alpha: int, parties: int = 2, rng=None) -> ShareSet:
    """Ternarize ``x`` and XOR-share both sign halves among ``parties`` parties.

    The first ``parties - 1`` shares are uniform bits; the last one is the
    correction making the XOR equal to the split.
    """
    if parties < 2:
        raise ValueError("secret sharing needs at least 2 parties")
    rng = np.random.default_rng(rng)
    s = split(ternarize(np.asarray(x, dtype=np.float64), alpha))
    d = s.plus.shape[0]
    plus = np.empty((parties, d), dtype=np.uint8)
    minus = np.empty((parties, d), dtype=np.uint8)
    plus[:-1] = rng.integers(0, 2, size=(parties - 1, d), dtype=np.uint8)
    minus[:-1] = rng.integers(0, 2, size=(parties - 1, d), dtype=np.uint8)
    plus[-1] = np.bitwise_xor.reduce(plus[:-1], axis=0) ^ s.plus.astype(np.uint8)
    minus[-1] = np.bitwise_xor.reduce(minus[:-1], axis=0) ^ s.minus.astype(np.uint8)
    return ShareSet(plus, minus)


def subvector(share, mask) -> np.ndarray:
    """Bits of ``share`` at the support of ``mask``, lowest index first."""
    share = np.asarray(share, dtype=np.uint8)
    mask = np.asarray(mask)
    if share.shape[-1] != mask.shape[-1]:
        raise DimensionMismatch(f"share has {share.shape[-1]} bits, mask {mask.shape[-1]}")
    return share[..., np.flatnonzero(mask)]


def _query_split(query) -> BinarySplit:
    if isinstance(query, BinarySplit):
        return query
    return split(np.asarray(query))


def score_2pc(shares: ShareSet, query) -> int:
    """Score one shared template against a ternary query (or its split).

    Uses the full-vector route: each party ANDs its share with the query
    halves, and the XOR of those partial results is popcounted.
    """
    q = _query_split(query)
    if shares.plus.shape[1] != q.plus.shape[0]:
        raise DimensionMismatch("share and query dimensions differ")
    yp, ym = q.plus.astype(np.uint8), q.minus.astype(np.uint8)
    p1 = np.bitwise_xor.reduce(shares.plus & yp, axis=0)
    p2 = np.bitwise_xor.reduce(shares.minus & ym, axis=0)
    m1 = np.bitwise_xor.reduce(shares.plus & ym, axis=0)
    m2 = np.bitwise_xor.reduce(shares.minus & yp, axis=0)
    return int(p1.sum() + p2.sum()) - int(m1.sum() + m2.sum())


def _subvector_block(plus: BitMatrix, minus: BitMatrix, q: BinarySplit) -> np.ndarray:
    """Rows ``z+[y+] | z-[y-] | z+[y-] | z-[y+]`` for every stored template."""
    return np.hstack([plus.columns(q.plus), minus.columns(q.minus),
                      plus.columns(q.minus), minus.columns(q.plus)]).astype(np.uint8)


def score_shares(blocks: Sequence[np.ndarray], k_plus: int, k_minus: int) -> np.ndarray:
    """Scores from the parties' subvector blocks (XOR, then Hamming weight)."""
    acc = np.bitwise_xor.reduce(np.stack([np.asarray(b, dtype=np.uint8) for b in blocks]), axis=0)
    a = k_plus + k_minus
    pos = acc[:, :a].sum(axis=1, dtype=np.int64)
    neg = acc[:, a:].sum(axis=1, dtype=np.int64)
    return pos - neg


class SharingParty:
    """One share-holding server.  It answers share uploads and query broadcasts."""

    def __init__(self, d: int):
        self.d = int(d)
        self.ids: list = []
        self._seen: set = set()
        self.plus = BitMatrix(d)
        self.minus = BitMatrix(d)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.ids)

    def add(self, identity, plus, minus) -> None:
        with self._lock:
            if identity in self._seen:
                raise DuplicateId(f"identity {identity!r} is already enrolled")
            self.plus.append(plus)
            self.minus.append(minus)
            self.ids.append(identity)
            self._seen.add(identity)

    def save(self, path) -> None:
        with self._lock:
            np.savez(path, d=self.d, ids=np.asarray(self.ids, dtype=str),
                     plus=self.plus.words, minus=self.minus.words)

    @classmethod
    def load(cls, path) -> "SharingParty":
        with np.load(path) as f:
            party = cls(int(f["d"]))
            party.plus._words = f["plus"].astype(np.uint64)
            party.minus._words = f["minus"].astype(np.uint64)
            party.ids = [str(i) for i in f["ids"]]
        party._seen = set(party.ids)
        if not len(party.plus) == len(party.minus) == len(party.ids):
            raise ValueError(f"{path}: inconsistent share file")
        return party

    def dband(self, q: BinarySplit) -> np.ndarray:
        if q.plus.shape[0] != self.d:
            raise DimensionMismatch(f"query has d={q.plus.shape[0]}, party stores d={self.d}")
        return _subvector_block(self.plus, self.minus, q)

    def and_scores(self, q: BinarySplit) -> tuple[np.ndarray, ...]:
        """Per-row popcounts of the four ANDs on packed words (no subvectors)."""
        return (self.plus.and_popcount(q.plus), self.minus.and_popcount(q.minus),
                self.plus.and_popcount(q.minus), self.minus.and_popcount(q.plus))

    def handle(self, msg):
        if isinstance(msg, wire.ShareUpload):
            self.add(msg.identity, msg.plus, msg.minus)
            return wire.Ack(len(self))
        if isinstance(msg, wire.QueryBroadcast):
            q = BinarySplit(np.asarray(msg.plus, dtype=np.uint8), np.asarray(msg.minus, dtype=np.uint8))
            return wire.SubvectorReply(int(msg.plus.sum()), int(msg.minus.sum()), self.dband(q))
        return wire.ErrorReply(f"sharing party does not accept {type(msg).__name__}")


class SecretSharedInitiator:
    """The party that receives device requests and merges the others' replies.

    ``channels`` connect to the ``parties - 1`` helper parties (in-process or
    TCP, anything with ``request``).  Bits exchanged are tallied per call in
    ``last_bits`` with the query and reply payloads counted separately.
    """

    def __init__(self, d: int, alpha: int, beta: int, channels: Sequence, tau: float = 0.5, rng=None):
        if beta > alpha:
            raise ValueError(f"beta={beta} must not exceed alpha={alpha}")
        self.d, self.alpha, self.beta, self.tau = int(d), int(alpha), int(beta), float(tau)
        self.local = SharingParty(d)
        self.channels = list(channels)
        self.rng = np.random.default_rng(rng)
        self.last_bits = {"query": 0, "reply": 0}
        self.enroll_bits = 0

    @property
    def parties(self) -> int:
        return len(self.channels) + 1

    def enroll(self, x, identity) -> None:
        shares = gen_share(x, self.alpha, self.parties, self.rng)
        if str(identity) in self.local._seen:
            raise DuplicateId(f"identity {identity!r} is already enrolled")
        for k, ch in enumerate(self.channels, start=1):
            msg = wire.ShareUpload(str(identity), *shares.party(k))
            reply = ch.request(msg)
            if not isinstance(reply, wire.Ack):
                raise TransportFailure(f"share upload rejected: {reply}")
            self.enroll_bits += 2 * self.d
        self.local.add(str(identity), *shares.party(0))

    def scores(self, y) -> np.ndarray:
        if len(self.local) == 0:
            raise IDFaceError("database is empty")
        z = ternarize(np.asarray(y, dtype=np.float64), self.beta)
        q = split(z)
        msg = wire.QueryBroadcast(q.plus.astype(np.uint8), q.minus.astype(np.uint8))
        blocks = [self.local.dband(q)]
        bits = {"query": 0, "reply": 0}
        for ch in self.channels:
            reply = ch.request(msg)
            if not isinstance(reply, wire.SubvectorReply):
                raise TransportFailure(f"unexpected reply {type(reply).__name__}")
            if reply.bits.shape != blocks[0].shape:
                raise TransportFailure("helper database is out of sync with the initiator")
            bits["query"] += msg.bit_count
            bits["reply"] += reply.bit_count
            blocks.append(reply.bits)
        self.last_bits = bits
        return score_shares(blocks, int(q.plus.sum()), int(q.minus.sum()))

    def identify(self, y, tau: float | None = None) -> MatchResult:
        s = self.scores(y)
        best = int(np.argmax(s))
        tau = self.tau if tau is None else float(tau)
        if s[best] > threshold_to_int(tau, self.alpha, self.beta):
            return MatchResult(self.local.ids[best], True)
        return MatchResult.reject()


def make_in_process_parties(d: int, alpha: int, beta: int, parties: int = 2, tau: float = 0.5,
                            rng=None, transcript: Transcript | None = None):
    """An initiator wired to ``parties - 1`` in-process helpers."""
    from .protocol import InProcessChannel

    helpers = [SharingParty(d) for _ in range(parties - 1)]
    channels = [InProcessChannel(h.handle, transcript) for h in helpers]
    return SecretSharedInitiator(d, alpha, beta, channels, tau, rng), helpers



