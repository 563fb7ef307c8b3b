"""Two-server identification: a local server holding ciphertexts and the
public key, and a key server holding only the secret key.

The local server scores every batch under encryption and ships the score
pairs; the key server decrypts, decodes, takes the global argmax and answers
with an index or a reject flag -- never with a score.
"""

from __future__ import annotations

import logging
import math
import socket
import socketserver
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import wire
from .dbenc import (
    IPStats,
    append_batch,
    batch_capacity,
    idface_enc_db,
    idface_ip_db,
    load_database,
)
from .errors import DuplicateId, IDFaceError, ParamMismatch, TransportFailure
from .packing import PackingParams, decode_many
from .transform import split, ternarize

log = logging.getLogger(__name__)

__all__ = [
    "MatchResult",
    "threshold_to_int",
    "KeyServer",
    "LocalServer",
    "InProcessChannel",
    "TCPChannel",
    "Transcript",
    "serve",
    "serve_key_server",
    "serve_local_server",
    "plaintext_identify",
    "ReplicatedLocalServers",
]


@dataclass(frozen=True)
class MatchResult:
    identity: object = None
    accepted: bool = False

    @classmethod
    def reject(cls) -> "MatchResult":
        return cls(None, False)


def threshold_to_int(tau: float, alpha: int, beta: int) -> int:
    """``ceil(tau * sqrt(alpha * beta))``: the integer score a match must exceed."""
    if not -1.0 <= tau <= 1.0:
        raise ValueError(f"threshold {tau} outside [-1, 1]")
    return math.ceil(tau * math.sqrt(alpha * beta))


def plaintext_identify(X, ids: Sequence, y, alpha: int, beta: int, tau: float) -> MatchResult:
    """Reference pipeline without encryption: ternarize, score, argmax, threshold."""
    Z = ternarize(np.atleast_2d(X), alpha).astype(np.int64)
    scores = Z @ ternarize(y, beta).astype(np.int64)
    best = int(np.argmax(scores))  # first maximum == lowest index
    if scores[best] > threshold_to_int(tau, alpha, beta):
        return MatchResult(ids[best], True)
    return MatchResult.reject()


# -- transcripts & channels ----------------------------------------------------------

@dataclass
class Transcript:
    """Raw frames seen on a channel, tagged ``"out"`` (sent) or ``"in"`` (received)."""

    frames: list = field(default_factory=list)

    def record(self, direction: str, frame: bytes) -> None:
        self.frames.append((direction, bytes(frame)))

    def bytes(self, direction: str | None = None) -> bytes:
        return b"".join(f for d, f in self.frames if direction is None or d == direction)

    def dump(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            for d, f in self.frames:
                fh.write(b"O" if d == "out" else b"I")
                fh.write(f)

    def clear(self) -> None:
        self.frames.clear()


class InProcessChannel:
    """Calls a handler directly but still round-trips every message through the codec."""

    def __init__(self, handler: Callable, transcript: Transcript | None = None):
        self.handler = handler
        self.transcript = transcript

    def request(self, msg):
        frame = wire.wire_encode(msg)
        if self.transcript is not None:
            self.transcript.record("out", frame)
        reply = self.handler(wire.wire_decode(frame))
        rframe = wire.wire_encode(reply)
        if self.transcript is not None:
            self.transcript.record("in", rframe)
        return wire.wire_decode(rframe)

    def close(self) -> None:
        pass


def _parse_addr(addr) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr
    host, _, port = str(addr).rpartition(":")
    return host or "127.0.0.1", int(port)


class TCPChannel:
    """Blocking request/response over one TCP connection."""

    def __init__(self, addr, transcript: Transcript | None = None, timeout: float = 300.0):
        self.addr = _parse_addr(addr)
        self.transcript = transcript
        try:
            self.sock = socket.create_connection(self.addr, timeout=timeout)
        except OSError as exc:
            raise TransportFailure(f"cannot connect to {self.addr}: {exc}") from exc
        self._lock = threading.Lock()

    def request(self, msg):
        frame = wire.wire_encode(msg)
        with self._lock:
            try:
                wire.send_frame(self.sock, frame)
                reply = wire.recv_frame(self.sock)
            except OSError as exc:
                raise TransportFailure(str(exc)) from exc
        if self.transcript is not None:
            self.transcript.record("out", frame)
            self.transcript.record("in", reply)
        out = wire.wire_decode(reply)
        if isinstance(out, wire.ErrorReply):
            raise TransportFailure(f"peer error: {out.message}")
        return out

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- key server ---------------------------------------------------------------------

class KeyServer:
    """Holds the secret key; turns encrypted score pairs into an index or a reject."""

    def __init__(self, backend):
        if backend.secret is None:
            raise ParamMismatch("the key server needs a backend with the secret key")
        self.backend = backend

    def handle(self, msg):
        if isinstance(msg, wire.ScoreBatchRequest):
            return self.find_best(msg)
        return wire.ErrorReply(f"key server does not accept {type(msg).__name__}")

    def find_best(self, req: wire.ScoreBatchRequest) -> wire.IdxResponse:
        params = PackingParams(req.p, req.m, req.m * max((req.p - 1).bit_length(), 1))
        best = None  # (score, batch, position)
        for b, entry in enumerate(req.entries):
            plus = self.backend.decrypt(self.backend.deserialize(entry.ct_plus))
            minus = self.backend.decrypt(self.backend.deserialize(entry.ct_minus))
            # rows are slots, columns digits: position = digit + m * slot
            scores = decode_many(plus, minus, params).reshape(-1)[: entry.n_valid]
            if scores.size == 0:
                continue
            pos = int(np.argmax(scores))
            s = int(scores[pos])
            if best is None or s > best[0]:
                best = (s, b, pos)
        if best is not None and best[0] > req.tau_int:
            return wire.IdxResponse(True, best[1], best[2])
        return wire.IdxResponse(False)


# -- local server -------------------------------------------------------------------

class LocalServer:
    """Holds the public key and the append-only encrypted database.

    Enrolment replaces the batch tuple atomically, so concurrent
    identifications always see a consistent snapshot.
    """

    def __init__(self, backend, d: int, alpha: int, beta: int, tau: float = 0.5,
                 channel=None, db_path: str | Path | None = None, threads: int = 1):
        if beta > alpha:
            raise ParamMismatch(f"beta={beta} must not exceed alpha={alpha}")
        if not 1 <= alpha <= d:
            raise ParamMismatch(f"alpha={alpha} outside [1, d={d}]")
        self.backend = backend.public_only()
        self.d, self.alpha, self.beta, self.tau = int(d), int(alpha), int(beta), float(tau)
        self.channel = channel
        self.db_path = Path(db_path) if db_path is not None else None
        self.threads = max(1, int(threads))
        self.packing, self.batch_size = batch_capacity(self.backend.descriptor, self.alpha, self.beta)
        self._batches: tuple = ()
        self._ids: set = set()
        self._write_lock = threading.Lock()
        self.last_stats: list = []

    # state -----------------------------------------------------------
    @property
    def db(self) -> tuple:
        return self._batches

    @property
    def enrolled(self) -> int:
        return sum(b.size for b in self._batches)

    def state_dict(self) -> dict:
        """Serializable view of the local state; carries no secret material."""
        pk = self.backend.public
        return {
            "d": self.d, "alpha": self.alpha, "beta": self.beta, "tau": self.tau,
            "public_n": hex(int(pk.n)) if hasattr(pk, "n") else None,
            "batches": [list(b.ids) for b in self._batches],
        }

    def load(self, path: str | Path | None = None) -> None:
        path = Path(path or self.db_path)
        batches, meta = load_database(path, self.backend)
        if (meta["d"], meta["alpha"]) != (self.d, self.alpha) or meta["p"] != self.packing.p:
            raise ParamMismatch("stored database parameters differ from this server's")
        with self._write_lock:
            self._batches = tuple(batches)
            self._ids = {i for b in batches for i in b.ids}

    # enrolment -------------------------------------------------------
    def enroll(self, X, ids: Sequence) -> int:
        """Encrypt and append templates; returns the number of new batches."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        ids = list(ids)
        if X.shape[1] != self.d:
            raise ParamMismatch(f"templates have d={X.shape[1]}, server expects {self.d}")
        if len(ids) != X.shape[0]:
            raise ValueError("ids and templates differ in length")
        with self._write_lock:
            seen = set(self._ids)
            for i in ids:
                if i in seen:
                    raise DuplicateId(f"identity {i!r} is already enrolled")
                seen.add(i)
            new = []
            for start in range(0, len(ids), self.batch_size):
                batch = idface_enc_db(X[start:start + self.batch_size], self.alpha, self.backend,
                                      ids=ids[start:start + self.batch_size], packing=self.packing)
                new.append(batch)
                if self.db_path is not None:
                    append_batch(self.db_path, batch, self.backend, self.beta)
            self._batches = self._batches + tuple(new)
            self._ids = seen
        return len(new)

    # identification ----------------------------------------------------
    def score(self, y, tau: float | None = None) -> wire.ScoreBatchRequest:
        batches = self._batches
        if not batches:
            raise IDFaceError("database is empty")
        y = np.asarray(y, dtype=np.float64)
        z = ternarize(y, self.beta)
        tau = self.tau if tau is None else float(tau)

        def one(batch):
            stats = IPStats()
            pair = idface_ip_db(None, batch, self.beta, self.backend, stats=stats, z=z)
            entry = wire.ScoreEntry(batch.size, self.backend.serialize(pair.ct_plus),
                                    self.backend.serialize(pair.ct_minus))
            return entry, stats

        if self.threads > 1 and len(batches) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                results = list(pool.map(one, batches))
        else:
            results = [one(b) for b in batches]
        self.last_stats = [s for _, s in results]
        tau_int = threshold_to_int(tau, self.alpha, self.beta)
        if tau_int >= min(self.alpha, self.beta):
            log.warning("threshold %.4f is above the reachable cosine %.4f; every query will be rejected",
                        tau, min(self.alpha, self.beta) / math.sqrt(self.alpha * self.beta))
        return wire.ScoreBatchRequest(self.packing.p, self.packing.m, tau_int,
                                      tuple(e for e, _ in results))

    def resolve(self, resp: wire.IdxResponse, batches=None) -> MatchResult:
        batches = self._batches if batches is None else batches
        if not resp.accept:
            return MatchResult.reject()
        try:
            return MatchResult(batches[resp.batch_idx].ids[resp.within_idx], True)
        except IndexError:
            raise ParamMismatch("key server returned an index outside the database") from None

    def identify(self, y, tau: float | None = None) -> MatchResult:
        if self.channel is None:
            raise TransportFailure("no channel to a key server configured")
        batches = self._batches
        req = self.score(y, tau)
        resp = self.channel.request(req)
        if not isinstance(resp, wire.IdxResponse):
            raise TransportFailure(f"unexpected reply {type(resp).__name__}")
        return self.resolve(resp, batches)

    def handle(self, msg):
        """Entry point for device requests when run as a daemon."""
        if isinstance(msg, wire.IdentifyRequest):
            res = self.identify(msg.template, msg.tau)
            return wire.IdentifyReply(res.accepted, "" if res.identity is None else str(res.identity))
        return wire.ErrorReply(f"local server does not accept {type(msg).__name__}")


class ReplicatedLocalServers:
    """Several local servers sharing one key server.

    Enrolling at any server relays the transformed template to every peer
    as an ``EnrollBroadcast``; identification then runs locally at the
    receiving server.  Relayed bytes are tallied in ``broadcast_bits``.
    """

    def __init__(self, servers: Sequence[LocalServer]):
        if len(servers) < 1:
            raise ValueError("need at least one server")
        self.servers = list(servers)
        self.broadcast_bits = 0
        self.broadcast_frames: list = []

    def enroll(self, origin: int, x, identity: str) -> None:
        src = self.servers[origin]
        z = ternarize(np.asarray(x, dtype=np.float64), src.alpha)
        s = split(z)
        msg = wire.EnrollBroadcast(str(identity), s.plus, s.minus)
        for k, srv in enumerate(self.servers):
            if k != origin:
                frame = wire.wire_encode(msg)
                self.broadcast_frames.append(frame)
                got = wire.wire_decode(frame)
                self.broadcast_bits += 2 * len(got.plus) + max(1, len(got.identity.encode()) * 8)
                zz = got.plus.astype(np.float64) - got.minus.astype(np.float64)
                srv.enroll(zz[None, :], [got.identity])
            else:
                srv.enroll(z[None, :].astype(np.float64), [str(identity)])

    def identify(self, origin: int, y, tau: float | None = None) -> MatchResult:
        return self.servers[origin].identify(y, tau)


# -- TCP daemons ------------------------------------------------------------------------

class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        target = self.server.target
        while True:
            try:
                frame = wire.recv_frame(self.request)
            except wire.MalformedFrame:
                return
            except OSError:
                return
            try:
                reply = target.handle(wire.wire_decode(frame))
            except IDFaceError as exc:
                log.warning("request failed: %s", exc)
                reply = wire.ErrorReply(str(exc))
            try:
                wire.send_frame(self.request, wire.wire_encode(reply))
            except OSError:
                return


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr, target):
        self.target = target
        super().__init__(addr, _FrameHandler)


def serve(addr, target, background: bool = False):
    """Serve any object with a ``handle(msg) -> reply`` method over TCP.

    With ``background`` the server runs on a daemon thread and is returned;
    otherwise this blocks until interrupted.
    """
    srv = _Server(_parse_addr(addr), target)
    if background:
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        return srv
    with srv:
        srv.serve_forever()
    return srv


def serve_key_server(addr, key_server: KeyServer, background: bool = False):
    return serve(addr, key_server, background)


def serve_local_server(addr, local: LocalServer, background: bool = False):
    return serve(addr, local, background)
