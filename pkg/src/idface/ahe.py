"""Additively homomorphic encryption backends.

Two backends share one small interface (``encrypt``, ``decrypt``, ``add``,
``scalar_mul`` plus serialization):

* :class:`PaillierBackend` -- the Paillier cryptosystem with ``g = n + 1``.
  A ciphertext may carry several independent Paillier slots so that small
  test configurations can exercise multi-slot batches; the production
  setting is one 2048-bit slot per ciphertext.
* :class:`SimulatedSIMDBackend` -- an **insecure** plaintext mirror of a
  4096-slot CKKS ciphertext.  It reproduces slot counts, precision budget
  and ciphertext size for accounting, and nothing else.
"""

from __future__ import annotations

import math
import os
import random
import secrets
import struct
from dataclasses import dataclass, field
from pathlib import Path

import gmpy2
import numpy as np

from .errors import (
    InsecureModeRequired,
    KeyMismatch,
    PrimeGenerationFailure,
    SlotOverflow,
)

__all__ = [
    "BackendDescriptor",
    "PAILLIER_2048",
    "CKKS_SIM",
    "OpCounter",
    "Ciphertext",
    "PaillierPublicKey",
    "PaillierPrivateKey",
    "KeyPair",
    "keygen",
    "keypair_from_primes",
    "PaillierBackend",
    "SimulatedSIMDBackend",
    "save_keypair",
    "load_keypair",
    "load_public_key",
]

INSECURE_MOCK = "insecure-mock"


@dataclass(frozen=True)
class BackendDescriptor:
    slot_count: int
    slot_bits: int
    ciphertext_bytes: int
    name: str = ""


#: Nominal accounting parameters used by the cost model.
PAILLIER_2048 = BackendDescriptor(slot_count=1, slot_bits=2048, ciphertext_bytes=512, name="paillier")
CKKS_SIM = BackendDescriptor(slot_count=4096, slot_bits=50, ciphertext_bytes=132 * 1024, name="ckks-sim")


@dataclass
class OpCounter:
    """Homomorphic operation tally, reset between measurements."""

    add: int = 0
    scalar_mul: int = 0
    rotate: int = 0
    encrypt: int = 0
    decrypt: int = 0

    def reset(self) -> None:
        self.add = self.scalar_mul = self.rotate = self.encrypt = self.decrypt = 0

    def snapshot(self) -> dict:
        return dict(add=self.add, scalar_mul=self.scalar_mul, rotate=self.rotate,
                    encrypt=self.encrypt, decrypt=self.decrypt)


@dataclass(frozen=True, eq=False)
class Ciphertext:
    """Backend-opaque ciphertext; ``key_id`` ties it to the key it was made under."""

    payload: object
    key_id: bytes

    def __eq__(self, other):
        if not isinstance(other, Ciphertext):
            return NotImplemented
        if self.key_id != other.key_id:
            return False
        a, b = self.payload, other.payload
        if isinstance(a, np.ndarray):
            return isinstance(b, np.ndarray) and np.array_equal(a, b)
        return a == b

    __hash__ = None


# -- Paillier ------------------------------------------------------------------

_COMB_WINDOW = 8


class PaillierPublicKey:
    def __init__(self, n: int):
        self.n = gmpy2.mpz(n)
        self.nsquare = self.n * self.n
        self.g = self.n + 1
        self.bits = int(self.n.bit_length())
        self._fast = None

    @property
    def key_id(self) -> bytes:
        return int(self.n).to_bytes((self.bits + 7) // 8, "big")[-16:]

    @property
    def ciphertext_bytes(self) -> int:
        return (2 * self.bits + 7) // 8

    def __eq__(self, other):
        return isinstance(other, PaillierPublicKey) and self.n == other.n

    def __hash__(self):
        return hash(int(self.n))

    def __repr__(self):
        return f"PaillierPublicKey(bits={self.bits}, id={self.key_id.hex()[:12]})"

    def random_unit(self, rng=None) -> gmpy2.mpz:
        """Uniform ``r`` in ``[1, n)`` with ``gcd(r, n) = 1``."""
        draw = (rng or secrets.SystemRandom()).randrange
        n = int(self.n)
        while True:
            r = draw(1, n)
            if math.gcd(r, n) == 1:
                return gmpy2.mpz(r)

    def obfuscator(self, rng=None) -> gmpy2.mpz:
        if self._fast is not None:
            return self._fast.draw(rng)
        return gmpy2.powmod(self.random_unit(rng), self.n, self.nsquare)

    def raw_encrypt(self, m: int, r: int | None = None, rng=None) -> gmpy2.mpz:
        m = gmpy2.mpz(m)
        if m < 0 or m >= self.n:
            raise SlotOverflow(f"plaintext outside [0, n) for a {self.bits}-bit modulus")
        # (n+1)^m = 1 + m n  (mod n^2)
        gm = (1 + m * self.n) % self.nsquare
        h = gmpy2.powmod(gmpy2.mpz(r), self.n, self.nsquare) if r is not None else self.obfuscator(rng)
        return gm * h % self.nsquare

    def enable_fast_randomness(self, rng=None) -> None:
        """Switch to fixed-base randomness ``r^n := (h^n)^a`` with a short exponent ``a``.

        This is the Damgard-Jurik-Nielsen speed-up found in production
        Paillier libraries; it trades the uniform choice of ``r`` for a
        ~8x faster encryption and is meant for bulk enrolment.
        """
        if self._fast is None:
            self._fast = _FixedBaseObfuscator(self, rng)

    @property
    def fast_randomness(self) -> bool:
        return self._fast is not None


class _FixedBaseObfuscator:
    def __init__(self, pk: PaillierPublicKey, rng=None):
        x = pk.random_unit(rng)
        h = (-(x * x)) % pk.n
        base = gmpy2.powmod(h, pk.n, pk.nsquare)
        self.nsquare = pk.nsquare
        self.exp_bits = max(pk.bits // 2, 16)
        self.windows = -(-self.exp_bits // _COMB_WINDOW)
        size = 1 << _COMB_WINDOW
        table = []
        b = base
        for _ in range(self.windows):
            row = [gmpy2.mpz(1)] * size
            for v in range(1, size):
                row[v] = row[v - 1] * b % self.nsquare
            table.append(row)
            b = row[size - 1] * b % self.nsquare
        self.table = table

    def draw(self, rng=None) -> gmpy2.mpz:
        a = (rng or secrets.SystemRandom()).getrandbits(self.exp_bits)
        acc = gmpy2.mpz(1)
        mask = (1 << _COMB_WINDOW) - 1
        for row in self.table:
            v = a & mask
            if v:
                acc = acc * row[v] % self.nsquare
            a >>= _COMB_WINDOW
        return acc


class PaillierPrivateKey:
    def __init__(self, public: PaillierPublicKey, p: int, q: int):
        p, q = gmpy2.mpz(p), gmpy2.mpz(q)
        if p * q != public.n:
            raise KeyMismatch("p*q does not match the public modulus")
        if p == q:
            raise ValueError("p and q must be distinct")
        self.public = public
        self.p, self.q = (p, q) if p < q else (q, p)
        self.lam = gmpy2.lcm(p - 1, q - 1)
        self.mu = gmpy2.invert(self.lam, public.n)
        self.psquare = self.p * self.p
        self.qsquare = self.q * self.q
        self.hp = self._h(self.p, self.psquare)
        self.hq = self._h(self.q, self.qsquare)
        self.q_inv_p = gmpy2.invert(self.q, self.p)

    def _h(self, x, xsquare):
        # L_x((n+1)^(x-1) mod x^2)^-1 mod x
        gx = gmpy2.powmod(self.public.g, x - 1, xsquare)
        return gmpy2.invert((gx - 1) // x, x)

    def raw_decrypt(self, c) -> int:
        c = gmpy2.mpz(c)
        if c <= 0 or c >= self.public.nsquare:
            raise ValueError("ciphertext outside (0, n^2)")
        mp = (gmpy2.powmod(c, self.p - 1, self.psquare) - 1) // self.p * self.hp % self.p
        mq = (gmpy2.powmod(c, self.q - 1, self.qsquare) - 1) // self.q * self.hq % self.q
        u = (mp - mq) * self.q_inv_p % self.p
        return int(mq + u * self.q)

    def raw_decrypt_lambda(self, c) -> int:
        """Textbook ``L(c^lambda mod n^2) * mu mod n``; slower, kept as a cross-check."""
        n = self.public.n
        u = gmpy2.powmod(gmpy2.mpz(c), self.lam, self.public.nsquare)
        return int((u - 1) // n * self.mu % n)


@dataclass(frozen=True)
class KeyPair:
    public: PaillierPublicKey
    secret: PaillierPrivateKey | None = field(default=None, repr=False)


def keypair_from_primes(p: int, q: int) -> KeyPair:
    pk = PaillierPublicKey(int(p) * int(q))
    return KeyPair(pk, PaillierPrivateKey(pk, p, q))


def keygen(modulus_bits: int = 2048, rng=None, max_tries: int = 1000) -> KeyPair:
    """Paillier key pair with ``n = p q`` of exactly ``modulus_bits`` bits.

    ``rng`` may be an integer seed or a :class:`random.Random`; ``None``
    draws the seed from the OS.
    """
    if modulus_bits < 8 or modulus_bits % 2:
        raise ValueError("modulus_bits must be an even number >= 8")
    if rng is None:
        seed = secrets.randbits(128)
    elif isinstance(rng, random.Random):
        seed = rng.getrandbits(128)
    else:
        seed = int(rng)
    state = gmpy2.random_state(seed)
    half = modulus_bits // 2
    top = gmpy2.mpz(3) << (half - 2)
    for _ in range(max_tries):
        p = gmpy2.next_prime(gmpy2.mpz_urandomb(state, half) | top)
        q = gmpy2.next_prime(gmpy2.mpz_urandomb(state, half) | top)
        if p == q:
            continue
        n = p * q
        if n.bit_length() == modulus_bits and gmpy2.gcd(n, (p - 1) * (q - 1)) == 1:
            return keypair_from_primes(int(p), int(q))
    raise PrimeGenerationFailure(f"no {modulus_bits}-bit modulus after {max_tries} attempts")


class PaillierBackend:
    """Paillier with ``slot_count`` independent big-integer slots per ciphertext."""

    def __init__(self, public: PaillierPublicKey, secret: PaillierPrivateKey | None = None,
                 slot_count: int = 1, rng=None):
        if secret is not None and secret.public != public:
            raise KeyMismatch("secret key does not belong to this public key")
        self.public = public
        self.secret = secret
        self.slot_count = int(slot_count)
        self.rng = rng
        self.counter = OpCounter()

    @classmethod
    def from_keypair(cls, kp: KeyPair, slot_count: int = 1, rng=None) -> "PaillierBackend":
        return cls(kp.public, kp.secret, slot_count=slot_count, rng=rng)

    def public_only(self) -> "PaillierBackend":
        return PaillierBackend(self.public, None, self.slot_count, self.rng)

    @property
    def name(self) -> str:
        return "paillier"

    @property
    def descriptor(self) -> BackendDescriptor:
        # one bit of headroom keeps every packed value strictly below n
        return BackendDescriptor(
            slot_count=self.slot_count,
            slot_bits=self.public.bits - 1,
            ciphertext_bytes=self.slot_count * self.public.ciphertext_bytes,
            name="paillier",
        )

    @property
    def key_id(self) -> bytes:
        return self.public.key_id

    def _check(self, *cts: Ciphertext) -> None:
        for ct in cts:
            if ct.key_id != self.key_id:
                raise KeyMismatch("ciphertext was produced under a different key")

    def _slots(self, plaintext) -> list[int]:
        if isinstance(plaintext, (int, np.integer)):
            plaintext = [int(plaintext)]
        vals = [int(v) for v in plaintext]
        if len(vals) > self.slot_count:
            raise SlotOverflow(f"{len(vals)} values for {self.slot_count} slots")
        vals.extend([0] * (self.slot_count - len(vals)))
        return vals

    def encrypt(self, plaintext) -> Ciphertext:
        self.counter.encrypt += 1
        payload = tuple(self.public.raw_encrypt(v, rng=self.rng) for v in self._slots(plaintext))
        return Ciphertext(payload, self.key_id)

    def encrypt_zero(self) -> Ciphertext:
        return self.encrypt([0])

    def decrypt(self, ct: Ciphertext) -> list[int]:
        if self.secret is None:
            raise KeyMismatch("this backend holds no secret key")
        self._check(ct)
        self.counter.decrypt += 1
        return [self.secret.raw_decrypt(c) for c in ct.payload]

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        self._check(a, b)
        self.counter.add += 1
        n2 = self.public.nsquare
        return Ciphertext(tuple(x * y % n2 for x, y in zip(a.payload, b.payload)), self.key_id)

    def scalar_mul(self, c: int, ct: Ciphertext) -> Ciphertext:
        if c < 0:
            raise ValueError("scalar must be nonnegative")
        self._check(ct)
        self.counter.scalar_mul += 1
        n2 = self.public.nsquare
        return Ciphertext(tuple(gmpy2.powmod(x, c, n2) for x in ct.payload), self.key_id)

    # serialization
    def serialize(self, ct: Ciphertext) -> bytes:
        """Wire form: per slot, 4-byte big-endian length then minimal magnitude bytes."""
        self._check(ct)
        out = []
        for x in ct.payload:
            raw = int(x).to_bytes((int(x).bit_length() + 7) // 8, "big")
            out.append(struct.pack(">I", len(raw)) + raw)
        return b"".join(out)

    def deserialize(self, data: bytes) -> Ciphertext:
        vals, off = [], 0
        while off < len(data):
            if off + 4 > len(data):
                raise ValueError("truncated ciphertext length prefix")
            (ln,) = struct.unpack_from(">I", data, off)
            off += 4
            if off + ln > len(data):
                raise ValueError("truncated ciphertext body")
            vals.append(gmpy2.mpz(int.from_bytes(data[off:off + ln], "big")))
            off += ln
        if len(vals) != self.slot_count:
            raise ValueError(f"expected {self.slot_count} slots, got {len(vals)}")
        return Ciphertext(tuple(vals), self.key_id)

    def to_fixed(self, ct: Ciphertext) -> bytes:
        """Fixed-width storage form: each slot padded to ``ciphertext_bytes / slot_count``."""
        width = self.public.ciphertext_bytes
        return b"".join(int(x).to_bytes(width, "big") for x in ct.payload)

    def from_fixed(self, data: bytes) -> Ciphertext:
        width = self.public.ciphertext_bytes
        if len(data) != width * self.slot_count:
            raise ValueError("fixed-width ciphertext has the wrong size")
        vals = tuple(gmpy2.mpz(int.from_bytes(data[i:i + width], "big"))
                     for i in range(0, len(data), width))
        return Ciphertext(vals, self.key_id)


# -- simulated SIMD ------------------------------------------------------------

class SimulatedSIMDBackend:
    """Plaintext mirror of a CKKS-style SIMD ciphertext.  NOT ENCRYPTION.

    Slots hold integers below ``2^slot_bits``; each "ciphertext" also
    carries a random nonce so repeated encryptions differ byte-wise.
    Construction fails unless ``mode="insecure-mock"`` is passed.
    """

    def __init__(self, mode: str | None = None, slot_count: int = 4096, slot_bits: int = 50,
                 ciphertext_bytes: int = 132 * 1024, key_id: bytes | None = None, rng=None):
        if mode != INSECURE_MOCK:
            raise InsecureModeRequired(
                f"the simulated SIMD backend provides no secrecy; pass mode={INSECURE_MOCK!r}"
            )
        if slot_bits > 62:
            raise ValueError("slot_bits above 62 do not fit the int64 mirror")
        self.slot_count = int(slot_count)
        self.slot_bits = int(slot_bits)
        self.ciphertext_bytes = int(ciphertext_bytes)
        if self.ciphertext_bytes < 12 + 8 * self.slot_count:
            raise ValueError("ciphertext_bytes too small for the slot payload")
        self._key_id = key_id or secrets.token_bytes(16)
        self.rng = rng
        self.counter = OpCounter()
        self.secret = True  # the mirror can always "decrypt"

    @property
    def name(self) -> str:
        return "ckks-sim"

    @property
    def key_id(self) -> bytes:
        return self._key_id

    def public_only(self) -> "SimulatedSIMDBackend":
        twin = SimulatedSIMDBackend(INSECURE_MOCK, self.slot_count, self.slot_bits,
                                    self.ciphertext_bytes, self._key_id, self.rng)
        twin.secret = None
        return twin

    @property
    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(self.slot_count, self.slot_bits, self.ciphertext_bytes, "ckks-sim")

    def _check(self, *cts):
        for ct in cts:
            if ct.key_id != self._key_id:
                raise KeyMismatch("ciphertext was produced under a different key")

    def _bound(self, arr: np.ndarray) -> np.ndarray:
        if arr.size and (arr.min() < 0 or arr.max() >= (1 << self.slot_bits)):
            raise SlotOverflow(f"slot value outside [0, 2^{self.slot_bits})")
        return arr

    def _wrap(self, arr: np.ndarray) -> Ciphertext:
        nonce = (self.rng or secrets.SystemRandom()).getrandbits(64)
        return Ciphertext((nonce, arr), self._key_id)

    def encrypt(self, plaintext) -> Ciphertext:
        if isinstance(plaintext, (int, np.integer)):
            plaintext = [int(plaintext)]
        vals = [int(v) for v in plaintext]
        if len(vals) > self.slot_count:
            raise SlotOverflow(f"{len(vals)} values for {self.slot_count} slots")
        if any(v < 0 or v >= (1 << self.slot_bits) for v in vals):
            raise SlotOverflow(f"slot value outside [0, 2^{self.slot_bits})")
        arr = np.zeros(self.slot_count, dtype=np.int64)
        arr[: len(vals)] = vals
        self.counter.encrypt += 1
        return self._wrap(arr)

    def encrypt_zero(self) -> Ciphertext:
        return self.encrypt([0])

    def decrypt(self, ct: Ciphertext) -> list[int]:
        if self.secret is None:
            raise KeyMismatch("this backend holds no secret key")
        self._check(ct)
        self.counter.decrypt += 1
        return [int(v) for v in ct.payload[1]]

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        self._check(a, b)
        self.counter.add += 1
        return self._wrap(self._bound(a.payload[1] + b.payload[1]))

    def scalar_mul(self, c: int, ct: Ciphertext) -> Ciphertext:
        if c < 0:
            raise ValueError("scalar must be nonnegative")
        self._check(ct)
        self.counter.scalar_mul += 1
        arr = ct.payload[1]
        if c and arr.size and int(arr.max()) * c >= (1 << self.slot_bits):
            raise SlotOverflow("scalar product leaves the slot precision")
        return self._wrap(arr * c)

    def serialize(self, ct: Ciphertext) -> bytes:
        self._check(ct)
        nonce, arr = ct.payload
        body = struct.pack(">QI", nonce, self.slot_count) + arr.astype(">i8").tobytes()
        return body + bytes(self.ciphertext_bytes - len(body))

    def deserialize(self, data: bytes) -> Ciphertext:
        if len(data) != self.ciphertext_bytes:
            raise ValueError("simulated ciphertext has the wrong size")
        nonce, slots = struct.unpack_from(">QI", data, 0)
        if slots != self.slot_count:
            raise ValueError("slot count mismatch")
        arr = np.frombuffer(data, dtype=">i8", count=slots, offset=12).astype(np.int64)
        return Ciphertext((nonce, arr), self._key_id)

    to_fixed = serialize
    from_fixed = deserialize


# -- key files -----------------------------------------------------------------

_KEY_HEADER = "# idface paillier key v1"


def save_keypair(path: str | Path, kp: KeyPair, public_path: str | Path | None = None) -> None:
    """Write the secret key file (mode 0600) and optionally a public-only file."""
    sk = kp.secret
    if sk is None:
        raise ValueError("key pair has no secret part")
    lines = [
        _KEY_HEADER,
        f"n={int(kp.public.n):x}",
        f"lambda={int(sk.lam):x}",
        f"mu={int(sk.mu):x}",
        f"p={int(sk.p):x}",
        f"q={int(sk.q):x}",
        "",
    ]
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines))
    os.chmod(path, 0o600)
    if public_path is not None:
        Path(public_path).write_text(f"{_KEY_HEADER}\nn={int(kp.public.n):x}\n", encoding="ascii")


def _read_fields(path) -> dict:
    fields = {}
    for line in Path(path).read_text(encoding="ascii").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        fields[k.strip()] = int(v.strip(), 16)
    if "n" not in fields:
        raise ValueError(f"{path}: missing modulus n")
    return fields


def load_keypair(path: str | Path) -> KeyPair:
    f = _read_fields(path)
    if "p" not in f or "q" not in f:
        pk = PaillierPublicKey(f["n"])
        return KeyPair(pk, None)
    kp = keypair_from_primes(f["p"], f["q"])
    if kp.public.n != f["n"]:
        raise KeyMismatch(f"{path}: p*q != n")
    if "lambda" in f and kp.secret.lam != f["lambda"]:
        raise KeyMismatch(f"{path}: lambda inconsistent with p, q")
    return kp


def load_public_key(path: str | Path) -> PaillierPublicKey:
    return PaillierPublicKey(_read_fields(path)["n"])

