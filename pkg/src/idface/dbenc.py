"""Database encryption: column-wise AHE encryption and encrypted batch scoring.

The baseline pair (``enc_db_base``, ``ip_db_base``) encrypts the d columns
of an N x d matrix, one ciphertext per column with one row per slot, and
evaluates ``X @ y`` as a weighted sum of column ciphertexts.

The improved pair (``idface_enc_db``, ``idface_ip_db``) first ternarizes
and digit-packs the rows, then runs the baseline once per sign so that a
binary query needs only ciphertext additions.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ahe import BackendDescriptor, Ciphertext
from .errors import DimensionMismatch, ParamMismatch, SlotOverflow
from .packing import PackingParams, capacity, encode
from .transform import split, ternarize

__all__ = [
    "FIXED_POINT_SCALE",
    "EncryptedBatch",
    "ScorePair",
    "IPStats",
    "quantize",
    "enc_db_base",
    "ip_db_base",
    "idface_enc_db",
    "idface_ip_db",
    "batch_capacity",
    "encrypted_size_bytes",
    "save_database",
    "load_database",
    "append_batch",
]

FIXED_POINT_SCALE = 1 << 15


@dataclass(frozen=True)
class EncryptedBatch:
    """One enrolment unit: ``m * slot_count`` templates under ``2d`` ciphertexts.

    Template ``ids[i + m * j]`` lives in slot ``j``, digit ``i``.
    """

    ids: tuple
    c_plus: tuple
    c_minus: tuple
    packing: PackingParams
    descriptor: BackendDescriptor
    alpha: int
    d: int

    def __post_init__(self):
        if len(self.c_plus) != self.d or len(self.c_minus) != self.d:
            raise DimensionMismatch("a batch needs exactly d ciphertexts per sign")
        if len(self.ids) > self.packing.m * self.descriptor.slot_count:
            raise SlotOverflow("more ids than the batch can hold")

    @property
    def size(self) -> int:
        return len(self.ids)

    def locate(self, position: int) -> tuple[int, int]:
        """(slot, digit) of template ``position``."""
        return divmod(position, self.packing.m)


@dataclass(frozen=True)
class ScorePair:
    ct_plus: Ciphertext
    ct_minus: Ciphertext


@dataclass
class IPStats:
    """Additions split into those inside the four inner products and the combining ones."""

    raw_adds: int = 0
    combine_adds: int = 0
    scalar_muls: int = 0
    fresh_zeros: int = 0

    @property
    def total_adds(self) -> int:
        return self.raw_adds + self.combine_adds


def quantize(values, scale: int = FIXED_POINT_SCALE) -> np.ndarray:
    """Round reals to signed fixed point with the given scale (default 2^15)."""
    return np.rint(np.asarray(values, dtype=np.float64) * scale).astype(np.int64)


def enc_db_base(X, backend) -> list[Ciphertext]:
    """Encrypt each column of an integer matrix, rows spread across slots."""
    if isinstance(X, np.ndarray) and X.dtype.kind == "f":
        raise TypeError("quantize real matrices before encryption")
    rows = [list(r) for r in X]
    if not rows:
        raise DimensionMismatch("empty matrix")
    d = len(rows[0])
    if any(len(r) != d for r in rows):
        raise DimensionMismatch("ragged matrix")
    if len(rows) > backend.descriptor.slot_count:
        raise SlotOverflow(f"{len(rows)} rows exceed {backend.descriptor.slot_count} slots")
    return [backend.encrypt([int(r[i]) for r in rows]) for i in range(d)]


def ip_db_base(y, C: Sequence[Ciphertext], backend, stats: IPStats | None = None) -> Ciphertext:
    """Weighted sum ``sum_i y_i * C_i`` over nonnegative integer weights.

    Zero weights are skipped and unit weights are used as-is (a look-up, no
    scalar multiplication).  An all-zero ``y`` yields a fresh encryption of
    zero.
    """
    y = [int(v) for v in y]
    if len(y) != len(C):
        raise DimensionMismatch(f"query has {len(y)} entries, database {len(C)}")
    if any(v < 0 for v in y):
        raise ValueError("weights must be nonnegative; split signed queries first")
    acc = None
    for w, ct in zip(y, C):
        if w == 0:
            continue
        if w != 1:
            ct = backend.scalar_mul(w, ct)
            if stats is not None:
                stats.scalar_muls += 1
        if acc is None:
            acc = ct
        else:
            acc = backend.add(acc, ct)
            if stats is not None:
                stats.raw_adds += 1
    if acc is None:
        if stats is not None:
            stats.fresh_zeros += 1
        return backend.encrypt_zero()
    return acc


def batch_capacity(descriptor: BackendDescriptor, alpha: int, beta: int) -> tuple[PackingParams, int]:
    """Packing parameters and the number of templates one batch holds."""
    params = capacity(descriptor.slot_bits, alpha, beta)
    return params, params.m * descriptor.slot_count


def idface_enc_db(X, alpha: int, backend, beta: int | None = None, ids=None,
                  packing: PackingParams | None = None) -> EncryptedBatch:
    """Ternarize, pack and encrypt up to ``m * slot_count`` templates.

    ``beta`` is the query sparsity the batch must support; it defaults to
    ``alpha``.  The digit bound is ``min(alpha, beta) + 1``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    desc = backend.descriptor
    if packing is None:
        packing = capacity(desc.slot_bits, alpha, alpha if beta is None else beta)
    cap = packing.m * desc.slot_count
    if n > cap:
        raise SlotOverflow(f"{n} templates exceed batch capacity {cap}")
    ids = tuple(range(n)) if ids is None else tuple(ids)
    if len(ids) != n:
        raise DimensionMismatch("ids and templates differ in length")
    Z = ternarize(X, alpha)
    m = packing.m
    plus_rows, minus_rows = [], []
    for start in range(0, n, m):
        xp, xm = encode(Z[start:start + m], packing)
        plus_rows.append(xp.digits)
        minus_rows.append(xm.digits)
    c_plus = enc_db_base(plus_rows, backend)
    c_minus = enc_db_base(minus_rows, backend)
    return EncryptedBatch(ids, tuple(c_plus), tuple(c_minus), packing, desc, int(alpha), d)


def idface_ip_db(y, C: EncryptedBatch, beta: int, backend,
                 stats: IPStats | None = None, z=None) -> ScorePair:
    """Encrypted scores of query ``y`` against every template of batch ``C``.

    Returns ``(ct+, ct-)`` with ``ct+ = <z+,C+> + <z-,C->`` and
    ``ct- = <z+,C-> + <z-,C+>``; decrypting and decoding gives the ternary
    inner products.  A precomputed ternary ``z`` may be supplied.
    """
    if min(C.alpha, beta) + 1 > C.packing.p:
        raise ParamMismatch(
            f"beta={beta} with alpha={C.alpha} needs p > {min(C.alpha, beta)}, batch has p={C.packing.p}"
        )
    if z is None:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (C.d,):
            raise DimensionMismatch(f"query has shape {y.shape}, batch expects ({C.d},)")
        z = ternarize(y, beta)
    s = split(z)
    stats = stats if stats is not None else IPStats()
    pp = ip_db_base(s.plus, C.c_plus, backend, stats)
    mm = ip_db_base(s.minus, C.c_minus, backend, stats)
    pm = ip_db_base(s.plus, C.c_minus, backend, stats)
    mp = ip_db_base(s.minus, C.c_plus, backend, stats)
    ct_plus = backend.add(pp, mm)
    ct_minus = backend.add(pm, mp)
    stats.combine_adds += 2
    return ScorePair(ct_plus, ct_minus)


def encrypted_size_bytes(D: int, m: int, slot_count: int, d: int, ciphertext_bytes: int) -> int:
    """Closed-form storage: ``2 * ceil(D / (m * N_s)) * d * S_ct``."""
    return 2 * math.ceil(D / (m * slot_count)) * d * ciphertext_bytes


# -- persistence -----------------------------------------------------------------

_META = "meta.json"


def _batch_files(index: int) -> tuple[str, str]:
    return f"batch_{index:06d}.plus", f"batch_{index:06d}.minus"


def _write_cts(path: Path, cts, backend) -> None:
    with open(path, "wb") as fh:
        for ct in cts:
            fh.write(backend.to_fixed(ct))


def _read_cts(path: Path, count: int, width: int, backend) -> tuple:
    data = path.read_bytes()
    if len(data) != count * width:
        raise ValueError(f"{path}: expected {count * width} bytes, found {len(data)}")
    return tuple(backend.from_fixed(data[i * width:(i + 1) * width]) for i in range(count))


def _meta_for(batch: EncryptedBatch, backend, beta: int | None) -> dict:
    return {
        "version": 1,
        "d": batch.d,
        "alpha": batch.alpha,
        "beta": beta,
        "p": batch.packing.p,
        "m": batch.packing.m,
        "slot_bits": batch.packing.slot_bits,
        "slot_count": batch.descriptor.slot_count,
        "ciphertext_bytes": batch.descriptor.ciphertext_bytes,
        "backend": backend.name,
        "key_id": backend.key_id.hex(),
        "batches": [],
    }


def _write_meta(root: Path, meta: dict) -> None:
    tmp = root / (_META + ".tmp")
    tmp.write_text(json.dumps(meta, indent=1), encoding="utf-8")
    os.replace(tmp, root / _META)


def append_batch(root: str | Path, batch: EncryptedBatch, backend, beta: int | None = None) -> None:
    """Append one batch to a database directory, creating it if needed."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta_path = root / _META
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if (meta["d"], meta["alpha"], meta["p"], meta["m"], meta["slot_count"]) != (
            batch.d, batch.alpha, batch.packing.p, batch.packing.m, batch.descriptor.slot_count
        ):
            raise ParamMismatch("batch parameters differ from the stored database")
        if meta["key_id"] != backend.key_id.hex():
            raise ParamMismatch("batch was encrypted under a different key")
    else:
        meta = _meta_for(batch, backend, beta)
    fplus, fminus = _batch_files(len(meta["batches"]))
    _write_cts(root / fplus, batch.c_plus, backend)
    _write_cts(root / fminus, batch.c_minus, backend)
    meta["batches"].append({"ids": list(batch.ids), "plus": fplus, "minus": fminus})
    _write_meta(root, meta)


def save_database(root: str | Path, batches: Sequence[EncryptedBatch], backend,
                  beta: int | None = None) -> None:
    for b in batches:
        append_batch(root, b, backend, beta)


def load_database(root: str | Path, backend) -> tuple[list[EncryptedBatch], dict]:
    root = Path(root)
    meta = json.loads((root / _META).read_text(encoding="utf-8"))
    if meta["key_id"] != backend.key_id.hex():
        raise ParamMismatch("database was encrypted under a different key")
    packing = PackingParams(meta["p"], meta["m"], meta["slot_bits"])
    desc = backend.descriptor
    if desc.slot_count != meta["slot_count"] or desc.ciphertext_bytes != meta["ciphertext_bytes"]:
        raise ParamMismatch("backend geometry differs from the stored database")
    width = meta["ciphertext_bytes"]
    out = []
    for entry in meta["batches"]:
        cp = _read_cts(root / entry["plus"], meta["d"], width, backend)
        cm = _read_cts(root / entry["minus"], meta["d"], width, backend)
        out.append(EncryptedBatch(tuple(entry["ids"]), cp, cm, packing, desc, meta["alpha"], meta["d"]))
    return out, meta
