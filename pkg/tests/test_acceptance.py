"""Acceptance criteria, one test per criterion.

Each test records a ``[PASS]``/``[FAIL]`` line with the measured value and
tolerance; the lines are printed in the pytest terminal summary.  Criteria
that cannot hold as stated are marked ``xfail(strict=True)`` so the gap
stays visible and a silent fix would be noticed.
"""

import math
import random
import socket
import statistics
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, unit_rows
from idface import wire
from idface.ahe import CKKS_SIM, PAILLIER_2048, PaillierBackend, keypair_from_primes
from idface.analysis import (
    GB,
    GiB,
    MB,
    MiB,
    CostModel,
    codebook_log_size,
    comm_cost,
    epsilon_theoretical,
    isometry_mc,
    optimal_alpha,
    paper_mb,
    storage_bytes,
    theta_grid,
)
from idface.dbenc import IPStats, encrypted_size_bytes, idface_enc_db, idface_ip_db
from idface.packing import capacity, decode_many
from idface.protocol import (
    InProcessChannel,
    KeyServer,
    LocalServer,
    TCPChannel,
    Transcript,
    plaintext_identify,
    serve_key_server,
)
from idface.transform import ternarize
from idface.twopc import make_in_process_parties


def record(cid, ok, text):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] C{cid}: {text}")
    print(ACCEPTANCE_LINES[-1])
    return ok


# 1 -----------------------------------------------------------------------------------------

def test_c1_packing_capacity():
    got_pc = [capacity(2048, 341, b).m for b in (63, 127, 341)]
    got_ck = [capacity(50, 341, b).m for b in (63, 127, 341)]
    ok = got_pc == [341, 292, 227] and got_ck == [8, 7, 5]
    record(1, ok, f"capacity m at 2048 bits {got_pc} (want [341, 292, 227]); at 50 bits {got_ck} "
                  f"(want [8, 7, 5]); exact")
    assert ok


# 2 -----------------------------------------------------------------------------------------

def test_c2_end_to_end_exactness():
    d, alpha, beta, n_s = 16, 10, 6, 4
    kp = keypair_from_primes(43, 47)  # n = 2021, 10 usable slot bits
    be = PaillierBackend.from_keypair(kp, slot_count=n_s, rng=random.Random(2))
    assert capacity(be.descriptor.slot_bits, alpha, beta).m == 3
    ks = KeyServer(be)
    rng = np.random.default_rng(2)
    mismatches = wrong_decision = 0
    rounds = 1000
    for r in range(rounds):
        X = rng.standard_normal((12, d))
        y = X[rng.integers(12)] + 0.3 * rng.standard_normal(d) if r % 2 else rng.standard_normal(d)
        local = LocalServer(be, d, alpha, beta, tau=0.5, channel=InProcessChannel(ks.handle))
        ids = [f"r{r}-{i}" for i in range(12)]
        local.enroll(X, ids)
        (batch,) = local.db
        pair = idface_ip_db(y, batch, beta, be)
        dec = decode_many(be.decrypt(pair.ct_plus), be.decrypt(pair.ct_minus), batch.packing).reshape(-1)
        oracle = ternarize(X, alpha).astype(int) @ ternarize(y, beta).astype(int)
        mismatches += int(np.any(dec != oracle))
        if local.identify(y) != plaintext_identify(X, ids, y, alpha, beta, 0.5):
            wrong_decision += 1
    ok = mismatches == 0 and wrong_decision == 0
    record(2, ok, f"{rounds} rounds, d=16 a=10 b=6 N_s=4 m=3, n=43*47: {mismatches} score mismatches, "
                  f"{wrong_decision} decision mismatches (want 0, 0)")
    assert ok


# 3 -----------------------------------------------------------------------------------------

def test_c3_cross_pipeline_equivalence(kp1024):
    d, alpha, beta, D = 512, 341, 63, 1000
    rng = np.random.default_rng(3)
    X = unit_rows(rng, D, d)
    Y = X + 0.4 * rng.standard_normal((D, d)) / math.sqrt(d)
    Y[::2] = unit_rows(rng, D // 2, d)  # half near matches, half unrelated

    be = PaillierBackend.from_keypair(kp1024, rng=random.Random(3))
    be.public.enable_fast_randomness(random.Random(4))
    packing = capacity(be.descriptor.slot_bits, alpha, beta)
    per_batch = packing.m
    batches = [idface_enc_db(X[s:s + per_batch], alpha, be, packing=packing) for s in range(0, D, per_batch)]

    two, _ = make_in_process_parties(d, alpha, beta, parties=2, rng=5)
    five, _ = make_in_process_parties(d, alpha, beta, parties=5, rng=6)
    for i, x in enumerate(X):
        two.enroll(x, str(i))
        five.enroll(x, str(i))

    Zx = ternarize(X, alpha).astype(np.int64)
    bad = 0
    for i in range(D):
        y = Y[i]
        plain = Zx @ ternarize(y, beta).astype(np.int64)
        b, pos = divmod(i, per_batch)
        pair = idface_ip_db(y, batches[b], beta, be)
        he = decode_many(be.decrypt(pair.ct_plus), be.decrypt(pair.ct_minus), packing)[0][pos]
        s2 = two.scores(y)
        s5 = five.scores(y)
        if not (he == plain[i] and np.array_equal(s2, plain) and np.array_equal(s5, plain)):
            bad += 1
    ok = bad == 0
    record(3, ok, f"{D} instances d=512 a=341 b=63: HE / 2-party / 5-party / plaintext disagree on {bad} "
                  f"(want 0)")
    assert ok


# 4 -----------------------------------------------------------------------------------------

@pytest.mark.parametrize("beta", [63, 127, 341])
def test_c4_operation_counts(kp512, beta):
    d, alpha = 512, 341
    rng = np.random.default_rng(beta)
    be = PaillierBackend.from_keypair(kp512, rng=random.Random(beta))
    X = rng.standard_normal((4, d))
    packing = capacity(be.descriptor.slot_bits, alpha, beta)
    batch = idface_enc_db(X, alpha, be, packing=packing)
    y = rng.standard_normal(d)
    z = ternarize(y, beta)
    assert (z > 0).any() and (z < 0).any()
    be.counter.reset()
    stats = IPStats()
    pair = idface_ip_db(y, batch, beta, be, stats=stats)
    ops = be.counter.snapshot()
    KeyServer(be).find_best(wire.ScoreBatchRequest(
        packing.p, packing.m, 0, (wire.ScoreEntry(4, be.serialize(pair.ct_plus), be.serialize(pair.ct_minus)),)))
    dec = be.counter.decrypt
    ok = (ops["add"] == 2 * (beta - 1) and ops["scalar_mul"] == 0 and ops["rotate"] == 0 and dec == 2
          and stats.raw_adds == 2 * beta - 4 and stats.combine_adds == 2)
    record(4, ok, f"beta={beta}: add={ops['add']} (want {2 * (beta - 1)}), scalar_mul={ops['scalar_mul']}, "
                  f"rotate={ops['rotate']}, decrypt/batch={dec}, ciphertexts/batch=2; exact")
    assert ok


# 5 -----------------------------------------------------------------------------------------

def test_c5_isometry_bound():
    d, alpha = 512, 341
    rng = np.random.default_rng(5)
    means = [isometry_mc(d, alpha, alpha, float(t), 200, rng)[0] for t in theta_grid(20)]
    grid = theta_grid(50)
    eps = np.array([epsilon_theoretical(d, alpha, float(t)) for t in grid])
    k = int(np.argmax(eps))
    peak, cos_at = float(eps[k]), abs(math.cos(grid[k]))
    ok = max(means) <= 0.12 and 0.10 <= peak <= 0.12 and abs(cos_at - 0.7) <= 0.1
    record(5, ok, f"max per-theta mean |delta| {max(means):.4f} (<= 0.12); quadrature peak {peak:.4f} "
                  f"in [0.10, 0.12] at |cos| {cos_at:.3f} (near 0.7 +- 0.1)")
    assert ok


# 6 -----------------------------------------------------------------------------------------

@pytest.mark.parametrize("d", [
    128, 192,
    pytest.param(256, marks=pytest.mark.xfail(
        strict=True, reason="for d % 3 == 1 the unique maximiser is floor(2d/3) + 1")),
    512,
])
def test_c6_optimal_alpha(d):
    f = np.array([codebook_log_size(d, a) for a in range(1, d + 1)])
    target = (2 * d) // 3
    best = float(f.max())
    maximisers = [a for a in range(1, d + 1) if f[a - 1] >= best - 1e-9]
    ok = target in maximisers and set(maximisers) <= {target, target + 1}
    record(6, ok, f"d={d}: scan maximisers {maximisers}, floor(2d/3)={target}, ratio test gives "
                  f"{optimal_alpha(d)} (ties at +1 allowed)")
    assert ok


# 7 -----------------------------------------------------------------------------------------

def test_c7_communication_cost():
    two = comm_cost(CostModel(10**6, 512, 341, 341, PAILLIER_2048), "twopc") / MiB
    he = comm_cost(CostModel(10**6, 512, 341, 341, CKKS_SIM), "idface")
    he_mb, he_paper = he / MB, paper_mb(he)
    ok = abs(two - 81.30) <= 0.01 and abs(he_mb - 12.94) / 12.94 <= 0.05 and abs(he_paper - 12.94) / 12.94 <= 0.05
    record(7, ok, f"2PC {two:.4f} MiB (81.30 +- 0.01); IDFace CKKS {he_mb:.3f} MB / {he / MiB:.3f} MiB / "
                  f"{he_paper:.3f} KiB-thousands (within 5% of 12.94)")
    assert ok


# 8 -----------------------------------------------------------------------------------------

@pytest.mark.xfail(strict=True, reason="2*ceil(1e6/341)*512*512 B = 1.538 GB = 1.432 GiB, outside 1.5 +- 1%")
def test_c8_storage_closed_form_literal():
    size = storage_bytes(10**6, 512, 341, 63, PAILLIER_2048)
    ok = abs(size / GB - 1.5) / 1.5 <= 0.01 or abs(size / GiB - 1.5) / 1.5 <= 0.01
    record(8, ok, f"D=10^6: {size} B = {size / GB:.4f} GB = {size / GiB:.4f} GiB (want 1.5 +- 1%)")
    assert ok


def test_c8_storage_closed_form_binary_million():
    size = storage_bytes(2**20, 512, 341, 63, PAILLIER_2048)
    ok = abs(size / GiB - 1.5) / 1.5 <= 0.01
    record(8, ok, f"D=2^20: {size} B = {size / GiB:.4f} GiB (1.5 +- 1%)")
    assert ok


@pytest.fixture(scope="module")
def big_db(kp2048, tmp_path_factory):
    """D = 10^4 templates under a 2048-bit key, beta = 63 (30 batches)."""
    d, alpha, beta, D = 512, 341, 63, 10_000
    be = PaillierBackend.from_keypair(kp2048, rng=random.Random(8))
    be.public.enable_fast_randomness(random.Random(9))
    X = unit_rows(np.random.default_rng(8), D, d)
    root = tmp_path_factory.mktemp("db10k")
    local = LocalServer(be, d, alpha, beta, db_path=root)
    local.enroll(X, [str(i) for i in range(D)])
    return be, local, root, X


def test_c8_storage_materialized(big_db):
    be, local, root, _ = big_db
    on_disk = sum(p.stat().st_size for p in Path(root).glob("batch_*"))
    formula = encrypted_size_bytes(10_000, local.packing.m, 1, 512, be.descriptor.ciphertext_bytes)
    ok = on_disk == formula and len(local.db) == 30
    record(8, ok, f"D=10^4 on disk {on_disk} B vs formula {formula} B in {len(local.db)} batches (exact)")
    assert ok


# 9 -----------------------------------------------------------------------------------------

def test_c9_identify_scaling(big_db):
    be, local, _, X = big_db
    ks = KeyServer(be)
    sizes = (1000, 2000, 4000)
    per = local.batch_size
    rng = np.random.default_rng(9)
    timings = []
    for D in sizes:
        sub = LocalServer(be, 512, 341, 63, channel=InProcessChannel(ks.handle))
        sub._batches = local.db[: math.ceil(D / per)]
        runs = []
        for _ in range(7):
            q = unit_rows(rng, 1, 512)[0]
            t = time.perf_counter()
            sub.identify(q)
            runs.append(time.perf_counter() - t)
        timings.append(statistics.median(runs))
    ratios = [timings[i + 1] / timings[i] for i in range(2)]
    ok = all(1.5 <= r <= 2.5 for r in ratios)
    record(9, ok, f"identify medians {[round(t, 4) for t in timings]} s at D={list(sizes)}; "
                  f"ratios {[round(r, 3) for r in ratios]} (each in [1.5, 2.5])")
    assert ok


# 10 ----------------------------------------------------------------------------------------

def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_c10_privacy_mechanics(kp1024, kp2048):
    d, alpha, beta, D = 512, 341, 63, 100
    rng = np.random.default_rng(10)
    be = PaillierBackend.from_keypair(kp1024, rng=random.Random(10))
    addr = ("127.0.0.1", _free_port())
    srv = serve_key_server(addr, KeyServer(be), background=True)
    transcript = Transcript()
    try:
        X = unit_rows(rng, D, d)
        ids = [f"id{i}" for i in range(D)]
        with TCPChannel(addr, transcript) as ch:
            # 0.3 sits below the sqrt(63/341) cap so both reply shapes occur
            local = LocalServer(be, d, alpha, beta, tau=0.3, channel=ch)
            local.enroll(X, ids)
            queries = [X[i] + 0.03 * rng.standard_normal(d) if i % 2 else unit_rows(rng, 1, d)[0]
                       for i in range(100)]
            results = [local.identify(q) for q in queries]
    finally:
        srv.shutdown()
        srv.server_close()
    assert results == [plaintext_identify(X, ids, q, alpha, beta, 0.3) for q in queries]
    accepted = sum(r.accepted for r in results)
    assert 0 < accepted < 100

    sent = transcript.bytes("out")
    coords = set()
    for v in np.concatenate([X[:20].ravel(), np.concatenate(queries[:20])]):
        coords.add(struct.pack(">d", v))
        coords.add(struct.pack("<d", v))
    leaked_coords = sum(1 for c in coords if c in sent)

    replies = [f for direction, f in transcript.frames if direction == "in"]
    bad_replies = 0
    for frame, res in zip(replies, results):
        msg = wire.wire_decode(frame)
        shape_ok = len(frame) == (14 if not msg.accept else 22)
        expected = (None if not res.accepted else divmod(ids.index(res.identity), local.batch_size))
        got = (msg.batch_idx, msg.within_idx) if msg.accept else None
        bad_replies += int(not (isinstance(msg, wire.IdxResponse) and shape_ok and got == expected))

    be2 = PaillierBackend.from_keypair(kp2048, rng=None)
    cts = {be2.serialize(be2.encrypt([42])) for _ in range(100)}
    ok = leaked_coords == 0 and bad_replies == 0 and len(replies) == 100 and len(cts) == 100
    record(10, ok, f"100 TCP rounds ({accepted} accepts): {leaked_coords} plaintext coordinates in requests, {bad_replies} key-server "
                   f"replies carrying more than flag+index (want 0, 0); {len(cts)}/100 distinct encryptions of 42")
    assert ok
