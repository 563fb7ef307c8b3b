"""Command-line entry point: ``idface <subcommand> ...``.

Exit codes: 0 success or accept, 3 reject, 10 usage/configuration error,
11 library error, 12 I/O error, 13 transport failure.

Settings may also come from ``--config FILE`` (``key = value`` lines,
names as the long flags with dashes or underscores); explicit flags win.
``IDFACE_SEED`` overrides the configured seed unless ``--seed`` is given.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import random
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .ahe import (
    CKKS_SIM,
    PAILLIER_2048,
    PaillierBackend,
    keygen,
    load_keypair,
    load_public_key,
    save_keypair,
)
from .analysis import (
    CostModel,
    GiB,
    MiB,
    comm_cost,
    codebook_log_size,
    isometry_report,
    optimal_alpha,
    order_stat_check,
    paper_mb,
    rows_to_csv,
    storage_bytes,
    theta_grid,
    two_thirds_alpha,
)
from .dbenc import encrypted_size_bytes
from .errors import IDFaceError, TransportFailure
from . import wire
from .protocol import InProcessChannel, KeyServer, LocalServer, TCPChannel, Transcript, serve
from .transform import read_templates, write_templates

log = logging.getLogger("idface")

EXIT_OK, EXIT_REJECT = 0, 3
EXIT_USAGE, EXIT_LIB, EXIT_IO, EXIT_TRANSPORT = 10, 11, 12, 13

BENCH_COLUMNS = ["D", "batches", "enroll_s", "identify_mean_s", "identify_std_s",
                 "storage_bytes", "formula_bytes"]


class UsageError(Exception):
    pass


# -- helpers ------------------------------------------------------------------------------

def _seed(args) -> int | None:
    return args.seed


def _py_rng(seed):
    return None if seed is None else random.Random(seed)


def _read_config(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    cp = configparser.ConfigParser()
    cp.read_string("[idface]\n" + text)
    return {k.replace("-", "_"): v for k, v in cp["idface"].items()}


def _dir_size(root: Path) -> int:
    return sum(p.stat().st_size for p in root.glob("batch_*"))


def _backend_for_db(args, secret: bool):
    if secret:
        kp = load_keypair(args.keyfile)
        be = PaillierBackend.from_keypair(kp, slot_count=args.slot_count, rng=_py_rng(_seed(args)))
    else:
        pk = load_public_key(args.public_key or args.keyfile)
        be = PaillierBackend(pk, None, slot_count=args.slot_count, rng=_py_rng(_seed(args)))
    return be


def _local_server(args, channel=None) -> LocalServer:
    be = _backend_for_db(args, secret=False)
    local = LocalServer(be, args.d, args.alpha, args.beta, args.threshold, channel=channel,
                        db_path=args.db, threads=args.threads)
    if args.db and (Path(args.db) / "meta.json").exists():
        local.load(args.db)
    return local


# -- subcommands ----------------------------------------------------------------------

def cmd_keygen(args) -> int:
    t = time.perf_counter()
    kp = keygen(args.bits, rng=_seed(args))
    save_keypair(args.out, kp, args.public_out)
    log.info("generated %d-bit key in %.2fs", args.bits, time.perf_counter() - t)
    print(args.out)
    return EXIT_OK


def gen_templates(count: int, d: int, seed) -> np.ndarray:
    if count < 1:
        raise UsageError("count must be at least 1")
    X = np.random.default_rng(seed).standard_normal((count, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def cmd_gen_templates(args) -> int:
    write_templates(args.out, gen_templates(args.count, args.d, _seed(args)))
    return EXIT_OK


def cmd_enroll(args) -> int:
    X = read_templates(args.input)
    local = _local_server(args)
    if args.ids:
        ids = [ln.strip() for ln in Path(args.ids).read_text(encoding="utf-8").splitlines() if ln.strip()]
    else:
        start = local.enrolled
        ids = [str(start + i) for i in range(X.shape[0])]
    if args.fast_randomness:
        local.backend.public.enable_fast_randomness(_py_rng(_seed(args)))
    t = time.perf_counter()
    n = local.enroll(X, ids)
    log.info("enrolled %d templates into %d new batches in %.2fs", len(ids), n, time.perf_counter() - t)
    print(f"enrolled={len(ids)} batches={len(local.db)}")
    return EXIT_OK


def _report(res) -> int:
    if res.accepted:
        print(res.identity)
        return EXIT_OK
    print("reject")
    return EXIT_REJECT


def cmd_identify(args) -> int:
    y = read_templates(args.input)[args.row]
    if args.local:
        with TCPChannel(args.local) as ch:
            reply = ch.request(wire.IdentifyRequest(y, args.threshold))
        if not isinstance(reply, wire.IdentifyReply):
            raise TransportFailure(f"unexpected reply {type(reply).__name__}")
        if reply.accept:
            print(reply.identity)
            return EXIT_OK
        print("reject")
        return EXIT_REJECT
    if args.key_server:
        channel = TCPChannel(args.key_server)
    else:
        if not args.keyfile:
            raise UsageError("identify needs --keyfile, --key-server or --local")
        channel = InProcessChannel(KeyServer(_backend_for_db(args, secret=True)).handle)
    local = _local_server(args, channel)
    try:
        return _report(local.identify(y, args.threshold))
    finally:
        channel.close()


def run_bench(sizes, d: int, alpha: int, beta: int, bits: int, queries: int, seed, threads: int = 1,
              workdir: Path | None = None) -> list[dict]:
    if list(sizes) != sorted(sizes):
        raise UsageError("sizes must be ascending")
    kp = keygen(bits, rng=seed)
    rng = _py_rng(seed)
    be = PaillierBackend.from_keypair(kp, rng=rng)
    be.public.enable_fast_randomness(rng)
    ks = KeyServer(be)
    rows = []
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for D in sizes:
            root = Path(tmp) / f"db_{D}"
            X = gen_templates(D, d, None if seed is None else [seed, D])
            local = LocalServer(be, d, alpha, beta, channel=InProcessChannel(ks.handle),
                                db_path=root, threads=threads)
            t = time.perf_counter()
            local.enroll(X, [str(i) for i in range(D)])
            enroll_s = time.perf_counter() - t
            Q = gen_templates(queries, d, None if seed is None else [seed, D, 1])
            times = []
            for q in Q:
                t = time.perf_counter()
                local.identify(q)
                times.append(time.perf_counter() - t)
            rows.append({
                "D": D,
                "batches": len(local.db),
                "enroll_s": round(enroll_s, 6),
                "identify_mean_s": round(float(np.mean(times)), 6),
                "identify_std_s": round(float(np.std(times)), 6),
                "storage_bytes": _dir_size(root),
                "formula_bytes": encrypted_size_bytes(D, local.packing.m, 1, d,
                                                      be.descriptor.ciphertext_bytes),
            })
            log.info("D=%d done", D)
    return rows


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = run_bench(sizes, args.d, args.alpha, args.beta, args.bits, args.queries, _seed(args),
                     args.threads)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def _analysis_rows(args) -> list:
    if args.what == "isometry":
        thetas = theta_grid(args.grid)
        return isometry_report(args.d, args.alpha, args.beta, thetas, args.trials, _seed(args))
    if args.what == "codebook":
        best = optimal_alpha(args.d)
        return [{"d": args.d, "alpha": a, "log_size": codebook_log_size(args.d, a),
                 "is_optimal": int(a == best), "two_thirds": int(a == two_thirds_alpha(args.d))}
                for a in range(1, args.d + 1)]
    if args.what == "orderstat":
        r = order_stat_check(args.d, args.alpha, args.trials, _seed(args))
        return [r]
    if args.what == "cost":
        rows = []
        for name, desc in (("paillier", PAILLIER_2048), ("ckks-sim", CKKS_SIM)):
            model = CostModel(args.D, args.d, args.alpha, args.beta, desc, args.parties)
            b = comm_cost(model, "idface")
            rows.append({"protocol": "idface", "backend": name, "m": model.m, "bytes": b,
                         "MiB": b / MiB, "paper_MB": paper_mb(b),
                         "storage_bytes": storage_bytes(args.D, args.d, args.alpha, args.beta, desc),
                         "storage_GiB": storage_bytes(args.D, args.d, args.alpha, args.beta, desc) / GiB})
        model = CostModel(args.D, args.d, args.alpha, args.beta, PAILLIER_2048, args.parties)
        for proto in ("twopc", "multi"):
            b = comm_cost(model, proto)
            rows.append({"protocol": proto, "backend": "-", "m": "", "bytes": b, "MiB": b / MiB,
                         "paper_MB": "", "storage_bytes": "", "storage_GiB": ""})
        return rows
    raise UsageError(f"unknown analysis {args.what!r}")


def cmd_analyze(args) -> int:
    rows = _analysis_rows(args)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            rows_to_csv(rows, fh)
    else:
        rows_to_csv(rows, sys.stdout)
    return EXIT_OK


def cmd_serve_key(args) -> int:
    be = _backend_for_db(args, secret=True)
    log.info("key server listening on %s", args.listen)
    serve(args.listen, KeyServer(be))
    return EXIT_OK


def cmd_serve_local(args) -> int:
    channel = TCPChannel(args.key_server)
    local = _local_server(args, channel)
    log.info("local server listening on %s with %d enrolled", args.listen, local.enrolled)
    serve(args.listen, local)
    return EXIT_OK


class _PersistentParty:
    """Sharing party that writes its shares to disk after every upload."""

    def __init__(self, party, path):
        self.party, self.path = party, path

    def handle(self, msg):
        reply = self.party.handle(msg)
        if self.path and isinstance(msg, wire.ShareUpload):
            self.party.save(self.path)
        return reply


def _load_party(d: int, path):
    from .twopc import SharingParty

    if path and Path(path).exists():
        p = SharingParty.load(path)
        if p.d != d:
            raise UsageError(f"{path} stores d={p.d}, expected {d}")
        return p
    return SharingParty(d)


def cmd_twopc_serve(args) -> int:
    if not 1 <= args.party < args.parties:
        raise UsageError("helper parties are numbered 1..parties-1; party 0 is the initiator")
    party = _load_party(args.d, args.state)
    log.info("sharing party %d/%d listening on %s", args.party, args.parties, args.listen)
    serve(args.listen, _PersistentParty(party, args.state))
    return EXIT_OK


def cmd_twopc_identify(args) -> int:
    from .twopc import SecretSharedInitiator

    peers = [p for p in (args.peers or "").split(",") if p]
    if len(peers) != args.parties - 1:
        raise UsageError(f"--parties {args.parties} needs {args.parties - 1} peer addresses")
    transcript = Transcript()
    channels = [TCPChannel(p, transcript) for p in peers]
    try:
        init = SecretSharedInitiator(args.d, args.alpha, args.beta, channels, args.threshold, _seed(args))
        init.local = _load_party(args.d, args.state)
        if args.enroll:
            X = read_templates(args.enroll)
            start = len(init.local)
            for i, row in enumerate(X):
                init.enroll(row, str(start + i))
            if args.state:
                init.local.save(args.state)
        code = EXIT_OK
        if args.input:
            y = read_templates(args.input)[args.row]
            code = _report(init.identify(y, args.threshold))
            log.info("exchanged %d query bits and %d reply bits",
                     init.last_bits["query"], init.last_bits["reply"])
        if args.transcript:
            transcript.dump(args.transcript)
        return code
    finally:
        for ch in channels:
            ch.close()


# -- parser ---------------------------------------------------------------------------------

def _common(p, *, model=True, key=False, db=False):
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides IDFACE_SEED)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    if model:
        p.add_argument("--d", type=int, default=512)
        p.add_argument("--alpha", type=int, default=341)
        p.add_argument("--beta", type=int, default=63)
        p.add_argument("--threshold", "--tau", dest="threshold", type=float, default=0.5)
    if key:
        p.add_argument("--keyfile", help="key pair file (secret)")
        p.add_argument("--public-key", help="public key file")
        p.add_argument("--slot-count", type=int, default=1)
    if db:
        p.add_argument("--db", help="encrypted database directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="idface", description="Encrypted template identification tools")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--config", help="key = value settings file; flags win")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a Paillier key pair")
    _common(p, model=False)
    p.add_argument("--bits", type=int, default=2048)
    p.add_argument("--out", required=True)
    p.add_argument("--public-out")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("gen-templates", help="write random unit-norm templates")
    _common(p, model=False)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--d", type=int, default=512)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_templates)

    p = sub.add_parser("enroll", help="encrypt templates into a database directory")
    _common(p, key=True, db=True)
    p.add_argument("--input", required=True)
    p.add_argument("--ids", help="file with one identity per line")
    p.add_argument("--no-fast-randomness", dest="fast_randomness", action="store_false")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("identify", help="identify one template (exit 0 accept, 3 reject)")
    _common(p, key=True, db=True)
    p.add_argument("--input", required=True)
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--key-server", help="ADDR of a running key server")
    p.add_argument("--local", help="ADDR of a running local server")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("bench", help="enroll/identify timings as CSV")
    _common(p)
    p.add_argument("--sizes", default="1000,2000,4000")
    p.add_argument("--bits", type=int, default=2048)
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="numerical reports as CSV")
    _common(p)
    p.add_argument("what", choices=["isometry", "codebook", "cost", "orderstat"])
    p.add_argument("--grid", type=int, default=20)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--D", type=int, default=10**6)
    p.add_argument("--parties", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve-key", help="run the key server")
    _common(p, model=False, key=True)
    p.add_argument("--listen", required=True)
    p.set_defaults(func=cmd_serve_key)

    p = sub.add_parser("serve-local", help="run the local server")
    _common(p, key=True, db=True)
    p.add_argument("--listen", required=True)
    p.add_argument("--key-server", required=True)
    p.set_defaults(func=cmd_serve_local)

    p = sub.add_parser("twopc-serve", help="run a helper share-holding party")
    _common(p, model=False)
    p.add_argument("--d", type=int, default=512)
    p.add_argument("--listen", required=True)
    p.add_argument("--party", type=int, required=True)
    p.add_argument("--parties", type=int, default=2)
    p.add_argument("--state", help="npz file persisting this party's shares")
    p.set_defaults(func=cmd_twopc_serve)

    p = sub.add_parser("twopc-identify", help="enroll and/or identify as the initiating party")
    _common(p)
    p.add_argument("--peers", required=True, help="comma-separated helper addresses")
    p.add_argument("--parties", type=int, default=2)
    p.add_argument("--state", help="npz file persisting the initiator's shares")
    p.add_argument("--enroll", help="templates to share before identifying")
    p.add_argument("--input", help="query template file")
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--transcript", help="dump exchanged frames to this file")
    p.set_defaults(func=cmd_twopc_identify)
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    conf = _read_config(known.config)
    for action in ap._subparsers._group_actions[0].choices.values():
        for a in action._actions:
            if a.dest in conf:
                val = conf[a.dest]
                a.default = a.type(val) if a.type else val
                a.required = False


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    try:
        _apply_config(ap, argv)
        args = ap.parse_args(argv)
    except (OSError, configparser.Error, ValueError) as exc:
        print(f"idface: bad configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    # an explicit --seed wins, then IDFACE_SEED, then any config value
    seed_flag = any(a == "--seed" or a.startswith("--seed=") for a in argv)
    if hasattr(args, "seed") and not seed_flag and os.environ.get("IDFACE_SEED"):
        args.seed = int(os.environ["IDFACE_SEED"])
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"idface: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TransportFailure as exc:
        print(f"idface: transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except IDFaceError as exc:
        print(f"idface: {exc}", file=sys.stderr)
        return EXIT_LIB
    except OSError as exc:
        print(f"idface: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"idface: {exc}", file=sys.stderr)
        return EXIT_LIB
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
