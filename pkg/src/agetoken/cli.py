"""Command-line driver for every party and for the scenario harness.

Machine-readable results go to stdout as JSON lines; the human trace goes
to stderr.  Exit codes follow ``errors.EXIT_CODES``.

Client token store file (written with mode 0600, replaced atomically)::

    magic       b"AVTSTOR1"
    u32         ready count
    ready[]     u16 len | token (wire encoding)
    u32         pending count
    pending[]   nonce(32) | challenge_digest(32) | token_key_id(32) | token_type(2)
                | u16 len | inverse_blind | u16 len | prepared_message
"""

from __future__ import annotations

import argparse
import json
import os
import random
import signal
import struct
import sys
import threading

from . import __version__, blindsig, errors, simharness, tokens
from .actors import Attester, BlindingState, Client, ClientTokenStore, KycEvidence, PendingToken
from .errors import EXIT_CODES, AgeTokenError, MalformedError, PoolExhaustedError
from .policy import AgePolicy
from .registry import Role, TrustedList, TrustedListEntry, make_key_record
from .services import (
    RemoteAttester,
    RemoteIssuer,
    RemoteOrigin,
    ServiceConfig,
    load_attester_key,
    load_issuer_key,
    save_attester_key,
    save_issuer_key,
    serve,
)

STORE_MAGIC = b"AVTSTOR1"


class Output:
    def __init__(self, quiet: bool = False, out=None, err=None):
        self.quiet = quiet
        self.out = out or sys.stdout
        self.err = err or sys.stderr

    def emit(self, **record) -> None:
        self.out.write(json.dumps(record, sort_keys=True) + "\n")
        self.out.flush()

    def trace(self, msg: str) -> None:
        if not self.quiet:
            self.err.write(msg + "\n")
            self.err.flush()


# -- token store file ---------------------------------------------------------------


def encode_store(store: ClientTokenStore) -> bytes:
    parts = [STORE_MAGIC, struct.pack(">I", len(store.ready))]
    for t in store.ready:
        raw = tokens.encode_token(t)
        parts += [struct.pack(">H", len(raw)), raw]
    parts.append(struct.pack(">I", len(store.pending)))
    for p in store.pending:
        inv = blindsig.int_to_bytes(p.state.inverse_blind, (p.state.inverse_blind.bit_length() + 7) // 8 or 1)
        parts += [p.nonce, p.challenge_digest, p.token_key_id, struct.pack(">HH", p.token_type, len(inv)), inv,
                  struct.pack(">H", len(p.state.prepared_message)), p.state.prepared_message]
    return b"".join(parts)


def decode_store(data: bytes) -> ClientTokenStore:
    r = tokens._Reader(data)
    if r.take(len(STORE_MAGIC)) != STORE_MAGIC:
        raise MalformedError("not a token store file")
    store = ClientTokenStore()
    (n,) = struct.unpack(">I", r.take(4))
    for _ in range(n):
        store.ready.append(tokens.decode_token(r.take(r.u16())))
    (n,) = struct.unpack(">I", r.take(4))
    for _ in range(n):
        nonce, digest, key_id = r.take(32), r.take(32), r.take(32)
        token_type = r.u16()
        inv = blindsig.bytes_to_int(r.take(r.u16()))
        prepared = r.take(r.u16())
        store.pending.append(PendingToken(nonce, BlindingState(inv, prepared), digest, token_type, key_id))
    r.done()
    return store


def load_store(path) -> ClientTokenStore:
    if not os.path.exists(path):
        return ClientTokenStore()
    with open(path, "rb") as fh:
        return decode_store(fh.read())


def save_store(store: ClientTokenStore, path) -> None:
    tmp = f"{path}.tmp"
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(encode_store(store))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# -- helpers ------------------------------------------------------------------------


def _rng(args):
    return random.Random(args.seed) if args.seed is not None else random.SystemRandom()


def _load_evidence(path) -> KycEvidence:
    try:
        with open(path) as fh:
            return KycEvidence.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedError(f"cannot read evidence file: {exc}") from None


def _load_registry(path) -> TrustedList:
    if not os.path.exists(path):
        return TrustedList()
    with open(path, "rb") as fh:
        return TrustedList.import_list(fh.read())


def _write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# -- keygen / registry --------------------------------------------------------------


def cmd_keygen(args, out: Output) -> int:
    if args.role == "issuer":
        rng = random.Random(args.seed) if args.seed is not None else None
        kp = blindsig.generate_keypair(args.bits, rng, toy=args.toy)
        save_issuer_key(kp, args.out)
        pk = kp.public_key
        out.trace(f"issuer key: {pk.modulus_bits} bits, token type 0x{tokens.token_type_for(pk):04X}")
        out.emit(role="issuer", path=args.out, key_id=tokens.derive_key_id(pk).hex(),
                 token_type=tokens.token_type_for(pk), bits=pk.modulus_bits)
    else:
        seed = _rng(args).randbytes(32)
        save_attester_key(seed, args.out)
        out.emit(role="attester", path=args.out, public_key=Attester("-", seed).public_key_bytes.hex())
    return 0


def cmd_registry_add(args, out: Output) -> int:
    registry = _load_registry(args.registry)
    if args.role == "issuer":
        kp = load_issuer_key(args.key)
        material = tokens.encode_public_key(kp.public_key)
        metadata = {"policy": args.policy, "batch_max": str(args.batch_max)}
    else:
        material = Attester(args.id, load_attester_key(args.key)).public_key_bytes
        metadata = {"policies": args.policies}
    entry = TrustedListEntry(args.id, Role(args.role), keys=(make_key_record(material, args.valid_from,
                                                                             args.valid_until),),
                             metadata=metadata)
    registry.register(entry)
    _write_bytes(args.registry, registry.export_list())
    out.trace(f"registered {args.role} {args.id}; trusted list now at version {registry.version}")
    out.emit(entity_id=args.id, role=args.role, version=registry.version, key_id=entry.keys[0].key_id.hex())
    return 0


def cmd_registry_list(args, out: Output) -> int:
    registry = _load_registry(args.registry)
    snap = registry.snapshot(args.version)
    for _, e in sorted(snap.entries.items()):
        out.emit(entity_id=e.entity_id, role=e.role.value, status=e.status.value,
                 key_ids=[k.key_id.hex() for k in e.keys], metadata=dict(e.metadata), version=snap.version)
    return 0


def cmd_registry_export(args, out: Output) -> int:
    data = _load_registry(args.registry).export_list(args.version)
    if args.out:
        _write_bytes(args.out, data)
        out.emit(path=args.out)
    else:
        sys.stdout.write(data.decode())
    return 0


# -- serving ------------------------------------------------------------------------


def cmd_serve(args, out: Output) -> int:
    config = ServiceConfig.load(args.config)
    if args.command == "exchange":
        config.role, config.exchange = "issuer", True
    elif args.command != "registry" and config.role != args.command:
        raise MalformedError(f"config role {config.role!r} does not match command {args.command!r}")
    handle = serve(config, rng=_rng(args))
    out.trace(f"{config.role} {config.entity_id} listening on {handle.url}")
    out.emit(role=config.role, entity_id=config.entity_id, url=handle.url)
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    try:
        done.wait(args.duration)
    finally:
        handle.stop()
    return 0


# -- client -------------------------------------------------------------------------


def cmd_client_attest(args, out: Output) -> int:
    evidence = _load_evidence(args.evidence)
    out.trace(f"attest: asking {args.attester} for {args.policy}")
    decision, _ = RemoteAttester(args.attester).attest(evidence, AgePolicy.parse(args.policy))
    out.trace(f"attest: granted, batch allowance {decision.batch_allowance}")
    out.emit(step="attest", **decision.to_dict())
    return 0


def _obtain(args, out: Output, client: Client) -> tuple[bytes, list]:
    evidence = _load_evidence(args.evidence)
    origin = RemoteOrigin(args.origin)
    issuer = RemoteIssuer(args.issuer)
    challenge = origin.challenge(args.mode)
    out.trace(f"challenge: {len(challenge)} bytes from {args.origin} ({args.mode})")
    pk = issuer.public_key
    info = issuer.info()
    pending, requests = client.begin_issuance(challenge, pk, args.count, batch_max=info["batch_max"])
    out.trace(f"begin-issuance: {len(requests)} blinded requests for issuer {info['issuer_id']}")
    try:
        decision, forwarded = RemoteAttester(args.attester).attest(evidence, AgePolicy.parse(args.policy), requests)
        out.trace(f"attest: granted, forwarded request {len(forwarded)} bytes")
        sigs = issuer.issue(forwarded)
    except AgeTokenError as exc:
        # a batch that was never signed cannot be finalized later
        ids = {id(p) for p in pending}
        client.store.pending = [p for p in client.store.pending if id(p) not in ids]
        out.trace(f"attest/issue failed: {exc.reason}")
        raise
    out.trace(f"issue: {len(sigs)} blind signatures")
    toks = client.finalize_batch(pending, sigs, pk)
    out.trace(f"finalize: {len(toks)} tokens verified")
    return challenge, toks


def cmd_client_obtain(args, out: Output) -> int:
    client = Client(_rng(args), load_store(args.store))
    try:
        _, toks = _obtain(args, out, client)
    finally:
        save_store(client.store, args.store)
    out.emit(step="obtain", issued=len(toks), balance=client.store.count())
    return 0


def _spend_once(client: Client, origin: RemoteOrigin, challenge: bytes, out: Output) -> int:
    try:
        token = client.redeem(challenge)
    except PoolExhaustedError:
        out.trace("spend: token pool exhausted; attest again with `agetoken client obtain`")
        out.emit(step="spend", decision="pool-exhausted", balance=0)
        return EXIT_CODES["pool-exhausted"]
    decision = origin.redeem(tokens.encode_token(token), challenge)
    out.trace(f"redeem: {decision}")
    out.emit(step="spend", decision=str(decision), balance=client.store.count(tokens.sha256(challenge)))
    return 0 if decision.granted else EXIT_CODES.get(decision.reason.value, 1)


def cmd_client_flow(args, out: Output) -> int:
    client = Client(_rng(args), load_store(args.store))
    try:
        challenge, toks = _obtain(args, out, client)
        code = _spend_once(client, RemoteOrigin(args.origin), challenge, out)
    finally:
        save_store(client.store, args.store)
    out.trace(f"store: {client.store.count()} tokens left in {args.store}")
    return code


def cmd_client_spend(args, out: Output) -> int:
    client = Client(_rng(args), load_store(args.store))
    origin = RemoteOrigin(args.origin)
    code = 0
    try:
        for _ in range(args.times):
            challenge = origin.challenge("batch")
            code = _spend_once(client, origin, challenge, out)
            if code:
                break
    finally:
        save_store(client.store, args.store)
    return code


def cmd_client_balance(args, out: Output) -> int:
    store = load_store(args.store)
    digest = tokens.sha256(RemoteOrigin(args.origin).challenge("batch")) if args.origin else None
    out.emit(balance=store.count(digest), pending=len(store.pending))
    return 0


# -- scenarios ----------------------------------------------------------------------


def cmd_scenario_run(args, out: Output) -> int:
    names = sorted(simharness.SCENARIOS) if args.name == "all" else [args.name]
    for name in names:
        if name not in simharness.SCENARIOS:
            raise MalformedError(f"unknown scenario {name!r}; choose from {sorted(simharness.SCENARIOS)} or all")
    overrides = {k: getattr(args, k) for k in ("clients", "origins", "issuers", "tokens_per_client", "trials",
                                               "spend_spacing", "key_bits") if getattr(args, k) is not None}
    if args.sync_interval is not None:
        overrides["sync_interval"] = None if args.sync_interval == "off" else float(args.sync_interval)
    if args.no_exchange:
        overrides["exchange"] = False
    seed = args.seed if args.seed is not None else 0
    reports = []
    for name in names:
        cfg = simharness.default_config(name, seed=seed, **overrides)
        out.trace(f"scenario {name}: seed {seed}, transport {args.transport}")
        report = simharness.run_scenario(name, cfg, args.transport)
        out.trace(f"scenario {name}: {'PASS' if report.passed else 'FAIL'}")
        reports.append(report)
        if not args.out:
            out.out.write(report.to_json() + "\n")
    if args.out:
        simharness.write_reports(args.out, reports)
        out.emit(path=args.out, scenarios=names, passed=all(r.passed for r in reports))
    return 0


def cmd_scenario_report(args, out: Output) -> int:
    try:
        reports = simharness.read_reports(args.file)
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise MalformedError(f"cannot read report file: {exc}") from None
    out.out.write(simharness.render_table(reports) + "\n")
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agetoken", description=__doc__.split("\n\n")[0])
    p.add_argument("--seed", type=int, help="seed every random choice (deterministic runs)")
    p.add_argument("--quiet", action="store_true", help="suppress the stderr trace")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("keygen", help="generate an issuer or attester key file")
    k.add_argument("--role", choices=("issuer", "attester"), required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--bits", type=int, default=blindsig.MIN_PRODUCTION_BITS)
    k.add_argument("--toy", action="store_true", help="allow small test-only moduli")
    k.set_defaults(func=cmd_keygen)

    reg = sub.add_parser("registry", help="manage a trusted-list file or serve it")
    rsub = reg.add_subparsers(dest="action", required=True)
    a = rsub.add_parser("add")
    a.add_argument("--registry", required=True)
    a.add_argument("--role", choices=("issuer", "attester"), required=True)
    a.add_argument("--id", required=True)
    a.add_argument("--key", required=True, help="key file written by keygen")
    a.add_argument("--policy", default="18+/low", help="issuer policy label")
    a.add_argument("--batch-max", type=int, default=100)
    a.add_argument("--policies", default="18+/high,13+/high", help="attester policy labels")
    a.add_argument("--valid-from", type=int, default=0)
    a.add_argument("--valid-until", type=int, default=2**40)
    a.set_defaults(func=cmd_registry_add)
    ls = rsub.add_parser("list")
    ls.add_argument("--registry", required=True)
    ls.add_argument("--version", type=int)
    ls.set_defaults(func=cmd_registry_list)
    ex = rsub.add_parser("export")
    ex.add_argument("--registry", required=True)
    ex.add_argument("--version", type=int)
    ex.add_argument("--out")
    ex.set_defaults(func=cmd_registry_export)
    sv = rsub.add_parser("serve")
    sv.add_argument("--config", required=True)
    sv.add_argument("--duration", type=float, help="stop after this many seconds")
    sv.set_defaults(func=cmd_serve)

    for role in ("attester", "issuer", "origin", "exchange"):
        s = sub.add_parser(role, help=f"serve the {role} described by a config file")
        s.add_argument("--config", required=True)
        s.add_argument("--duration", type=float, help="stop after this many seconds")
        s.set_defaults(func=cmd_serve)

    c = sub.add_parser("client", help="client-side flows against running services")
    csub = c.add_subparsers(dest="action", required=True)
    ca = csub.add_parser("attest")
    ca.add_argument("--attester", required=True)
    ca.add_argument("--evidence", required=True)
    ca.add_argument("--policy", default="18+/low")
    ca.set_defaults(func=cmd_client_attest)
    for name, func, doc in (("obtain", cmd_client_obtain, "attest and store a batch of tokens"),
                            ("flow", cmd_client_flow, "attest, obtain, then redeem one token")):
        o = csub.add_parser(name, help=doc)
        o.add_argument("--attester", required=True)
        o.add_argument("--issuer", required=True)
        o.add_argument("--origin", required=True)
        o.add_argument("--evidence", required=True)
        o.add_argument("--count", type=int, default=10)
        o.add_argument("--policy", default="18+/low")
        o.add_argument("--mode", choices=("batch", "bound"), default="batch")
        o.add_argument("--store", required=True)
        o.set_defaults(func=func)
    sp = csub.add_parser("spend")
    sp.add_argument("--origin", required=True)
    sp.add_argument("--store", required=True)
    sp.add_argument("--times", type=int, default=1)
    sp.set_defaults(func=cmd_client_spend)
    b = csub.add_parser("balance")
    b.add_argument("--store", required=True)
    b.add_argument("--origin", help="count only tokens usable at this origin")
    b.set_defaults(func=cmd_client_balance)

    sc = sub.add_parser("scenario", help="run or summarize harness scenarios")
    ssub = sc.add_subparsers(dest="action", required=True)
    r = ssub.add_parser("run")
    r.add_argument("name", help=f"one of {sorted(simharness.SCENARIOS)} or all")
    r.add_argument("--out")
    r.add_argument("--transport", choices=sorted(simharness.TRANSPORTS), default="http")
    r.add_argument("--clients", type=int)
    r.add_argument("--origins", type=int)
    r.add_argument("--issuers", type=int)
    r.add_argument("--tokens-per-client", type=int)
    r.add_argument("--trials", type=int)
    r.add_argument("--sync-interval", help="seconds, 0 for instant, or off")
    r.add_argument("--spend-spacing", type=float)
    r.add_argument("--key-bits", type=int)
    r.add_argument("--no-exchange", action="store_true")
    r.set_defaults(func=cmd_scenario_run)
    rep = ssub.add_parser("report")
    rep.add_argument("file")
    rep.set_defaults(func=cmd_scenario_report)
    return p


def main(argv=None, out: Output | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = out or Output(args.quiet)
    try:
        return args.func(args, out)
    except AgeTokenError as exc:
        reason = getattr(exc, "reason", "error")
        code = EXIT_CODES.get(reason) or errors.exit_code_for_status(getattr(exc, "status", 500))
        out.trace(f"error: {reason}: {exc}")
        out.emit(error=reason, detail=str(exc), exit_code=code)
        return code
    except (OSError, KeyError) as exc:
        out.trace(f"error: {exc}")
        out.emit(error="error", detail=str(exc), exit_code=EXIT_CODES["error"])
        return EXIT_CODES["error"]


if __name__ == "__main__":
    sys.exit(main())
