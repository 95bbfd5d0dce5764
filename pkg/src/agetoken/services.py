"""HTTP services for every party, spent-store sync, and matching clients.

Endpoints (bodies are the byte layouts from :mod:`agetoken.tokens`,
:mod:`agetoken.actors` and :mod:`agetoken.exchange` unless noted):

    GET  /health                      all roles, JSON
    POST /attest                      attester, JSON in and out
    POST /issue                       issuer: ForwardedRequest -> count(2) | sigs
    GET  /public-key                  issuer: DER RSAPublicKey
    GET  /info                        issuer/origin: JSON description
    POST /exchange                    exchange issuer: ExchangeRequest -> blind sig
    GET  /exchange-challenge          exchange issuer: TokenChallenge
    GET  /challenge?mode=batch|bound  origin: TokenChallenge
    POST /redeem                      origin: len(2) challenge | challenge | token
    GET  /spent?since=N               origin: watermark(8) | spent records
    POST /spent                       origin: spent records, merged by union
    GET  /trusted-list?version=V      registry: snapshot text

Errors come back as JSON ``{"error": reason, "detail": text}`` with the
status from the fixed table in :mod:`agetoken.errors`.  No TLS.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterable

from . import errors, tokens
from .actors import (
    AttestationDecision,
    Attester,
    Issuer,
    KycEvidence,
    Origin,
    RedeemDecision,
    RedeemReason,
)
from .blindsig import IssuerKeyPair
from .clock import SystemClock
from .errors import AgeTokenError, MalformedError
from .exchange import ExchangePoint
from .policy import AgePolicy
from .registry import TrustedList
from .spent import PersistentSpentStore, SpentStore, SpentTokenRecord, decode_records, encode_records

log = logging.getLogger(__name__)

OCTET = "application/octet-stream"
ROLES = ("attester", "issuer", "origin", "registry")


# -- key files -------------------------------------------------------------------


def save_issuer_key(kp: IssuerKeyPair, path) -> None:
    doc = {"kind": "rsa-blind", "n": hex(kp.modulus), "e": hex(kp.public_exponent),
           "d": hex(kp.private_exponent), "p": hex(kp.prime_p), "q": hex(kp.prime_q)}
    _write_private(path, json.dumps(doc, indent=2) + "\n")


def load_issuer_key(path) -> IssuerKeyPair:
    try:
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("kind") != "rsa-blind":
            raise MalformedError(f"{path}: not an issuer key file")
        kp = IssuerKeyPair(*(int(doc[k], 16) for k in ("n", "e", "d", "p", "q")))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise MalformedError(f"bad issuer key {path}: {exc}") from None
    kp.check()
    return kp


def save_attester_key(seed: bytes, path) -> None:
    _write_private(path, json.dumps({"kind": "ed25519", "seed": seed.hex()}, indent=2) + "\n")


def load_attester_key(path) -> bytes:
    try:
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("kind") != "ed25519":
            raise MalformedError(f"{path}: not an attester key file")
        seed = bytes.fromhex(doc["seed"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise MalformedError(f"bad attester key {path}: {exc}") from None
    if len(seed) != 32:
        raise MalformedError("attester seed must be 32 bytes")
    return seed


def _write_private(path, text: str) -> None:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(text)


# -- configuration ----------------------------------------------------------------

ENV_OVERRIDES = {
    "AGETOKEN_HOST": "host",
    "AGETOKEN_PORT": "port",
    "AGETOKEN_KEY_PATH": "key_path",
    "AGETOKEN_REGISTRY_PATH": "registry_path",
    "AGETOKEN_SPENT_STORE_PATH": "spent_store_path",
}


@dataclass
class ServiceConfig:
    role: str
    entity_id: str = ""
    host: str = "127.0.0.1"
    port: int = 0
    key_path: str | None = None
    registry_path: str | None = None
    spent_store_path: str | None = None
    sync_peers: list[str] = field(default_factory=list)
    sync_interval: float = 5.0
    batch_max: int = 100
    batch_allowance: int = 10
    context_ttl: float = 120.0
    policy: str = "18+/low"
    issuer_name: str = ""
    token_type: int = tokens.TOKEN_TYPE_BLIND_RSA
    exchange: bool = False
    exchange_spent_store_path: str | None = None

    def validate(self) -> None:
        if self.role not in ROLES:
            raise MalformedError(f"unknown role {self.role!r}")
        if self.role in ("attester", "issuer") and not self.key_path:
            raise MalformedError(f"{self.role} needs key_path")
        if self.role in ("issuer", "origin", "registry") and not self.registry_path:
            raise MalformedError(f"{self.role} needs registry_path")
        if self.role in ("attester", "issuer", "origin") and not self.entity_id:
            raise MalformedError(f"{self.role} needs entity_id")
        if not 0 <= int(self.port) <= 65535:
            raise MalformedError("port out of range")
        AgePolicy.parse(self.policy)

    @classmethod
    def load(cls, path, env=None) -> ServiceConfig:
        """Read a JSON config file, then apply AGETOKEN_* environment overrides."""
        with open(path) as fh:
            doc = json.load(fh)
        base = os.path.dirname(os.path.abspath(path))
        for key in ("key_path", "registry_path", "spent_store_path", "exchange_spent_store_path"):
            if doc.get(key) and not os.path.isabs(doc[key]):
                doc[key] = os.path.join(base, doc[key])
        env = os.environ if env is None else env
        for var, key in ENV_OVERRIDES.items():
            if env.get(var):
                doc[key] = env[var]
        doc["port"] = int(doc.get("port", 0))
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise MalformedError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg


# -- spent-store sync -------------------------------------------------------------


class LocalPeer:
    def __init__(self, store: SpentStore, name: str = "local"):
        self.store = store
        self.name = name

    def fetch(self, since: int) -> tuple[list[SpentTokenRecord], int]:
        recs = self.store.records(since)
        return recs, since + len(recs)

    def push(self, records: list[SpentTokenRecord]) -> int:
        return self.store.merge(records)


class HttpPeer:
    def __init__(self, url: str, timeout: float = 5.0):
        self.url = url.rstrip("/")
        self.name = self.url
        self.timeout = timeout

    def fetch(self, since: int) -> tuple[list[SpentTokenRecord], int]:
        body = _http("GET", f"{self.url}/spent?since={since}", timeout=self.timeout)
        (mark,) = struct.unpack(">Q", body[:8])
        return decode_records(body[8:]), mark

    def push(self, records: list[SpentTokenRecord]) -> int:
        reply = _http("POST", f"{self.url}/spent", encode_records(records), timeout=self.timeout)
        return json.loads(reply)["added"]


@dataclass
class SpentStoreSync:
    store: SpentStore
    peers: list = field(default_factory=list)
    pulled: dict = field(default_factory=dict)   # peer name -> peer sequence already merged
    pushed: dict = field(default_factory=dict)   # peer name -> local sequence already sent


@dataclass
class MergeReport:
    pulled: int = 0
    pushed: int = 0
    synced: list = field(default_factory=list)
    skipped: list = field(default_factory=list)


def sync_spent_stores(state: SpentStoreSync) -> MergeReport:
    """One anti-entropy pass: pull new peer records, push new local ones.

    Never deletes; unreachable peers are skipped and listed in the report.
    """
    report = MergeReport()
    for peer in state.peers:
        try:
            recs, mark = peer.fetch(state.pulled.get(peer.name, 0))
            report.pulled += state.store.merge(recs)
            state.pulled[peer.name] = mark
            start = state.pushed.get(peer.name, 0)
            outgoing = state.store.records(start)
            if outgoing:
                report.pushed += peer.push(outgoing)
            state.pushed[peer.name] = start + len(outgoing)
            report.synced.append(peer.name)
        except (OSError, AgeTokenError, ValueError) as exc:
            log.warning("sync with %s skipped: %s", peer.name, exc)
            report.skipped.append(peer.name)
    return report


class SyncLoop(threading.Thread):
    """Background periodic sync on wall-clock time."""

    def __init__(self, state: SpentStoreSync, interval: float):
        super().__init__(daemon=True, name="spent-sync")
        self.state = state
        self.interval = interval
        self._stop = threading.Event()

    def run(self):
        while not self._stop.wait(self.interval):
            sync_spent_stores(self.state)

    def stop(self):
        self._stop.set()


# -- server -------------------------------------------------------------------------


def _error_body(exc: AgeTokenError) -> bytes:
    return json.dumps({"error": exc.reason, "detail": str(exc)}).encode()


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    app: "Service"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _send(self, status: int, body: bytes, ctype: str = OCTET):
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _dispatch(self, method: str):
        parsed = urllib.parse.urlsplit(self.path)
        query = dict(urllib.parse.parse_qsl(parsed.query))
        route = self.app.routes.get((method, parsed.path))
        if route is None:
            self._send(404, json.dumps({"error": "not-found", "detail": parsed.path}).encode(), "application/json")
            return
        try:
            body = self._body() if method == "POST" else b""
            status, out, ctype = route(body, query)
        except AgeTokenError as exc:
            status, out, ctype = exc.status, _error_body(exc), "application/json"
        except (ValueError, KeyError, TypeError, struct.error) as exc:
            status, out, ctype = 400, json.dumps({"error": "malformed", "detail": str(exc)}).encode(), "application/json"
        self._send(status, out, ctype)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")


class Service:
    """Routes for one party.  Build with :func:`serve` or :func:`serve_party`."""

    def __init__(self, party, *, entity_id: str = "", registry: TrustedList | None = None,
                 exchange_point: ExchangePoint | None = None):
        self.party = party
        self.entity_id = entity_id
        self.registry = registry
        self.exchange_point = exchange_point
        self.routes = {("GET", "/health"): self.health}
        if isinstance(party, Attester):
            self.role = "attester"
            self.routes[("POST", "/attest")] = self.attest
        elif isinstance(party, Issuer):
            self.role = "issuer"
            self.routes[("POST", "/issue")] = self.issue
            self.routes[("GET", "/public-key")] = self.public_key
            self.routes[("GET", "/info")] = self.issuer_info
            if exchange_point is not None:
                self.routes[("POST", "/exchange")] = self.exchange
                self.routes[("GET", "/exchange-challenge")] = self.exchange_challenge
        elif isinstance(party, Origin):
            self.role = "origin"
            self.routes[("GET", "/challenge")] = self.challenge
            self.routes[("POST", "/redeem")] = self.redeem
            self.routes[("GET", "/spent")] = self.spent_fetch
            self.routes[("POST", "/spent")] = self.spent_merge
            self.routes[("GET", "/info")] = self.origin_info
        elif isinstance(party, TrustedList):
            self.role = "registry"
            self.routes[("GET", "/trusted-list")] = self.trusted_list
        else:
            raise TypeError(f"cannot serve {type(party).__name__}")

    def health(self, body, query):
        return 200, json.dumps({"status": "ok", "role": self.role, "id": self.entity_id}).encode(), "application/json"

    # attester
    def attest(self, body, query):
        try:
            doc = json.loads(body)
        except json.JSONDecodeError as exc:
            raise MalformedError(f"attest body is not JSON: {exc}") from None
        evidence = KycEvidence.from_dict(doc["evidence"])
        policy = doc.get("policy", "18+/low")
        policy = AgePolicy.parse(policy) if isinstance(policy, str) else AgePolicy.from_dict(policy)
        decision = self.party.attest(evidence, policy)
        reply = {"decision": decision.to_dict(), "forwarded": None}
        if not decision.granted:
            reply.update(error="policy-denied", detail="attestation denied")
            return 403, json.dumps(reply).encode(), "application/json"
        reqs = [tokens.decode_request(bytes.fromhex(h)) for h in doc.get("requests", [])]
        if reqs:
            reply["forwarded"] = self.party.forward(decision, reqs).encode().hex()
        return 200, json.dumps(reply).encode(), "application/json"

    # issuer
    def issue(self, body, query):
        sigs = self.party.issue(body)
        return 200, struct.pack(">H", len(sigs)) + b"".join(sigs), OCTET

    def public_key(self, body, query):
        return 200, tokens.encode_public_key(self.party.public_key), OCTET

    def issuer_info(self, body, query):
        p = self.party
        info = {"issuer_id": p.issuer_id, "key_id": p.key_id.hex(), "token_type": p.token_type,
                "batch_max": p.batch_max, "policy": p.policy.label,
                "public_key": tokens.encode_public_key(p.public_key).hex(),
                "exchange": self.exchange_point is not None}
        return 200, json.dumps(info).encode(), "application/json"

    def exchange(self, body, query):
        return 200, self.exchange_point.exchange(body), OCTET

    def exchange_challenge(self, body, query):
        token_type = int(query.get("token_type", self.party.token_type))
        return 200, tokens.encode_challenge(self.exchange_point.challenge(token_type), issuer_hiding=True), OCTET

    # origin
    def challenge(self, body, query):
        c = self.party.make_challenge(query.get("mode", "batch"))
        return 200, tokens.encode_challenge(c, issuer_hiding=True), OCTET

    def redeem(self, body, query):
        r = tokens._Reader(body)
        challenge_bytes = r.take(r.u16())
        token_bytes = r.data[r.pos:]
        decision = self.party.redeem(token_bytes, challenge_bytes)
        if decision.granted:
            return 200, b"granted", "text/plain"
        err = {"error": decision.reason.value, "detail": str(decision)}
        return decision.status, json.dumps(err).encode(), "application/json"

    def spent_fetch(self, body, query):
        since = int(query.get("since", 0))
        recs = self.party.spent_store.records(since)
        return 200, struct.pack(">Q", since + len(recs)) + encode_records(recs), OCTET

    def spent_merge(self, body, query):
        added = self.party.spent_store.merge(decode_records(body))
        return 200, json.dumps({"added": added}).encode(), "application/json"

    def origin_info(self, body, query):
        p = self.party
        info = {"origin_id": p.origin_id, "policy": p.policy.label, "token_type": p.token_type,
                "issuer_name": p.issuer_name, "context_ttl": p.context_ttl}
        return 200, json.dumps(info).encode(), "application/json"

    # registry
    def trusted_list(self, body, query):
        version = int(query["version"]) if "version" in query else None
        try:
            return 200, self.party.export_list(version), "application/json"
        except KeyError as exc:
            raise errors.UnknownIssuerError(str(exc)) from None


class ServiceHandle:
    def __init__(self, server: ThreadingHTTPServer, service: Service, closers=(), sync_loop=None):
        self.server = server
        self.service = service
        self._closers = list(closers)
        self.sync_loop = sync_loop
        self.thread = threading.Thread(target=server.serve_forever, daemon=True, name=f"{service.role}-http")

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> ServiceHandle:
        self.thread.start()
        if self.sync_loop is not None:
            self.sync_loop.start()
        return self

    def stop(self) -> None:
        if self.sync_loop is not None:
            self.sync_loop.stop()
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)
        for close in self._closers:
            close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve_party(party, host: str = "127.0.0.1", port: int = 0, *, entity_id: str = "",
                exchange_point: ExchangePoint | None = None, sync_state: SpentStoreSync | None = None,
                sync_interval: float = 0.0, closers=()) -> ServiceHandle:
    service = Service(party, entity_id=entity_id, exchange_point=exchange_point)
    handler = type("Handler", (_Handler,), {"app": service})
    try:
        server = ThreadingHTTPServer((host, int(port)), handler)
    except OSError as exc:
        raise AgeTokenError(f"cannot bind {host}:{port}: {exc}") from exc
    server.daemon_threads = True
    loop = SyncLoop(sync_state, sync_interval) if sync_state is not None and sync_interval > 0 else None
    return ServiceHandle(server, service, closers, loop).start()


def serve(config: ServiceConfig, *, clock=None, rng=None) -> ServiceHandle:
    """Build the party described by ``config`` and start serving it."""
    config.validate()
    clock = clock or SystemClock()
    policy = AgePolicy.parse(config.policy)
    closers = []
    registry = None
    if config.registry_path:
        try:
            with open(config.registry_path, "rb") as fh:
                registry = TrustedList.import_list(fh.read())
        except OSError as exc:
            raise MalformedError(f"cannot read registry snapshot: {exc}") from None

    exchange_point = None
    sync_state = None
    if config.role == "attester":
        party = Attester(config.entity_id, load_attester_key(config.key_path),
                         batch_allowance=config.batch_allowance, clock=clock)
    elif config.role == "issuer":
        party = Issuer(config.entity_id, load_issuer_key(config.key_path), registry,
                       policy=policy, batch_max=config.batch_max, clock=clock)
        if config.exchange:
            store = _open_store(config.exchange_spent_store_path, closers)
            exchange_point = ExchangePoint(party, store)
    elif config.role == "origin":
        store = _open_store(config.spent_store_path, closers)
        party = Origin(config.entity_id, registry, policy=policy, issuer_name=config.issuer_name,
                       token_type=config.token_type, spent_store=store, clock=clock, rng=rng,
                       context_ttl=config.context_ttl)
        if config.sync_peers:
            sync_state = SpentStoreSync(store, [HttpPeer(u) for u in config.sync_peers])
    else:
        party = registry
    return serve_party(party, config.host, config.port, entity_id=config.entity_id,
                       exchange_point=exchange_point, sync_state=sync_state,
                       sync_interval=config.sync_interval, closers=closers)


def _open_store(path, closers) -> SpentStore:
    if not path:
        return SpentStore()
    store = PersistentSpentStore(path)
    closers.append(store.close)
    return store


# -- HTTP clients -----------------------------------------------------------------

_REASON_ERRORS = {
    "malformed": errors.MalformedError,
    "attester-auth": errors.AttesterAuthError,
    "policy-denied": errors.PolicyDeniedError,
    "allowance-exceeded": errors.AllowanceExceededError,
    "unknown-issuer": errors.UnknownIssuerError,
    "double-spend": errors.DoubleSpendError,
    "context-expired": errors.ContextExpiredError,
    "key-id-mismatch": errors.KeyIdMismatchError,
    "invalid-signature": errors.VerificationError,
}


class ServiceUnreachable(AgeTokenError, OSError):
    reason = "unreachable"


def _http(method: str, url: str, body: bytes | None = None, ctype: str = OCTET, timeout: float = 30.0) -> bytes:
    req = urllib.request.Request(url, data=body, method=method)
    if body is not None:
        req.add_header("Content-Type", ctype)
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.read()
    except urllib.error.HTTPError as exc:
        payload = exc.read()
        try:
            doc = json.loads(payload)
        except ValueError:
            doc = {}
        cls = _REASON_ERRORS.get(doc.get("error"), AgeTokenError)
        err = cls(doc.get("detail") or f"HTTP {exc.code}")
        err.status = exc.code
        err.payload = doc
        raise err from None
    except urllib.error.URLError as exc:
        raise ServiceUnreachable(f"{url}: {exc.reason}") from None


class RemoteAttester:
    def __init__(self, url: str):
        self.url = url.rstrip("/")

    def attest(self, evidence: KycEvidence, policy: AgePolicy, requests: Iterable = ()):
        """Returns (decision, forwarded request bytes or None)."""
        doc = {"evidence": evidence.to_dict(), "policy": policy.to_dict(),
               "requests": [tokens.encode_request(r).hex() for r in requests]}
        try:
            reply = json.loads(_http("POST", f"{self.url}/attest", json.dumps(doc).encode(), "application/json"))
        except errors.PolicyDeniedError as exc:
            decision = AttestationDecision.from_dict(exc.payload["decision"]) if "decision" in exc.payload else None
            exc.decision = decision
            raise
        fwd = bytes.fromhex(reply["forwarded"]) if reply.get("forwarded") else None
        return AttestationDecision.from_dict(reply["decision"]), fwd


class RemoteIssuer:
    def __init__(self, url: str):
        self.url = url.rstrip("/")
        self._info = None

    def info(self) -> dict:
        if self._info is None:
            self._info = json.loads(_http("GET", f"{self.url}/info"))
        return self._info

    @property
    def public_key(self):
        return tokens.decode_public_key(_http("GET", f"{self.url}/public-key"))

    def issue(self, forwarded: bytes) -> list[bytes]:
        body = _http("POST", f"{self.url}/issue", bytes(forwarded))
        (count,) = struct.unpack(">H", body[:2])
        if count == 0:
            return []
        width = (len(body) - 2) // count
        if 2 + width * count != len(body):
            raise MalformedError("issue response has a ragged body")
        return [body[2 + i * width: 2 + (i + 1) * width] for i in range(count)]

    def exchange(self, request: bytes) -> bytes:
        return _http("POST", f"{self.url}/exchange", bytes(request))

    def exchange_challenge(self, token_type: int | None = None) -> bytes:
        q = f"?token_type={token_type}" if token_type is not None else ""
        return _http("GET", f"{self.url}/exchange-challenge{q}")


class RemoteOrigin:
    def __init__(self, url: str):
        self.url = url.rstrip("/")

    def challenge(self, mode: str = "batch") -> bytes:
        return _http("GET", f"{self.url}/challenge?mode={mode}")

    def redeem(self, token: bytes, challenge_bytes: bytes) -> RedeemDecision:
        body = struct.pack(">H", len(challenge_bytes)) + challenge_bytes + bytes(token)
        try:
            _http("POST", f"{self.url}/redeem", body)
        except ServiceUnreachable:
            raise
        except AgeTokenError as exc:
            reason = getattr(exc, "payload", {}).get("error", "malformed")
            return RedeemDecision(RedeemReason(reason))
        return RedeemDecision(RedeemReason.GRANTED)

    def info(self) -> dict:
        return json.loads(_http("GET", f"{self.url}/info"))


def fetch_trusted_list(url: str, version: int | None = None) -> TrustedList:
    q = f"?version={version}" if version is not None else ""
    return TrustedList.import_list(_http("GET", f"{url.rstrip('/')}/trusted-list{q}"))
