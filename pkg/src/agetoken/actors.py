"""The four protocol parties: client, attester, issuer and origin.

Issuance::

    origin  --TokenChallenge-->  client
    client  --KycEvidence, [TokenRequest]-->  attester
    attester --ForwardedRequest (signed, no evidence)-->  issuer
    issuer  --[blind signature]-->  client  (finalizes tokens)

Redemption::

    client --Token + challenge bytes--> origin  (verify, then spend)

Issuer and origin methods never take a ``KycEvidence``; that type stops at
the attester.
"""

from __future__ import annotations

import datetime as dt
import enum
import random
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import blindsig, tokens
from .blindsig import BlindingState, IssuerKeyPair, IssuerPublicKey
from .clock import SystemClock
from .errors import (
    AllowanceExceededError,
    AttesterAuthError,
    IssuerMisbehaviorError,
    KeyIdMismatchError,
    MalformedError,
    PolicyDeniedError,
    PoolExhaustedError,
)
from .policy import AgePolicy, Assurance
from .registry import KeyRecord, Resolved, Role, TrustedList, TrustedListEntry, make_key_record
from .spent import SpentStore, SpentTokenRecord
from .tokens import Token, TokenChallenge, TokenRequest

DEFAULT_BATCH_ALLOWANCE = 10
DEFAULT_BATCH_MAX = 100
DEFAULT_CONTEXT_TTL = 120.0

Lookup = Callable[[bytes, float], "Resolved | None"]


class EvidenceKind(str, enum.Enum):
    DECLARED = "declared"
    DOCUMENT_MOCK = "document_mock"
    DEVICE_ATTESTED_MOCK = "device_attested_mock"


ASSURANCE_OF = {
    EvidenceKind.DECLARED: Assurance.LOW,
    EvidenceKind.DOCUMENT_MOCK: Assurance.SUBSTANTIAL,
    EvidenceKind.DEVICE_ATTESTED_MOCK: Assurance.HIGH,
}


@dataclass(frozen=True)
class KycEvidence:
    date_of_birth: dt.date
    evidence_kind: EvidenceKind = EvidenceKind.DECLARED
    subject_handle: str = ""

    def __post_init__(self):
        dob = self.date_of_birth
        if isinstance(dob, str):
            try:
                dob = dt.date.fromisoformat(dob)
            except ValueError:
                raise MalformedError(f"malformed date of birth {self.date_of_birth!r}") from None
        if not isinstance(dob, dt.date):
            raise MalformedError("date_of_birth must be a date")
        object.__setattr__(self, "date_of_birth", dob)
        object.__setattr__(self, "evidence_kind", EvidenceKind(self.evidence_kind))

    @classmethod
    def from_dict(cls, d: dict) -> KycEvidence:
        try:
            return cls(d["date_of_birth"], d.get("evidence_kind", "declared"), d.get("subject_handle", ""))
        except (KeyError, ValueError) as exc:
            raise MalformedError(f"bad evidence: {exc}") from None

    def to_dict(self) -> dict:
        return {"date_of_birth": self.date_of_birth.isoformat(),
                "evidence_kind": self.evidence_kind.value,
                "subject_handle": self.subject_handle}


@dataclass(frozen=True)
class AttestationDecision:
    granted: bool
    policy: AgePolicy
    batch_allowance: int
    attester_id: str
    decision_time: dt.datetime

    def __post_init__(self):
        if self.batch_allowance < 0 or (not self.granted and self.batch_allowance != 0):
            raise MalformedError("a denied decision carries no allowance")

    def to_dict(self) -> dict:
        return {"granted": self.granted, "policy": self.policy.to_dict(),
                "batch_allowance": self.batch_allowance, "attester_id": self.attester_id,
                "decision_time": self.decision_time.isoformat()}

    @classmethod
    def from_dict(cls, d: dict) -> AttestationDecision:
        return cls(bool(d["granted"]), AgePolicy.from_dict(d["policy"]), int(d["batch_allowance"]),
                   d["attester_id"], dt.datetime.fromisoformat(d["decision_time"]))


def age_on(dob: dt.date, today: dt.date) -> int:
    """Whole calendar years; a Feb-29 birthday falls on Mar-1 in common years."""
    years = today.year - dob.year
    try:
        birthday = dob.replace(year=today.year)
    except ValueError:
        birthday = dt.date(today.year, 3, 1)
    if today < birthday:
        years -= 1
    return years


def _as_datetime(t) -> dt.datetime:
    if isinstance(t, dt.datetime):
        return t if t.tzinfo else t.replace(tzinfo=dt.timezone.utc)
    if isinstance(t, dt.date):
        return dt.datetime(t.year, t.month, t.day, tzinfo=dt.timezone.utc)
    return dt.datetime.fromtimestamp(float(t), dt.timezone.utc)


# -- forwarded request ---------------------------------------------------------

_FWD_LABEL = b"agetoken forwarded-request v1\x00"


@dataclass(frozen=True)
class ForwardedRequest:
    """Attester-signed batch.  Layout::

        len(2) attester_id | min_age(1) | assurance(1) | nk(2) | count(2)
        | count * TokenRequest | ed25519 signature(64)
    """

    attester_id: str
    policy: AgePolicy
    requests: tuple[TokenRequest, ...]
    nk: int
    signature: bytes = b""

    def signed_payload(self) -> bytes:
        name = self.attester_id.encode("utf-8")
        head = struct.pack(">H", len(name)) + name + struct.pack(
            ">BBHH", self.policy.minimum_age_years, int(self.policy.required_assurance), self.nk, len(self.requests))
        return head + b"".join(tokens.encode_request(r, self.nk) for r in self.requests)

    def encode(self) -> bytes:
        if len(self.signature) != 64:
            raise MalformedError("forwarded request is unsigned")
        return self.signed_payload() + self.signature

    @classmethod
    def decode(cls, data: bytes) -> ForwardedRequest:
        r = tokens._Reader(data)
        attester_id = r.text(r.u16())
        min_age, assurance = r.u8(), r.u8()
        nk, count = r.u16(), r.u16()
        try:
            policy = AgePolicy(min_age, Assurance(assurance))
        except ValueError:
            raise MalformedError("bad policy in forwarded request") from None
        reqs = tuple(tokens.decode_request(r.take(3 + nk), nk) for _ in range(count))
        sig = r.take(64)
        r.done()
        return cls(attester_id, policy, reqs, nk, sig)


# -- attester --------------------------------------------------------------------


class Attester:
    def __init__(self, attester_id: str, signing_key: Ed25519PrivateKey | bytes | None = None, *,
                 batch_allowance: int = DEFAULT_BATCH_ALLOWANCE, clock=None):
        if isinstance(signing_key, (bytes, bytearray)):
            signing_key = Ed25519PrivateKey.from_private_bytes(bytes(signing_key))
        self.attester_id = attester_id
        self.signing_key = signing_key or Ed25519PrivateKey.generate()
        self.batch_allowance = batch_allowance
        self.clock = clock or SystemClock()

    @property
    def public_key_bytes(self) -> bytes:
        return self.signing_key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    def registry_entry(self, policies=("18", "13"), valid_from: int = 0, valid_until: int = 2**40,
                       assurance: str = "high") -> TrustedListEntry:
        labels = ",".join(f"{p}+/{assurance}" for p in policies)
        return TrustedListEntry(self.attester_id, Role.ATTESTER,
                                keys=(make_key_record(self.public_key_bytes, valid_from, valid_until),),
                                metadata={"policies": labels})

    def attest(self, evidence: KycEvidence, policy: AgePolicy, now=None) -> AttestationDecision:
        when = _as_datetime(self.clock() if now is None else now)
        age = age_on(evidence.date_of_birth, when.date())
        granted = (age >= policy.minimum_age_years
                   and ASSURANCE_OF[evidence.evidence_kind] >= policy.required_assurance)
        return AttestationDecision(granted, policy, self.batch_allowance if granted else 0,
                                   self.attester_id, when)

    def forward(self, decision: AttestationDecision, batch_request) -> ForwardedRequest:
        if not decision.granted:
            raise PolicyDeniedError("attestation was not granted")
        if decision.attester_id != self.attester_id:
            raise AttesterAuthError("decision issued by another attester")
        batch = tuple(batch_request)
        if not batch:
            raise MalformedError("empty batch")
        if len(batch) > decision.batch_allowance:
            raise AllowanceExceededError(f"{len(batch)} requests exceed allowance {decision.batch_allowance}")
        nk = len(batch[0].blinded_message)
        unsigned = ForwardedRequest(self.attester_id, decision.policy, batch, nk)
        sig = self.signing_key.sign(_FWD_LABEL + unsigned.signed_payload())
        return ForwardedRequest(self.attester_id, decision.policy, batch, nk, sig)


def verify_forwarded(fwd: ForwardedRequest, registry: TrustedList, at: float) -> TrustedListEntry:
    entry = registry.snapshot().get(fwd.attester_id)
    if entry is None or entry.role is not Role.ATTESTER or entry.status.value != "active":
        raise AttesterAuthError(f"attester {fwd.attester_id!r} is not trusted")
    message = _FWD_LABEL + fwd.signed_payload()
    for k in entry.keys:
        if not k.valid_at(at):
            continue
        try:
            Ed25519PublicKey.from_public_bytes(k.public_key).verify(fwd.signature, message)
            return entry
        except (InvalidSignature, ValueError):
            continue
    raise AttesterAuthError("attester signature invalid")


# -- issuer ------------------------------------------------------------------------


class Issuer:
    def __init__(self, issuer_id: str, keypair: IssuerKeyPair, registry: TrustedList, *,
                 policy: AgePolicy | None = None, batch_max: int = DEFAULT_BATCH_MAX, clock=None):
        self.issuer_id = issuer_id
        self.keypair = keypair
        self.registry = registry
        self.policy = policy or AgePolicy(18)
        self.batch_max = batch_max
        self.clock = clock or SystemClock()
        self.public_key = keypair.public_key
        self.key_id = tokens.derive_key_id(self.public_key)
        self.token_type = tokens.token_type_for(self.public_key)

    @property
    def truncated_key_id(self) -> int:
        return self.key_id[-1]

    def registry_entry(self, valid_from: int = 0, valid_until: int = 2**40) -> TrustedListEntry:
        der = tokens.encode_public_key(self.public_key)
        return TrustedListEntry(self.issuer_id, Role.ISSUER,
                                keys=(KeyRecord(self.key_id, der, valid_from, valid_until),),
                                metadata={"policy": self.policy.label, "batch_max": str(self.batch_max)})

    def check_request(self, req: TokenRequest) -> None:
        if req.token_type != self.token_type:
            raise MalformedError("token type does not match issuer key")
        if req.truncated_key_id != self.truncated_key_id:
            raise KeyIdMismatchError("request addressed to a different issuer key")

    def issue(self, fwd: ForwardedRequest | bytes) -> list[bytes]:
        if isinstance(fwd, (bytes, bytearray)):
            fwd = ForwardedRequest.decode(fwd)
        attester = verify_forwarded(fwd, self.registry, self.clock())
        if not attester.attests(fwd.policy):
            raise AttesterAuthError(f"attester not trusted for {fwd.policy.label}")
        if not fwd.policy.satisfies(self.policy):
            raise PolicyDeniedError(f"attested {fwd.policy.label} does not meet {self.policy.label}")
        if len(fwd.requests) > self.batch_max:
            raise AllowanceExceededError("batch exceeds issuer maximum")
        if fwd.nk != self.keypair.modulus_len:
            raise MalformedError("request width does not match issuer key")
        for req in fwd.requests:
            self.check_request(req)
        return [blindsig.blind_sign(self.keypair, req.blinded_message) for req in fwd.requests]


# -- client --------------------------------------------------------------------------


@dataclass
class PendingToken:
    nonce: bytes
    state: BlindingState
    challenge_digest: bytes
    token_type: int
    token_key_id: bytes


@dataclass
class ClientTokenStore:
    pending: list[PendingToken] = field(default_factory=list)
    ready: list[Token] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def nonces(self) -> set[bytes]:
        return {p.nonce for p in self.pending} | {t.nonce for t in self.ready}

    def take(self, digest: bytes, key_id: bytes | None = None) -> Token:
        with self._lock:
            for i, t in enumerate(self.ready):
                if t.challenge_digest == digest and (key_id is None or t.token_key_id == key_id):
                    return self.ready.pop(i)
        raise PoolExhaustedError("no usable token left; attest again")

    def count(self, digest: bytes | None = None) -> int:
        with self._lock:
            return sum(1 for t in self.ready if digest is None or t.challenge_digest == digest)


class Client:
    def __init__(self, rng=None, store: ClientTokenStore | None = None):
        self.rng = rng or random.SystemRandom()
        self.store = store or ClientTokenStore()

    def begin_issuance(self, challenge: TokenChallenge | bytes, pk: IssuerPublicKey, count: int = 1,
                       *, batch_max: int | None = None):
        if isinstance(challenge, (bytes, bytearray)):
            challenge = tokens.decode_challenge(challenge, issuer_hiding=True)
        if count < 1:
            raise MalformedError("count must be >= 1")
        if challenge.bound and count != 1:
            raise MalformedError("a context-bound challenge admits exactly one token")
        if batch_max is not None and count > batch_max:
            raise AllowanceExceededError(f"count {count} exceeds issuer batch maximum {batch_max}")
        token_type = tokens.token_type_for(pk)
        if challenge.token_type != token_type:
            raise MalformedError("challenge token type does not match issuer key")
        digest = tokens.challenge_digest(challenge)
        key_id = tokens.derive_key_id(pk)
        taken = self.store.nonces()
        pending, requests = [], []
        for _ in range(count):
            nonce = self.rng.randbytes(tokens.NONCE_LEN)
            while nonce in taken:
                nonce = self.rng.randbytes(tokens.NONCE_LEN)
            taken.add(nonce)
            msg = tokens.token_input(Token(token_type, nonce, digest, key_id))
            blinded, state = self._blind(pk, msg)
            pending.append(PendingToken(nonce, state, digest, token_type, key_id))
            requests.append(TokenRequest(token_type, key_id[-1], blinded))
        self.store.pending.extend(pending)
        return pending, requests

    def _blind(self, pk: IssuerPublicKey, msg: bytes):
        return blindsig.blind(pk, msg, self.rng)

    def finalize_batch(self, pending: list[PendingToken], responses: list[bytes], pk: IssuerPublicKey) -> list[Token]:
        """All-or-nothing: one bad blind signature discards the whole batch."""
        try:
            if len(responses) != len(pending):
                raise IssuerMisbehaviorError(f"expected {len(pending)} signatures, got {len(responses)}")
            out = []
            for p, blind_sig in zip(pending, responses):
                try:
                    auth = blindsig.finalize(pk, p.state.prepared_message, blind_sig, p.state)
                except MalformedError as exc:
                    raise IssuerMisbehaviorError(str(exc)) from None
                out.append(Token(p.token_type, p.nonce, p.challenge_digest, p.token_key_id, auth))
        finally:
            ids = {id(p) for p in pending}
            self.store.pending = [p for p in self.store.pending if id(p) not in ids]
        self.store.ready.extend(out)
        return out

    def accept_token(self, token: Token | bytes) -> Token:
        """Add a finished token obtained elsewhere (e.g. handed over by another client)."""
        if isinstance(token, (bytes, bytearray)):
            token = tokens.decode_token(token)
        with self.store._lock:
            if any(t.nonce == token.nonce and t.token_key_id == token.token_key_id for t in self.store.ready):
                raise MalformedError("token already held")
            self.store.ready.append(token)
        return token

    def redeem(self, challenge: TokenChallenge | bytes) -> Token:
        if isinstance(challenge, TokenChallenge):
            challenge = tokens.encode_challenge(challenge, issuer_hiding=True)
        return self.store.take(tokens.sha256(challenge))

    def balance(self, challenge: TokenChallenge | bytes | None = None) -> int:
        if challenge is None:
            return self.store.count()
        if isinstance(challenge, TokenChallenge):
            challenge = tokens.encode_challenge(challenge, issuer_hiding=True)
        return self.store.count(tokens.sha256(challenge))


# -- origin ------------------------------------------------------------------------


class RedeemReason(str, enum.Enum):
    GRANTED = "granted"
    MALFORMED = "malformed"
    CHALLENGE_MISMATCH = "challenge-mismatch"
    UNKNOWN_CONTEXT = "unknown-context"
    CONTEXT_EXPIRED = "context-expired"
    UNKNOWN_ISSUER = "unknown-issuer"
    ISSUER_MISMATCH = "issuer-mismatch"
    POLICY_MISMATCH = "policy-mismatch"
    INVALID_SIGNATURE = "invalid-signature"
    DOUBLE_SPEND = "double-spend"


REASON_STATUS = {
    RedeemReason.GRANTED: 200,
    RedeemReason.MALFORMED: 400,
    RedeemReason.CHALLENGE_MISMATCH: 400,
    RedeemReason.UNKNOWN_CONTEXT: 400,
    RedeemReason.INVALID_SIGNATURE: 400,
    RedeemReason.ISSUER_MISMATCH: 400,
    RedeemReason.POLICY_MISMATCH: 403,
    RedeemReason.UNKNOWN_ISSUER: 404,
    RedeemReason.DOUBLE_SPEND: 409,
    RedeemReason.CONTEXT_EXPIRED: 410,
}


@dataclass(frozen=True)
class RedeemDecision:
    reason: RedeemReason

    @property
    def granted(self) -> bool:
        return self.reason is RedeemReason.GRANTED

    @property
    def status(self) -> int:
        return REASON_STATUS[self.reason]

    def __str__(self):
        return self.reason.value if self.granted else f"rejected({self.reason.value})"


def check_token(token: Token, challenge: TokenChallenge, lookup: Lookup, now: float,
                required: AgePolicy | None = None) -> tuple[RedeemReason | None, Resolved | None]:
    """Checks shared by origins and exchange points, minus the spend itself."""
    resolved = lookup(token.token_key_id, now)
    if resolved is None or resolved.entry.role is not Role.ISSUER:
        return RedeemReason.UNKNOWN_ISSUER, None
    if challenge.issuer_name and challenge.issuer_name != resolved.entity_id:
        return RedeemReason.ISSUER_MISMATCH, resolved
    issued = resolved.entry.policy()
    if required is not None and (issued is None or not issued.satisfies(required)):
        return RedeemReason.POLICY_MISMATCH, resolved
    try:
        pk = tokens.decode_public_key(resolved.public_key)
        if tokens.width_for(token.token_type) != pk.modulus_len:
            return RedeemReason.INVALID_SIGNATURE, resolved
    except MalformedError:
        return RedeemReason.INVALID_SIGNATURE, resolved
    if not blindsig.verify(pk, tokens.token_input(token), token.authenticator):
        return RedeemReason.INVALID_SIGNATURE, resolved
    return None, resolved


class Origin:
    def __init__(self, origin_id: str, lookup: Lookup | TrustedList, *, policy: AgePolicy | None = None,
                 issuer_name: str = "", token_type: int = tokens.TOKEN_TYPE_BLIND_RSA,
                 spent_store: SpentStore | None = None, clock=None, rng=None,
                 context_ttl: float = DEFAULT_CONTEXT_TTL):
        self.origin_id = origin_id
        self.lookup = lookup.resolve_key if isinstance(lookup, TrustedList) else lookup
        self.policy = policy or AgePolicy(18)
        self.issuer_name = issuer_name
        self.token_type = token_type
        self.spent_store = spent_store if spent_store is not None else SpentStore()
        self.clock = clock or SystemClock()
        self.rng = rng or random.SystemRandom()
        self.context_ttl = context_ttl
        self._contexts: dict[bytes, float] = {}
        self._ctx_lock = threading.Lock()

    @property
    def batch_challenge(self) -> TokenChallenge:
        """Standing challenge for batch tokens; empty origin_info makes it cross-origin."""
        return TokenChallenge(self.token_type, self.issuer_name, b"", "")

    def make_challenge(self, mode: str = "batch") -> TokenChallenge:
        if mode == "batch":
            return self.batch_challenge
        if mode != "bound":
            raise MalformedError(f"unknown challenge mode {mode!r}")
        context = self.rng.randbytes(tokens.CONTEXT_LEN)
        with self._ctx_lock:
            now = self.clock()
            self._contexts = {c: exp for c, exp in self._contexts.items() if exp > now - self.context_ttl}
            self._contexts[context] = now + self.context_ttl
        return TokenChallenge(self.token_type, self.issuer_name, context, self.origin_id)

    def redeem(self, token: Token | bytes, challenge_bytes: bytes) -> RedeemDecision:
        now = self.clock()
        try:
            if isinstance(token, (bytes, bytearray)):
                token = tokens.decode_token(token)
            challenge = tokens.decode_challenge(challenge_bytes, issuer_hiding=True)
        except MalformedError:
            return RedeemDecision(RedeemReason.MALFORMED)
        if token.challenge_digest != tokens.sha256(challenge_bytes):
            return RedeemDecision(RedeemReason.CHALLENGE_MISMATCH)
        if challenge.bound:
            if challenge.origin_info != self.origin_id:
                return RedeemDecision(RedeemReason.CHALLENGE_MISMATCH)
            with self._ctx_lock:
                expiry = self._contexts.get(challenge.redemption_context)
            if expiry is None:
                return RedeemDecision(RedeemReason.UNKNOWN_CONTEXT)
            if now > expiry:
                return RedeemDecision(RedeemReason.CONTEXT_EXPIRED)
        elif challenge.origin_info and self.origin_id not in challenge.origin_info.split(","):
            return RedeemDecision(RedeemReason.CHALLENGE_MISMATCH)
        reason, _ = check_token(token, challenge, self.lookup, now, self.policy)
        if reason is not None:
            return RedeemDecision(reason)
        record = SpentTokenRecord(token.nonce, token.token_key_id, self.origin_id, now)
        if not self.spent_store.check_and_insert(record):
            return RedeemDecision(RedeemReason.DOUBLE_SPEND)
        return RedeemDecision(RedeemReason.GRANTED)
