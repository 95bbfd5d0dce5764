"""Issuer-hiding token exchange.

An exchange point is an issuer that accepts a valid token from any trusted
issuer (itself included) and blind-signs one fresh request under its own
key.  The old token is spent at the exchange point the way an origin would
spend it, so each token converts exactly once.

ExchangeRequest layout::

    len(2) spent_token | len(2) new_request | exchange_challenge_digest(32)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from . import blindsig, tokens
from .actors import Issuer, Lookup, RedeemReason, check_token
from .errors import (
    DoubleSpendError,
    MalformedError,
    PolicyDeniedError,
    UnknownIssuerError,
    VerificationError,
)
from .registry import TrustedList
from .spent import SpentStore, SpentTokenRecord
from .tokens import Token, TokenChallenge, TokenRequest


@dataclass(frozen=True)
class ExchangeRequest:
    spent_token: Token
    new_request: TokenRequest
    exchange_challenge_digest: bytes

    def encode(self) -> bytes:
        if len(self.exchange_challenge_digest) != tokens.DIGEST_LEN:
            raise MalformedError("exchange challenge digest must be 32 bytes")
        old = tokens.encode_token(self.spent_token)
        new = tokens.encode_request(self.new_request)
        return struct.pack(">H", len(old)) + old + struct.pack(">H", len(new)) + new + self.exchange_challenge_digest

    @classmethod
    def decode(cls, data: bytes) -> ExchangeRequest:
        r = tokens._Reader(data)
        old = tokens.decode_token(r.take(r.u16()))
        new = tokens.decode_request(r.take(r.u16()))
        digest = r.take(tokens.DIGEST_LEN)
        r.done()
        return cls(old, new, digest)


def exchange_challenge_for(issuer: Issuer, token_type: int | None = None) -> TokenChallenge:
    """Challenge a client redeems its old token against at ``issuer``.

    The issuer name is left empty: any trusted source issuer is accepted.
    """
    return TokenChallenge(token_type if token_type is not None else issuer.token_type, "", b"",
                          f"exchange:{issuer.issuer_id}")


def exchange(req: ExchangeRequest, issuer: Issuer, lookup: Lookup | TrustedList,
             exchange_spent_store: SpentStore, *, now: float | None = None,
             challenge: TokenChallenge | None = None) -> bytes:
    """Consume ``req.spent_token`` and return a blind signature over ``req.new_request``."""
    if isinstance(lookup, TrustedList):
        lookup = lookup.resolve_key
    now = issuer.clock() if now is None else now
    old = req.spent_token
    challenge = challenge or exchange_challenge_for(issuer, old.token_type)
    expected = tokens.challenge_digest(challenge)
    if req.exchange_challenge_digest != expected or old.challenge_digest != expected:
        raise MalformedError("old token is not bound to this exchange point")

    reason, resolved = check_token(old, challenge, lookup, now, issuer.policy)
    if reason is RedeemReason.UNKNOWN_ISSUER:
        raise UnknownIssuerError("source issuer is not trusted")
    if reason is RedeemReason.POLICY_MISMATCH:
        raise PolicyDeniedError("source token policy does not meet the exchange issuer policy")
    if reason is not None:
        raise VerificationError(f"old token rejected: {reason.value}")

    issuer.check_request(req.new_request)
    record = SpentTokenRecord(old.nonce, old.token_key_id, f"exchange:{issuer.issuer_id}", now)
    if not exchange_spent_store.check_and_insert(record):
        raise DoubleSpendError("token already exchanged")
    return blindsig.blind_sign(issuer.keypair, req.new_request.blinded_message)


class ExchangePoint:
    """An issuer plus the spent store that makes exchange one-for-one."""

    def __init__(self, issuer: Issuer, spent_store: SpentStore | None = None):
        self.issuer = issuer
        self.spent_store = spent_store if spent_store is not None else SpentStore()

    def challenge(self, token_type: int | None = None) -> TokenChallenge:
        return exchange_challenge_for(self.issuer, token_type)

    def exchange(self, req: ExchangeRequest | bytes) -> bytes:
        if isinstance(req, (bytes, bytearray)):
            req = ExchangeRequest.decode(req)
        return exchange(req, self.issuer, self.issuer.registry, self.spent_store,
                        challenge=self.challenge(req.spent_token.token_type))
