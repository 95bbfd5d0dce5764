import random

import pytest

from agetoken import tokens
from agetoken.actors import Client, Issuer
from agetoken.errors import DoubleSpendError, MalformedError, PolicyDeniedError, UnknownIssuerError, VerificationError
from agetoken.exchange import ExchangePoint, ExchangeRequest
from agetoken.policy import AgePolicy
from agetoken.registry import Status
from conftest import Deployment
from flows import obtain


def exchange_into(dep, point, client, old_token, target_challenge):
    """Spend ``old_token`` (bound to the point's challenge) for one token under the point's issuer."""
    xch = tokens.encode_challenge(point.challenge(old_token.token_type), issuer_hiding=True)
    pk = point.issuer.public_key
    pending, reqs = client.begin_issuance(target_challenge, pk, 1)
    sig = point.exchange(ExchangeRequest(old_token, reqs[0], tokens.sha256(xch)).encode())
    return client.finalize_batch(pending, [sig], pk)[0]


def source_token(dep, point, issuer=0, client=None):
    xch = tokens.encode_challenge(point.challenge(dep.issuers[issuer].token_type), issuer_hiding=True)
    client, _, toks = obtain(dep, 1, issuer=issuer, challenge=xch, client=client)
    client.redeem(xch)
    return client, toks[0]


@pytest.fixture
def hiding(toy_keys):
    return Deployment(toy_keys, origin_name="")


def test_request_codec_round_trip():
    rng = random.Random(0)
    t = tokens.Token(tokens.TOKEN_TYPE_TOY, rng.randbytes(32), rng.randbytes(32), rng.randbytes(32), rng.randbytes(64))
    r = tokens.TokenRequest(tokens.TOKEN_TYPE_TOY, 7, rng.randbytes(64))
    req = ExchangeRequest(t, r, rng.randbytes(32))
    assert ExchangeRequest.decode(req.encode()) == req
    with pytest.raises(MalformedError):
        ExchangeRequest.decode(req.encode() + b"\x00")


def test_a_to_b_substitutes_key_id(hiding):
    point = ExchangePoint(hiding.issuers[1])
    client, old = source_token(hiding, point)
    challenge = tokens.encode_challenge(hiding.origin.batch_challenge, issuer_hiding=True)
    new = exchange_into(hiding, point, client, old, challenge)
    assert new.token_key_id == hiding.issuers[1].key_id != old.token_key_id
    assert hiding.origin.redeem(new, challenge).granted


def test_double_exchange_rejected(hiding):
    point = ExchangePoint(hiding.issuers[1])
    client, old = source_token(hiding, point)
    challenge = tokens.encode_challenge(hiding.origin.batch_challenge, issuer_hiding=True)
    exchange_into(hiding, point, client, old, challenge)
    with pytest.raises(DoubleSpendError):
        exchange_into(hiding, point, client, old, challenge)
    assert len(point.spent_store) == 1


def test_self_mixing_allowed(hiding):
    point = ExchangePoint(hiding.issuers[0])
    client, old = source_token(hiding, point, issuer=0)
    challenge = tokens.encode_challenge(hiding.origin.batch_challenge, issuer_hiding=True)
    assert exchange_into(hiding, point, client, old, challenge).token_key_id == old.token_key_id


def test_invalid_and_unknown_sources(hiding, toy_keys):
    point = ExchangePoint(hiding.issuers[1])
    client, old = source_token(hiding, point)
    challenge = tokens.encode_challenge(hiding.origin.batch_challenge, issuer_hiding=True)
    forged = tokens.Token(old.token_type, old.nonce, old.challenge_digest, old.token_key_id,
                          bytes(len(old.authenticator)))
    with pytest.raises(VerificationError):
        exchange_into(hiding, point, client, forged, challenge)
    # token bound to a different challenge
    _, _, plain = obtain(hiding, 1, challenge=challenge)
    with pytest.raises(MalformedError):
        exchange_into(hiding, point, client, plain[0], challenge)
    hiding.registry.set_status("issuer-0", Status.REVOKED)
    with pytest.raises(UnknownIssuerError):
        exchange_into(hiding, point, client, old, challenge)


def test_policy_laundering_blocked(toy_keys):
    dep = Deployment(toy_keys[:1], origin_name="")
    teen = Issuer("teen", toy_keys[1], dep.registry, policy=AgePolicy(13), clock=dep.clock)
    dep.registry.register(teen.registry_entry())
    dep.issuers.append(teen)
    point = ExchangePoint(dep.issuers[0])
    xch = tokens.encode_challenge(point.challenge(teen.token_type), issuer_hiding=True)
    client, _, toks = obtain(dep, 1, issuer=1, challenge=xch, policy=AgePolicy(13))
    challenge = tokens.encode_challenge(dep.origin.batch_challenge, issuer_hiding=True)
    with pytest.raises(PolicyDeniedError):
        exchange_into(dep, point, client, toks[0], challenge)


def test_chain_a_b_c_conserves(hiding):
    b, c = ExchangePoint(hiding.issuers[1]), ExchangePoint(hiding.issuers[2])
    challenge = tokens.encode_challenge(hiding.origin.batch_challenge, issuer_hiding=True)
    client, old = source_token(hiding, b)
    xch_c = tokens.encode_challenge(c.challenge(), issuer_hiding=True)
    mid = exchange_into(hiding, b, client, old, xch_c)
    client.redeem(xch_c)
    final = exchange_into(hiding, c, client, mid, challenge)
    assert final.token_key_id == hiding.issuers[2].key_id
    assert len(b.spent_store) == 1 and len(c.spent_store) == 1
    with pytest.raises(DoubleSpendError):
        exchange_into(hiding, c, client, mid, challenge)
    assert hiding.origin.redeem(client.redeem(challenge), challenge).granted


def test_conservation_many(hiding):
    point = ExchangePoint(hiding.issuers[1])
    challenge = tokens.encode_challenge(hiding.origin.batch_challenge, issuer_hiding=True)
    xch = tokens.encode_challenge(point.challenge(), issuer_hiding=True)
    client, _, olds = obtain(hiding, 10, challenge=xch)
    issued = 0
    for old in olds + olds:
        try:
            exchange_into(hiding, point, client, old, challenge)
            issued += 1
        except DoubleSpendError:
            pass
    assert issued == 10 == len(point.spent_store)


def test_origin_transcript_never_sees_source_key(hiding):
    point = ExchangePoint(hiding.issuers[2])
    challenge = tokens.encode_challenge(hiding.origin.batch_challenge, issuer_hiding=True)
    sources = {hiding.issuers[0].key_id, hiding.issuers[1].key_id}
    transcript = bytearray()
    rng = random.Random(11)
    for _ in range(1000):
        client = Client(random.Random(rng.getrandbits(64)))
        _, old = source_token(hiding, point, issuer=rng.randrange(2), client=client)
        new = exchange_into(hiding, point, client, old, challenge)
        raw = tokens.encode_token(new)
        assert hiding.origin.redeem(raw, challenge).granted
        transcript += challenge + raw
    assert all(bytes(transcript).count(k) == 0 for k in sources)
