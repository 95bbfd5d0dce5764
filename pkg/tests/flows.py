"""Honest-client helpers shared by several test modules."""

import datetime as dt
import random

from agetoken import tokens
from agetoken.actors import Client, KycEvidence
from agetoken.policy import AgePolicy

ADULT = KycEvidence(dt.date(1990, 1, 1), "declared", "alice")


def obtain(dep, count=10, *, issuer=0, challenge=None, client=None, evidence=ADULT, policy=AgePolicy(18), seed=None):
    """Attest, issue and finalize; returns (client, challenge bytes, tokens)."""
    client = client or Client(random.Random(seed if seed is not None else dep.rng.getrandbits(64)))
    iss = dep.issuers[issuer]
    if challenge is None:
        challenge = tokens.encode_challenge(dep.origin.batch_challenge, issuer_hiding=True)
    pending, reqs = client.begin_issuance(challenge, iss.public_key, count)
    decision = dep.attester.attest(evidence, policy)
    fwd = dep.attester.forward(decision, reqs)
    toks = client.finalize_batch(pending, iss.issue(fwd.encode()), iss.public_key)
    return client, challenge, toks
