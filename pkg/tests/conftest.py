import random

import pytest

from agetoken import blindsig
from agetoken.actors import Attester, Issuer, Origin
from agetoken.clock import VirtualClock
from agetoken.policy import AgePolicy
from agetoken.registry import TrustedList


@pytest.fixture(scope="session")
def toy_keys():
    rng = random.Random(1234)
    return [blindsig.generate_keypair(512, rng, toy=True) for _ in range(3)]


@pytest.fixture(scope="session")
def rsa2048():
    return blindsig.generate_keypair(2048)


class Deployment:
    """One attester, a few toy issuers, one origin, all on a virtual clock."""

    def __init__(self, keys, *, origin_name=None, seed=0, batch_allowance=10):
        self.rng = random.Random(seed)
        self.clock = VirtualClock()
        self.registry = TrustedList()
        self.attester = Attester("attester-0", self.rng.randbytes(32), batch_allowance=batch_allowance,
                                 clock=self.clock)
        self.registry.register(self.attester.registry_entry())
        self.issuers = []
        for i, kp in enumerate(keys):
            iss = Issuer(f"issuer-{i}", kp, self.registry, policy=AgePolicy(18), clock=self.clock)
            self.registry.register(iss.registry_entry())
            self.issuers.append(iss)
        name = self.issuers[0].issuer_id if origin_name is None else origin_name
        self.origin = self.make_origin("origin-0", issuer_name=name)

    def make_origin(self, origin_id, **kw):
        kw.setdefault("issuer_name", self.issuers[0].issuer_id)
        kw.setdefault("policy", AgePolicy(18))
        return Origin(origin_id, self.registry, token_type=self.issuers[0].token_type,
                      clock=self.clock, rng=random.Random(self.rng.getrandbits(64)), **kw)


@pytest.fixture
def deployment(toy_keys):
    return Deployment(toy_keys)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
