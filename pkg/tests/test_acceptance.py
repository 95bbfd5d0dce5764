"""Acceptance criteria, one test each; every test records a PASS/FAIL line."""

import datetime as dt
import random
import threading
import time

import pytest

from agetoken import blindsig, simharness, tokens
from agetoken.actors import Client, EvidenceKind, KycEvidence, Origin, RedeemReason
from agetoken.errors import PoolExhaustedError
from agetoken.policy import AgePolicy
from agetoken.spent import PersistentSpentStore
from conftest import ACCEPTANCE_LINES, Deployment
from flows import obtain
from test_actors import anniversary, evidence_fragments
from test_tokens import random_challenge, random_token
from vectors import load_vectors, run_vector


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_01_blind_signature_vectors():
    start = time.perf_counter()
    vectors = load_vectors()
    results = [all(run_vector(v).values()) for v in vectors]
    elapsed = time.perf_counter() - start
    record(1, "blind-signature vectors", all(results) and len(results) > 0 and elapsed < 10,
           f"{sum(results)}/{len(results)} exact, {elapsed:.2f}s")


def run_flows(keypair, n_flows):
    dep = Deployment([keypair], seed=7)
    grants = rejects = exhausted = 0
    for _ in range(n_flows):
        client, challenge, _ = obtain(dep, 10)
        for _ in range(10):
            if dep.origin.redeem(client.redeem(challenge), challenge).granted:
                grants += 1
            else:
                rejects += 1
        try:
            client.redeem(challenge)
        except PoolExhaustedError:
            exhausted += 1
    return grants, rejects, exhausted


@pytest.mark.parametrize("mode,bits,budget", [("toy", 512, 30.0), ("2048-bit", 2048, 300.0)])
def test_02_end_to_end_soundness(mode, bits, budget):
    keypair = blindsig.generate_keypair(bits, random.Random(11), toy=True) if bits < 2048 \
        else blindsig.generate_keypair(bits)
    start = time.perf_counter()
    grants, rejects, exhausted = run_flows(keypair, 1000)
    elapsed = time.perf_counter() - start
    ok = grants == 10_000 and rejects == 0 and exhausted == 1000 and elapsed < budget
    record(2, f"end-to-end soundness, {mode}", ok,
           f"{grants} grants, {rejects} rejections, {exhausted}/1000 exhausted, {elapsed:.1f}s")


def test_03_unlinkability():
    cfg = simharness.default_config("unlinkability", seed=3, clients=16, trials=500)
    m = simharness.run_scenario("unlinkability", cfg).metrics
    record(3, "unlinkability k=16", m["within_3_sigma"] and m["chance"] == 1 / 16,
           f"accuracy {m['linking_accuracy']:.4f} vs chance 0.0625, z={m['z']}, "
           f"unblinded control {m['unblinded_control_accuracy']}")


def test_04_local_double_spend(toy_keys):
    dep = Deployment(toy_keys[:1], seed=4, batch_allowance=100)
    rejected = 0
    challenge = None
    for _ in range(100):
        _, challenge, toks = obtain(dep, 100)
        for t in toks:
            raw = tokens.encode_token(t)
            assert dep.origin.redeem(raw, challenge).granted
            rejected += dep.origin.redeem(raw, challenge).reason is RedeemReason.DOUBLE_SPEND
    _, _, race_toks = obtain(dep, 20)
    single = 0
    for t in race_toks:
        raw = tokens.encode_token(t)
        barrier = threading.Barrier(64)
        wins = []

        def attempt():
            barrier.wait()
            wins.append(dep.origin.redeem(raw, challenge).granted)

        threads = [threading.Thread(target=attempt) for _ in range(64)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        single += sum(wins) == 1
    record(4, "local double-spend", rejected == 10_000 and single == 20,
           f"{rejected}/10000 second redemptions rejected, {single}/20 64-way races with one grant")


def test_05_cross_origin_limitation():
    off = simharness.run_scenario("double-spend", simharness.default_config(
        "double-spend", origins=2, tokens_per_client=100, sync_interval=None)).metrics
    hub = simharness.run_scenario("double-spend", simharness.default_config(
        "double-spend", origins=2, tokens_per_client=100, sync_interval=2.0, spend_spacing=3.0)).metrics
    record(5, "cross-origin limitation", off["total_grants"] == 200 and hub["total_grants"] == 100,
           f"sync off {off['total_grants']} grants, hub sync {hub['total_grants']} grants")


def test_06_issuer_hiding():
    plain = simharness.run_scenario("issuer-hiding", simharness.default_config(
        "issuer-hiding", seed=6, trials=500, exchange=False)).metrics
    mixed = simharness.run_scenario("issuer-hiding", simharness.default_config(
        "issuer-hiding", seed=6, trials=500, exchange=True)).metrics
    ok = plain["accuracy"] == 1.0 and mixed["within_3_sigma"] and mixed["chance"] == 1 / mixed["source_issuers"]
    record(6, "issuer hiding", ok,
           f"without exchange {plain['accuracy']}, with exchange {mixed['accuracy']:.4f} "
           f"vs chance {mixed['chance']}, z={mixed['z']}")


def test_07_kyc_data_separation(toy_keys):
    rng = random.Random(7)
    dep = Deployment(toy_keys[:1], seed=7)
    kinds = list(EvidenceKind)
    hits = scanned = 0
    for i in range(1000):
        handle = "".join(rng.choice("abcdefghijklmnopqrstuvwxyz0123456789") for _ in range(rng.randrange(8, 24)))
        dob = dt.date(1930, 1, 1) + dt.timedelta(days=rng.randrange(365 * 75))
        ev = KycEvidence(dob, rng.choice(kinds), f"{handle}-{i}")
        if not dep.attester.attest(ev, AgePolicy(18)).granted:
            continue
        client = Client(random.Random(rng.getrandbits(64)))
        iss = dep.issuers[0]
        challenge = tokens.encode_challenge(dep.origin.batch_challenge)
        pending, reqs = client.begin_issuance(challenge, iss.public_key, 2)
        fwd = dep.attester.forward(dep.attester.attest(ev, AgePolicy(18)), reqs).encode()
        sigs = iss.issue(fwd)
        toks = client.finalize_batch(pending, sigs, iss.public_key)
        redeemed = [tokens.encode_token(t) for t in toks]
        for raw in redeemed:
            assert dep.origin.redeem(raw, challenge).granted
        # everything the issuer or origin can observe
        seen = b"".join([challenge, fwd, *sigs, *redeemed])
        hits += sum(frag in seen for frag in evidence_fragments(ev))
        scanned += 1
    record(7, "KYC data separation", hits == 0 and scanned > 500,
           f"{hits} evidence fragments found across {scanned} granted flows of 1000 evidences")


def test_08_wire_fidelity():
    rng = random.Random(8)
    bad = 0
    types = sorted(tokens.TOKEN_WIDTHS)
    for i in range(100_000):
        kind = i % 3
        if kind == 0:
            c = random_challenge(rng)
            hiding = not c.issuer_name
            raw = tokens.encode_challenge(c, issuer_hiding=hiding)
            back = tokens.decode_challenge(raw, issuer_hiding=hiding)
            bad += back != c or tokens.encode_challenge(back, issuer_hiding=hiding) != raw
        elif kind == 1:
            t = random_token(rng, rng.choice(types))
            raw = tokens.encode_token(t)
            bad += tokens.decode_token(raw) != t or tokens.encode_token(tokens.decode_token(raw)) != raw
        else:
            tt = rng.choice(types)
            req = tokens.TokenRequest(tt, rng.randrange(256), rng.randbytes(tokens.TOKEN_WIDTHS[tt]))
            raw = tokens.encode_request(req)
            bad += tokens.decode_request(raw) != req or tokens.encode_request(tokens.decode_request(raw)) != raw
    length = tokens.token_length(tokens.TOKEN_TYPE_BLIND_RSA)
    record(8, "wire fidelity", bad == 0 and length == 354,
           f"{100_000 - bad}/100000 exact round trips, 2048-bit token {length} bytes")


def threshold_birthday(today, years):
    """Latest birth date that reaches ``years`` by ``today``, found by search."""
    dob = dt.date(today.year - years, 12, 31)
    while anniversary(dob, dob.year + years) > today:
        dob -= dt.timedelta(days=1)
    return dob


def test_09_age_policy_boundary(toy_keys):
    dep = Deployment(toy_keys[:1])
    total = correct = 0
    for now in (dt.datetime(2025, 6, 1, tzinfo=dt.timezone.utc), dt.datetime(2024, 2, 29, tzinfo=dt.timezone.utc),
                dt.datetime(2025, 1, 1, tzinfo=dt.timezone.utc)):
        for years in (18, 13):
            today = now.date()
            birthday = threshold_birthday(today, years)
            for kind in EvidenceKind:
                for offset in range(-3, 4):
                    dob = birthday + dt.timedelta(days=offset)
                    expected = anniversary(dob, dob.year + years) <= today
                    assert expected == (offset <= 0)
                    correct += dep.attester.attest(KycEvidence(dob, kind), AgePolicy(years), now).granted == expected
                    total += 1
    record(9, "age-policy boundary", correct == total, f"{correct}/{total} decisions correct")


def test_10_restart_durability(toy_keys, tmp_path):
    dep = Deployment(toy_keys[:1], seed=10)
    rejected = 0
    for trial in range(100):
        path = tmp_path / f"spent-{trial}.log"
        _, challenge, toks = obtain(dep, 1)
        raw = tokens.encode_token(toks[0])
        store = PersistentSpentStore(path)
        first = Origin("o", dep.registry, policy=AgePolicy(18), issuer_name="issuer-0",
                       token_type=tokens.TOKEN_TYPE_TOY, spent_store=store, clock=dep.clock)
        assert first.redeem(raw, challenge).granted
        store.close()
        store = PersistentSpentStore(path)
        second = Origin("o", dep.registry, policy=AgePolicy(18), issuer_name="issuer-0",
                        token_type=tokens.TOKEN_TYPE_TOY, spent_store=store, clock=dep.clock)
        rejected += second.redeem(raw, challenge).reason is RedeemReason.DOUBLE_SPEND
        store.close()
    record(10, "restart durability", rejected == 100, f"{rejected}/100 replays rejected after restart")
