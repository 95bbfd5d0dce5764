import json
import random

import pytest

from agetoken.errors import MalformedError
from agetoken.registry import Role, Status, TrustedList, TrustedListEntry, _entries_digest, make_key_record


def issuer(entity_id, *keys, status=Status.ACTIVE):
    return TrustedListEntry(entity_id, Role.ISSUER, status, keys, {"policy": "18+/low"})


def random_list(rng, n_entities=30, versions=60):
    tl = TrustedList()
    ids = [f"e{i}" for i in range(n_entities)]
    for _ in range(versions):
        eid = rng.choice(ids)
        current = tl.snapshot().get(eid)
        if current is not None and current.status is Status.REVOKED:
            continue
        status = rng.choices(list(Status), weights=[6, 2, 1])[0]
        keys = []
        for _ in range(rng.randrange(1, 4)):
            start = rng.randrange(0, 1000)
            keys.append(make_key_record(rng.randbytes(40), start, start + rng.randrange(1, 500)))
        role = current.role if current else rng.choice(list(Role))
        tl.register(TrustedListEntry(eid, role, status, tuple(keys)))
    return tl


def scan(snapshot, key_id, at):
    """Brute-force oracle: walk every entry and key."""
    hits = [(e.entity_id, k.public_key) for e in snapshot.entries.values() for k in e.keys
            if k.key_id == key_id and e.status is Status.ACTIVE and k.valid_from <= at < k.valid_until]
    assert len(hits) <= 1
    return hits[0] if hits else None


def test_versions_and_history():
    tl = TrustedList()
    records = [make_key_record(bytes([i]) * 16) for i in range(100)]
    for i, rec in enumerate(records):
        assert tl.register(issuer(f"iss-{i}", rec)) == i + 1
    for v in range(1, 101):
        snap = tl.snapshot(v)
        assert len(snap.entries) == v
        assert snap.resolve_key(records[v - 1].key_id, 10) is not None
        if v < 100:
            assert snap.resolve_key(records[v].key_id, 10) is None


def test_overlapping_key_id_rejected():
    tl = TrustedList()
    rec = make_key_record(b"material", 0, 100)
    tl.register(issuer("a", rec))
    with pytest.raises(MalformedError):
        tl.register(issuer("b", make_key_record(b"material", 50, 150)))
    tl.register(issuer("b", make_key_record(b"material", 100, 200)))  # disjoint window is fine
    with pytest.raises(MalformedError):
        tl.register(issuer("c", rec, rec))


def test_resolve_windows_and_status():
    tl = TrustedList()
    rec = make_key_record(b"k", 10, 20)
    tl.register(issuer("a", rec))
    assert tl.resolve_key(rec.key_id, 10).entity_id == "a"
    assert tl.resolve_key(rec.key_id, 19.5) is not None
    assert tl.resolve_key(rec.key_id, 20) is None
    assert tl.resolve_key(rec.key_id, 9) is None
    tl.set_status("a", Status.SUSPENDED)
    assert tl.resolve_key(rec.key_id, 15) is None
    tl.set_status("a", Status.ACTIVE)
    assert tl.resolve_key(rec.key_id, 15) is not None


def test_revocation_dominates():
    tl = TrustedList()
    rec = make_key_record(b"k")
    tl.register(issuer("a", rec))
    v = tl.set_status("a", Status.REVOKED)
    with pytest.raises(MalformedError):
        tl.set_status("a", Status.ACTIVE)
    with pytest.raises(MalformedError):
        tl.register(issuer("a", make_key_record(b"fresh")))
    tl.register(issuer("b", make_key_record(b"other")))
    for version in range(v, tl.version + 1):
        assert tl.resolve_key(rec.key_id, 5, version=version) is None
    assert tl.resolve_key(rec.key_id, 5, version=v - 1) is not None


def test_role_cannot_change():
    tl = TrustedList()
    tl.register(issuer("a", make_key_record(b"k")))
    with pytest.raises(MalformedError):
        tl.register(TrustedListEntry("a", Role.ATTESTER, keys=(make_key_record(b"k"),)))


def test_resolve_matches_linear_scan():
    rng = random.Random(7)
    tl = random_list(rng)
    all_keys = [k.key_id for v in range(1, tl.version + 1) for e in tl.snapshot(v).entries.values() for k in e.keys]
    for _ in range(1000):
        version = rng.randrange(1, tl.version + 1)
        key_id = rng.choice(all_keys) if rng.random() < 0.9 else rng.randbytes(32)
        at = rng.randrange(-10, 1600)
        got = tl.resolve_key(key_id, at, version=version)
        expected = scan(tl.snapshot(version), key_id, at)
        assert (got and (got.entity_id, got.public_key)) == expected or (got is None and expected is None)


@pytest.mark.parametrize("seed", range(5))
def test_export_import_differential(seed):
    rng = random.Random(seed)
    tl = random_list(rng)
    raw = tl.export_list()
    copy = TrustedList.import_list(raw)
    assert copy.version == tl.version
    assert copy.export_list() == raw
    keys = [k.key_id for e in tl.snapshot().entries.values() for k in e.keys]
    for _ in range(200):
        key_id, at = rng.choice(keys), rng.randrange(0, 1600)
        assert copy.resolve_key(key_id, at) == tl.resolve_key(key_id, at)


def test_tampering_is_reported():
    tl = TrustedList()
    tl.register(issuer("a", make_key_record(b"k")))
    raw = tl.export_list().decode()
    with pytest.raises(MalformedError, match="digest"):
        TrustedList.import_list(raw.replace('"active"', '"revoked"'))
    with pytest.raises(MalformedError, match="line"):
        TrustedList.import_list(raw.replace("{", "[", 1))
    doc = json.loads(raw)
    del doc["entries"][0]["keys"][0]["valid_until"]
    doc["digest"] = _entries_digest(doc["entries"])
    with pytest.raises(MalformedError, match=r"entries\[0\]"):
        TrustedList.import_list(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with pytest.raises(MalformedError, match="canonical"):
        TrustedList.import_list(raw.replace("\n", "\r\n"))
