import os
import random
import threading

from hypothesis import given, settings
from hypothesis import strategies as st

from agetoken.spent import MAGIC, PersistentSpentStore, SpentStore, SpentTokenRecord, decode_records, encode_records


def record(rng, origin="o"):
    return SpentTokenRecord(rng.randbytes(32), rng.randbytes(32), origin, rng.randrange(10**9) / 1000)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.binary(min_size=32, max_size=32), st.binary(min_size=32, max_size=32),
                          st.text(max_size=20), st.integers(0, 2**40)), max_size=20))
def test_record_codec_round_trip(items):
    recs = [SpentTokenRecord(n, k, o, t / 1e6) for n, k, o, t in items]
    assert decode_records(encode_records(recs)) == recs


def test_check_and_insert_and_merge():
    rng = random.Random(0)
    a, b = SpentStore(), SpentStore()
    ra, rb = record(rng, "a"), record(rng, "b")
    assert a.check_and_insert(ra) and not a.check_and_insert(ra)
    b.check_and_insert(rb)
    assert a.merge(b.records()) == 1 and b.merge(a.records()) == 1
    assert a.keys() == b.keys() == {ra.key, rb.key}
    assert a.merge(b.records()) == 0


def test_concurrent_inserts_exactly_one():
    rng = random.Random(1)
    store = SpentStore()
    for _ in range(50):
        rec = record(rng)
        barrier = threading.Barrier(32)
        wins = []

        def go():
            barrier.wait()
            wins.append(store.check_and_insert(rec))

        threads = [threading.Thread(target=go) for _ in range(32)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sum(wins) == 1


def test_persistence_and_torn_tail(tmp_path):
    path = tmp_path / "spent.log"
    rng = random.Random(2)
    recs = [record(rng) for _ in range(20)]
    store = PersistentSpentStore(path)
    for r in recs:
        store.check_and_insert(r)
    store.close()
    with open(path, "ab") as fh:
        fh.write(recs[0].encode()[:17])  # interrupted append
    again = PersistentSpentStore(path)
    assert again.records() == recs
    assert os.path.getsize(path) == len(MAGIC) + len(encode_records(recs))
    assert not again.check_and_insert(recs[5])
    again.close()


def test_compaction_preserves_records(tmp_path):
    path = tmp_path / "spent.log"
    rng = random.Random(3)
    store = PersistentSpentStore(path, fsync=False)
    recs = [record(rng) for _ in range(10)]
    store.merge(recs + recs)
    store.compact()
    store.check_and_insert(record(rng))
    store.close()
    assert len(PersistentSpentStore(path).records()) == 11
