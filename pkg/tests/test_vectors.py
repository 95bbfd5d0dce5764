import pytest

from vectors import load_vectors, run_vector

VECTORS = load_vectors()


def test_fixture_has_deterministic_vectors():
    assert len(VECTORS) == 4
    assert any(int(v["salt_len"], 16) == 0 and int(v["is_randomized"], 16) == 0 for v in VECTORS)


@pytest.mark.parametrize("vector", VECTORS, ids=[v["name"] for v in VECTORS])
def test_vector_matches_exactly(vector):
    result = run_vector(vector)
    assert all(result.values()), result
