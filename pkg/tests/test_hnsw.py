"""HNSW index: exact-search agreement with the brute-force oracle,
structural invariants, construction equivalence, and persistence."""

from __future__ import annotations

import numpy as np
import pytest

from geoforge.hnsw import (
    HnswError,
    HnswIndex,
    HnswParams,
    brute_force_search,
    build,
)

from _oracles import unit_rows


@pytest.fixture(scope="module")
def corpus_300():
    rng = np.random.default_rng(51)
    vecs = unit_rows(rng, 300, 16)
    vectors = {i: vecs[i] for i in range(len(vecs))}
    queries = unit_rows(rng, 30, 16)
    return vectors, queries


def _recall(index: HnswIndex, vectors, queries, k=10, ef_search=None) -> float:
    hits = []
    for query in queries:
        exact = {i for i, _ in brute_force_search(vectors, query, k)}
        approx = {i for i, _ in index.search(query, k, ef_search=ef_search)}
        hits.append(len(exact & approx) / len(exact))
    return float(np.mean(hits))


class TestParams:
    def test_validation(self):
        with pytest.raises(HnswError, match="M must be"):
            HnswParams(M=1)
        with pytest.raises(HnswError, match="ef_construction"):
            HnswParams(M=16, ef_construction=8)
        with pytest.raises(HnswError, match="ef_search"):
            HnswParams(ef_search=0)


class TestSearch:
    def test_empty_index(self):
        index = HnswIndex(dim=4)
        assert index.search(np.array([1.0, 0.0, 0.0, 0.0]), 5) == []

    def test_single_element(self):
        index = HnswIndex(dim=2)
        index.insert(7, np.array([1.0, 0.0]))
        assert index.search(np.array([1.0, 0.0]), 3) == [(7, 1.0)]

    def test_non_unit_vector_rejected(self):
        index = HnswIndex(dim=2)
        with pytest.raises(HnswError, match="unit norm"):
            index.insert(1, np.array([2.0, 0.0]))

    def test_dim_mismatch(self):
        index = HnswIndex(dim=2)
        with pytest.raises(HnswError, match="dim"):
            index.insert(1, np.ones(3) / np.sqrt(3))

    def test_exhaustive_ef_agrees_with_brute_force(self, corpus_300):
        vectors, queries = corpus_300
        index = build(vectors, seed=1)
        assert _recall(index, vectors, queries, ef_search=len(vectors)) == 1.0

    def test_results_sorted_by_similarity(self, corpus_300):
        vectors, queries = corpus_300
        index = build(vectors, seed=1)
        for query in queries[:5]:
            sims = [sim for _, sim in index.search(query, 10)]
            assert sims == sorted(sims, reverse=True)

    def test_recall_non_decreasing_in_ef(self, corpus_300):
        vectors, queries = corpus_300
        index = build(vectors, seed=1)
        recalls = [
            _recall(index, vectors, queries, ef_search=ef) for ef in (5, 20, 100, 300)
        ]
        assert all(a <= b for a, b in zip(recalls, recalls[1:]))


class TestConstruction:
    def test_sequential_inserts_equivalent_to_build(self):
        rng = np.random.default_rng(61)
        vecs = unit_rows(rng, 1000, 16)
        vectors = {i: vecs[i] for i in range(len(vecs))}
        queries = unit_rows(rng, 30, 16)
        batch = build(vectors, seed=9)
        incremental = HnswIndex(dim=16, seed=9)
        for i in sorted(vectors):
            incremental.insert(i, vectors[i])
        recall_batch = _recall(batch, vectors, queries)
        recall_incremental = _recall(incremental, vectors, queries)
        assert abs(recall_batch - recall_incremental) < 0.02

    def test_invariants_hold(self, corpus_300):
        vectors, _ = corpus_300
        index = build(vectors, seed=1)
        index.check_invariants()

    def test_deterministic(self, corpus_300):
        vectors, queries = corpus_300
        a = build(vectors, seed=4)
        b = build(vectors, seed=4)
        for query in queries[:5]:
            assert a.search(query, 10) == b.search(query, 10)

    def test_distance_count_increases(self, corpus_300):
        vectors, queries = corpus_300
        index = build(vectors, seed=1)
        before = index.distance_count
        index.search(queries[0], 10)
        assert index.distance_count > before


class TestPersistence:
    def test_roundtrip_identical_results(self, corpus_300, tmp_path):
        vectors, queries = corpus_300
        index = build(vectors, seed=1)
        path = tmp_path / "index.bin"
        index.save(path)
        loaded = HnswIndex.load(path)
        loaded.check_invariants()
        assert len(loaded) == len(index)
        for query in queries:
            got = loaded.search(query, 10)
            want = index.search(query, 10)
            assert [i for i, _ in got] == [i for i, _ in want]
            assert np.allclose(
                [s for _, s in got], [s for _, s in want], atol=1e-6
            )

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "index.bin"
        path.write_bytes(b"NOTINDEX" + b"\x00" * 64)
        with pytest.raises(HnswError, match="magic"):
            HnswIndex.load(path)

    def test_truncated(self, corpus_300, tmp_path):
        vectors, _ = corpus_300
        index = build(vectors, seed=1)
        path = tmp_path / "index.bin"
        index.save(path)
        path.write_bytes(path.read_bytes()[:200])
        with pytest.raises(HnswError, match="truncated"):
            HnswIndex.load(path)


class TestBruteForce:
    def test_ties_break_to_lower_id(self):
        v = np.array([1.0, 0.0])
        vectors = {5: v, 2: v, 9: v}
        assert [i for i, _ in brute_force_search(vectors, v, 3)] == [2, 5, 9]

    def test_empty(self):
        assert brute_force_search({}, np.array([1.0]), 5) == []

    def test_dim_mismatch(self):
        with pytest.raises(HnswError, match="dim"):
            brute_force_search({1: np.ones(3)}, np.ones(2), 1)
