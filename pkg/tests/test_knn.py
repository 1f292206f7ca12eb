"""Exact nearest-neighbor classification and the embedding dump format."""

import numpy as np
import pytest

from tilevote.errors import DataError
from tilevote.knn import (
    EmbeddingIndex,
    build_index,
    classify,
    load_embeddings,
    save_embeddings,
)


def _random_index(rng, n, dim):
    emb = rng.standard_normal((n, dim))
    labels = rng.integers(0, 4, size=n)
    return build_index(emb, labels, [f"t{i}" for i in range(n)]), emb, labels


def _brute_force(train, labels, queries, k):
    """Independent oracle: direct per-pair distances, lexicographic
    (distance, index) ranking, frequency scores."""
    preds, scores, neighbors = [], [], []
    for q in queries:
        d = np.sqrt(((train - q) ** 2).sum(axis=1))
        order = np.lexsort((np.arange(len(train)), d))[:k]
        nb_labels = labels[order]
        counts = np.bincount(nb_labels, minlength=4)
        top = counts.max()
        tied = np.flatnonzero(counts == top)
        if len(tied) == 1:
            pred = tied[0]
        else:
            sums = np.array([d[order][nb_labels == c].sum() for c in tied])
            pred = tied[np.flatnonzero(sums == sums.min())[0]]
        preds.append(pred)
        scores.append(counts / k)
        neighbors.append(order)
    return np.array(preds), np.array(scores), np.array(neighbors)


class TestBuildIndex:
    def test_boundary_index_of_k_rows(self):
        rng = np.random.default_rng(0)
        idx, _, _ = _random_index(rng, 5, 8)
        res = classify(idx, rng.standard_normal((2, 8)), k=5)
        assert res.neighbors.shape == (2, 5)

    def test_k_larger_than_index_rejected(self):
        rng = np.random.default_rng(1)
        idx, _, _ = _random_index(rng, 4, 8)
        with pytest.raises(DataError):
            classify(idx, rng.standard_normal((1, 8)), k=5)
        with pytest.raises(DataError):
            classify(idx, rng.standard_normal((1, 8)), k=0)

    def test_input_validation(self):
        with pytest.raises(DataError):
            build_index(np.zeros((0, 4)), [], [])
        with pytest.raises(DataError):
            build_index(np.zeros((2, 4)), [0], ["a"])
        with pytest.raises(DataError):
            build_index(np.zeros((2, 4)), [0, 9], ["a", "b"])
        bad = np.zeros((2, 4))
        bad[1, 1] = np.nan
        with pytest.raises(DataError):
            build_index(bad, [0, 1], ["a", "b"])

    def test_index_owns_its_data(self):
        emb = np.ones((3, 4), dtype=np.float64)
        labels = np.array([0, 1, 2])
        idx = build_index(emb, labels, ["a", "b", "c"])
        emb[:] = 99.0
        labels[:] = 3
        np.testing.assert_array_equal(idx.embeddings, 1.0)
        np.testing.assert_array_equal(idx.labels, [0, 1, 2])

    def test_query_dim_checked(self):
        rng = np.random.default_rng(2)
        idx, _, _ = _random_index(rng, 10, 8)
        with pytest.raises(DataError):
            classify(idx, rng.standard_normal((2, 9)), k=3)


class TestClassify:
    def test_frequency_scores_from_neighbor_labels(self):
        """Five nearest neighbors labeled (0, 0, 1, 2, 0) give label 0 with
        scores (0.6, 0.2, 0.2, 0.0)."""
        train = np.array([[1.0], [2.0], [3.0], [4.0], [5.0], [50.0], [60.0]])
        labels = [0, 0, 1, 2, 0, 3, 3]
        idx = build_index(train, labels, [f"t{i}" for i in range(7)])
        res = classify(idx, np.array([[0.0]]), k=5)
        assert res.pred[0] == 0
        np.testing.assert_allclose(res.scores[0], [0.6, 0.2, 0.2, 0.0])
        np.testing.assert_array_equal(res.neighbors[0], [0, 1, 2, 3, 4])

    def test_query_equal_to_training_point(self):
        rng = np.random.default_rng(3)
        idx, emb, labels = _random_index(rng, 20, 6)
        probe = 7
        res = classify(idx, emb[probe : probe + 1], k=1)
        assert res.neighbors[0, 0] == probe
        assert res.pred[0] == labels[probe]
        np.testing.assert_allclose(res.scores[0, labels[probe]], 1.0)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        idx, emb, labels = _random_index(rng, 300, 16)
        queries = rng.standard_normal((50, 16))
        for k in (1, 3, 5):
            res = classify(idx, queries, k=k)
            preds, scores, neighbors = _brute_force(emb, labels, queries, k)
            np.testing.assert_array_equal(res.pred, preds)
            np.testing.assert_allclose(res.scores, scores, atol=1e-12)
            np.testing.assert_array_equal(res.neighbors, neighbors)

    def test_distance_ties_prefer_lower_training_index(self):
        train = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        idx = build_index(train, [0, 1, 2, 3], list("abcd"))
        res = classify(idx, np.array([[0.0, 0.0]]), k=2)
        np.testing.assert_array_equal(res.neighbors[0], [0, 1])

    def test_count_tie_broken_by_summed_distance(self):
        """Classes 0 and 1 each place two of the four neighbors; class 1 owns
        the single nearest point but class 0 has the smaller distance sum."""
        train = np.array([[0.1], [-0.9], [0.4], [-0.5]])
        labels = [1, 1, 0, 0]   # distances: c1 -> .1+.9 = 1.0, c0 -> .4+.5 = 0.9
        idx = build_index(train, labels, list("abcd"))
        res = classify(idx, np.array([[0.0]]), k=4)
        assert res.pred[0] == 0

    def test_full_tie_falls_to_lower_class_id(self):
        train = np.array([[0.1], [-0.4], [0.2], [-0.3]])
        labels = [1, 1, 0, 0]   # both classes sum to 0.5
        idx = build_index(train, labels, list("abcd"))
        res = classify(idx, np.array([[0.0]]), k=4)
        assert res.pred[0] == 0

    def test_permutation_invariant_for_distinct_distances(self):
        rng = np.random.default_rng(5)
        emb = rng.standard_normal((40, 8))
        labels = rng.integers(0, 4, size=40)
        queries = rng.standard_normal((10, 8))
        idx = build_index(emb, labels, [f"t{i}" for i in range(40)])
        base = classify(idx, queries, k=5)
        perm = rng.permutation(40)
        idx_p = build_index(emb[perm], labels[perm], [f"t{i}" for i in perm])
        shuffled = classify(idx_p, queries, k=5)
        np.testing.assert_array_equal(base.pred, shuffled.pred)
        np.testing.assert_allclose(base.scores, shuffled.scores, atol=1e-12)
        # neighbor identities agree through the permutation
        np.testing.assert_array_equal(perm[shuffled.neighbors], base.neighbors)

    def test_scores_normalized_on_random_batches(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n = int(rng.integers(8, 60))
            idx, _, _ = _random_index(rng, n, 5)
            k = int(rng.integers(1, min(8, n) + 1))
            res = classify(idx, rng.standard_normal((7, 5)), k=k)
            np.testing.assert_allclose(res.scores.sum(axis=1), 1.0, atol=1e-12)
            steps = res.scores * k
            np.testing.assert_allclose(steps, np.round(steps), atol=1e-9)


class TestEmbeddingDump:
    def test_float32_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        emb = (rng.standard_normal((12, 16)) * 10).astype(np.float32)
        labels = rng.integers(0, 4, size=12)
        ids = [f"img_{i:02d}_r00c00" for i in range(12)]
        save_embeddings(tmp_path / "e.csv", ids, labels, emb)
        ids2, labels2, emb2 = load_embeddings(tmp_path / "e.csv")
        assert ids2 == ids
        np.testing.assert_array_equal(labels2, labels)
        assert emb2.dtype == np.float64
        # 9 significant digits pin down every float32 value exactly
        np.testing.assert_array_equal(emb2.astype(np.float32), emb)

    def test_load_rejects_malformed(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("foo,bar\n1,2\n")
        with pytest.raises(DataError):
            load_embeddings(p)
        p.write_text("tile_id,class,e000\nt0,0,1.0,9.9\n")
        with pytest.raises(DataError):
            load_embeddings(p)
        p.write_text("tile_id,class,e000\n")
        with pytest.raises(DataError):
            load_embeddings(p)

    def test_save_rejects_mismatched_lengths(self, tmp_path):
        with pytest.raises(DataError):
            save_embeddings(tmp_path / "x.csv", ["a"], [0, 1], np.zeros((1, 4)))


class TestEmbeddingIndexProps:
    def test_size_and_dim(self):
        idx = EmbeddingIndex(embeddings=np.zeros((7, 3)),
                             labels=np.zeros(7, dtype=np.int64),
                             ids=tuple("abcdefg"))
        assert idx.size == 7 and idx.dim == 3
