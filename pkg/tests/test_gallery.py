import numpy as np
import pytest

import oracles
from pqcascade import (Dataset, Metric, adc_distance, adc_scan, build_index,
                       build_distance_table, decode, default_candidate_size,
                       load_index, normalize_rows, save_index, search_exact,
                       search_pq, select_top_k, train_codebooks)


def make_dataset(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(
        dim=dim,
        ids=np.arange(n, dtype=np.uint64),
        subjects=[None] * n,
        well_aligned=np.ones(n, dtype=bool),
        vectors=rng.standard_normal((n, dim)).astype(np.float32),
    )


def make_index(n=200, dim=8, m=2, z=16, seed=0, keep_raw=True):
    ds = make_dataset(n, dim, seed)
    cb = train_codebooks(normalize_rows(ds.vectors), m=m, z=z, seed=seed)
    return ds, build_index(ds, cb, keep_raw=keep_raw)


class TestBuildIndex:
    def test_shapes(self):
        ds, idx = make_index(n=3, dim=8, m=4, z=2)
        assert idx.codes.shape == (3, 4)
        assert idx.codes.dtype == np.uint8
        assert len(idx) == 3

    def test_raw_vectors_are_normalized_inputs(self):
        ds, idx = make_index(n=30, dim=8)
        assert np.array_equal(idx.raw_vectors, normalize_rows(ds.vectors))

    def test_rebuild_is_bit_identical(self, tmp_path):
        _, a = make_index(n=50, dim=8, seed=3)
        _, b = make_index(n=50, dim=8, seed=3)
        pa, pb = tmp_path / "a.pqix", tmp_path / "b.pqix"
        save_index(a, pa)
        save_index(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_dim_mismatch(self):
        ds = make_dataset(40, 8)
        cb = train_codebooks(make_dataset(40, 16).vectors, m=2, z=4, seed=0)
        with pytest.raises(ValueError, match="dimension mismatch"):
            build_index(ds, cb)


class TestSearchExact:
    def test_self_query_cosine(self):
        ds = make_dataset(30, 8, seed=1)
        hits = search_exact(ds, ds.vectors[7], k=3, metric=Metric.COSINE)
        assert int(hits.ids[0]) == 7
        assert hits.scores[0] == pytest.approx(1.0, abs=1e-9)

    def test_k_at_least_n_returns_all(self):
        ds = make_dataset(12, 4, seed=2)
        hits = search_exact(ds, ds.vectors[0], k=50)
        assert len(hits.ids) == 12

    @pytest.mark.parametrize("metric", [Metric.COSINE, Metric.L1, Metric.L2])
    def test_matches_full_sort_oracle(self, metric):
        rng = np.random.default_rng(3)
        ds = make_dataset(100, 8, seed=3)
        for _ in range(10):
            q = rng.standard_normal(8).astype(np.float32)
            hits = search_exact(ds, q, k=5, metric=metric)
            if metric is Metric.COSINE:
                scores = [oracles.cosine(q, v) for v in ds.vectors]
            elif metric is Metric.L2:
                scores = [-np.sqrt(oracles.squared_l2(q, v)) for v in ds.vectors]
            else:
                scores = [-float(np.abs(q.astype(np.float64) - v.astype(np.float64)).sum())
                          for v in ds.vectors]
            want_ids, _ = oracles.full_sort_ranking(scores, ds.ids)
            assert [int(g) for g in hits.ids] == want_ids[:5]

    def test_zero_query_rejected(self):
        ds = make_dataset(5, 4)
        with pytest.raises(ValueError, match="zero norm"):
            search_exact(ds, np.zeros(4), k=2)


class TestSearchPQ:
    def test_reconstructed_item_ranks_first_with_unit_similarity(self):
        ds, idx = make_index(n=60, dim=8, m=2, z=32, seed=4)
        q = decode(idx.codebook, idx.codes[17])
        hits = search_pq(idx, q, k=3)
        assert int(hits.ids[0]) == 17
        assert hits.scores[0] == pytest.approx(1.0, abs=1e-12)

    def test_memorizing_codebook_equals_exact_l2(self):
        from pqcascade import PQCodebook
        ds = make_dataset(200, 8, seed=5)
        normed = normalize_rows(ds.vectors)
        cb = PQCodebook(m=1, z=200, dim=8, centroids=normed[None, :, :].copy())
        idx = build_index(ds, cb)
        rng = np.random.default_rng(6)
        for _ in range(20):
            q = rng.standard_normal(8).astype(np.float32)
            fast = search_pq(idx, q, k=200)
            exact = search_exact(idx, q, k=200, metric=Metric.L2)
            assert np.array_equal(fast.ids, exact.ids)

    def test_similarity_is_one_minus_half_distance(self):
        ds, idx = make_index(n=40, dim=8, m=4, z=8, seed=7)
        q = np.random.default_rng(8).standard_normal(8).astype(np.float32)
        sims = adc_scan(idx, q)
        dt = build_distance_table(idx.codebook, q)
        for row in (0, 13, 39):
            d = adc_distance(dt, idx.codes[row])
            assert sims[row] == pytest.approx(1.0 - 0.5 * d, rel=1e-10)


class TestSelectTopK:
    def test_boundary_ties_resolved_by_id(self):
        scores = np.array([5.0, 4.0, 4.0, 4.0, 1.0])
        ids = np.array([10, 13, 11, 12, 14], dtype=np.uint64)
        top_ids, top_scores = select_top_k(scores, ids, 3)
        assert list(top_ids) == [10, 11, 12]
        assert list(top_scores) == [5.0, 4.0, 4.0]

    def test_matches_full_sort_oracle_with_many_ties(self):
        rng = np.random.default_rng(9)
        for trial in range(20):
            n = int(rng.integers(5, 60))
            scores = rng.integers(0, 4, size=n).astype(np.float64)
            ids = np.array(rng.permutation(n), dtype=np.uint64)
            k = int(rng.integers(1, n + 1))
            top_ids, top_scores = select_top_k(scores, ids, k)
            want_ids, want_scores = oracles.full_sort_ranking(scores, ids)
            assert [int(g) for g in top_ids] == want_ids[:k]
            assert [float(s) for s in top_scores] == want_scores[:k]


class TestCandidateHeuristic:
    def test_paper_operating_points(self):
        assert default_candidate_size(100_000) == 1_000
        assert default_candidate_size(5_000_000, cap=50_000) == 50_000
        assert default_candidate_size(80_000_000, cap=1_000) == 1_000

    def test_floor(self):
        assert default_candidate_size(1_000) == 50
        assert default_candidate_size(1) == 50


class TestIndexIO:
    @pytest.mark.parametrize("z,keep_raw", [(16, True), (300, True), (16, False)])
    def test_round_trip(self, tmp_path, z, keep_raw):
        ds, idx = make_index(n=400, dim=8, m=2, z=z, seed=10, keep_raw=keep_raw)
        path = tmp_path / "g.pqix"
        save_index(idx, path)
        back = load_index(path)
        assert np.array_equal(back.ids, idx.ids)
        assert np.array_equal(back.codes, idx.codes)
        assert back.codes.dtype == idx.codes.dtype
        assert np.array_equal(back.codebook.centroids, idx.codebook.centroids)
        if keep_raw:
            assert np.array_equal(back.raw_vectors, idx.raw_vectors)
        else:
            assert back.raw_vectors is None
        q = np.random.default_rng(11).standard_normal(8).astype(np.float32)
        assert np.array_equal(search_pq(back, q, 5).ids, search_pq(idx, q, 5).ids)

    def test_raw_required_for_exact_search(self):
        _, idx = make_index(n=20, dim=8, keep_raw=False)
        with pytest.raises(ValueError, match="keep_raw"):
            search_exact(idx, np.ones(8, dtype=np.float32), k=2)

    def test_bad_magic(self, tmp_path):
        _, idx = make_index(n=20, dim=8)
        path = tmp_path / "g.pqix"
        save_index(idx, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            load_index(path)

    def test_truncated(self, tmp_path):
        _, idx = make_index(n=20, dim=8)
        path = tmp_path / "g.pqix"
        save_index(idx, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ValueError, match="truncated"):
            load_index(path)
