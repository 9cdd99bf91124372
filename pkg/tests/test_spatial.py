import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from priorloc.spatial import IncrementalIndex, KDTree, build_index, insert, knn, radius_search


def brute_knn(points, q, k):
    d2 = ((points - q) ** 2).sum(1)
    order = np.lexsort((np.arange(len(points)), d2))[:k]
    return order, d2[order]


def brute_radius(points, q, r):
    d2 = ((points - q) ** 2).sum(1)
    hit = np.flatnonzero(d2 <= r * r)
    order = np.lexsort((hit, d2[hit]))
    return hit[order], d2[hit][order]


def grid(n):
    a = np.arange(n, dtype=float)
    return np.stack(np.meshgrid(a, a, a, indexing="ij"), -1).reshape(-1, 3)


def test_single_point():
    idx = build_index([[1.0, 2.0, 3.0]])
    assert [i for i, _ in knn(idx, [50.0, -4.0, 0.0], 3)] == [0]


def test_empty_index():
    idx = build_index(np.zeros((0, 3)))
    assert len(idx) == 0
    assert knn(idx, [0, 0, 0], 4) == []
    assert radius_search(idx, [0, 0, 0], 1.0) == []


def test_exact_match_first(rng):
    pts = rng.uniform(-1, 1, (500, 3))
    idx = build_index(pts)
    for i in rng.integers(0, 500, 20):
        first = knn(idx, pts[i], 3)[0]
        assert first == (int(i), 0.0)


def test_knn_matches_brute_force(rng):
    pts = rng.uniform(0, 1, (1000, 3))
    idx = build_index(pts)
    for q in rng.uniform(0, 1, (100, 3)):
        got = knn(idx, q, 5)
        ids, d2 = brute_knn(pts, q, 5)
        assert [i for i, _ in got] == ids.tolist()
        assert np.allclose([d for _, d in got], np.sqrt(d2), rtol=0, atol=1e-12)


def test_knn_saturation():
    pts = np.arange(15, dtype=float).reshape(5, 3)
    idx = build_index(pts)
    assert len(knn(idx, [0, 0, 0], 5)) == 5
    assert len(knn(idx, [0, 0, 0], 50)) == 5


def test_knn_rejects_k_zero():
    with pytest.raises(ValueError):
        knn(build_index(np.zeros((3, 3))), [0, 0, 0], 0)


def test_ties_broken_by_id():
    pts = grid(4)
    idx = build_index(pts, leaf_size=2)
    q = np.array([1.5, 1.5, 1.5])
    got = knn(idx, q, 8)
    # the 8 cell corners are all at the same distance
    ids, _ = brute_knn(pts, q, 8)
    assert [i for i, _ in got] == ids.tolist() == sorted(ids.tolist())


def test_radius_grid_seven():
    idx = build_index(grid(5))
    hits = radius_search(idx, [2.0, 2.0, 2.0], 1.05)
    assert len(hits) == 7
    assert hits[0][1] == 0.0


def test_radius_smaller_than_nearest():
    idx = build_index(grid(3))
    assert radius_search(idx, [0.5, 0.5, 0.5], 0.1) == []


def test_radius_matches_brute_force(rng):
    pts = rng.normal(size=(2000, 3))
    idx = build_index(pts)
    for q in rng.normal(size=(50, 3)):
        got = radius_search(idx, q, 0.4)
        ids, _ = brute_radius(pts, q, 0.4)
        assert [i for i, _ in got] == ids.tolist()


def test_radius_rejects_nonpositive():
    with pytest.raises(ValueError):
        radius_search(build_index(np.zeros((3, 3))), [0, 0, 0], 0.0)


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        build_index([[0.0, np.inf, 0.0]])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5000), st.just(3)),
              elements=st.floats(-10, 10, allow_nan=False, width=32)),
       st.integers(1, 12), st.integers(1, 20), st.floats(0.01, 5.0))
def test_property_equivalence(pts, k, leaf, r):
    idx = KDTree(pts, leaf_size=leaf)
    rng = np.random.default_rng(len(pts))
    queries = np.vstack([pts[:3], rng.uniform(-10, 10, (5, 3))])
    for q in queries:
        ids, _ = brute_knn(pts, q, k)
        got = [i for i, _ in idx.knn(q, k)]
        assert got == ids.tolist()
        ids, _ = brute_radius(pts, q, r)
        assert [i for i, _ in idx.radius_search(q, r)] == ids.tolist()


def test_build_comparisons_n_log_n(rng):
    # below ~10k points the log factor and quickselect variance dominate
    small = KDTree(rng.uniform(size=(10000, 3))).build_comparisons
    large = KDTree(rng.uniform(size=(100000, 3))).build_comparisons
    assert large / small < 15


# ---------------------------------------------------------------- incremental


def test_insert_into_empty():
    idx = IncrementalIndex()
    insert(idx, [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
    assert [i for i, _ in knn(idx, [0, 0, 0], 5)] == [0, 1]


def test_duplicates_kept():
    idx = IncrementalIndex([[0.0, 0.0, 0.0]])
    insert(idx, [[0.0, 0.0, 0.0]])
    got = knn(idx, [0, 0, 0], 5)
    assert got == [(0, 0.0), (1, 0.0)]


def test_interleaved_equals_static(rng):
    idx = IncrementalIndex(rebuild_ratio=0.3)
    union = np.zeros((0, 3))
    queries = rng.uniform(0, 1, (20, 3))
    for _ in range(10):
        batch = rng.uniform(0, 1, (100, 3))
        insert(idx, batch)
        union = np.vstack([union, batch])
        static = KDTree(union)
        ids_a, d_a = idx.knn_sq(queries, 6)
        ids_b, d_b = static.knn_sq(queries, 6)
        assert np.array_equal(ids_a, ids_b) and np.array_equal(d_a, d_b)
        ra, rb = idx.radius_sq(queries, 0.15), static.radius_sq(queries, 0.15)
        for x, y in zip(ra, rb):
            assert np.array_equal(x, y)
    assert idx.rebuild_count > 0
    assert len(idx) == 1000


def test_rebuild_timing_invariance(rng):
    base = rng.uniform(size=(300, 3))
    a = IncrementalIndex(base, rebuild_ratio=0.1)
    b = IncrementalIndex(base, rebuild_ratio=0.9)
    queries = rng.uniform(size=(30, 3))
    for _ in range(8):
        batch = rng.uniform(size=(40, 3))
        a.insert(batch)
        b.insert(batch)
        for x, y in zip(a.knn_sq(queries, 7), b.knn_sq(queries, 7)):
            assert np.array_equal(x, y)
    assert a.rebuild_count > b.rebuild_count


def test_buffer_ids_follow_main(rng):
    idx = IncrementalIndex(rng.uniform(size=(100, 3)), rebuild_ratio=0.9)
    idx.insert([[5.0, 5.0, 5.0]])
    assert idx.buffered == 1
    assert knn(idx, [5, 5, 5], 1) == [(100, 0.0)]
    assert np.array_equal(idx.points[100], [5.0, 5.0, 5.0])
