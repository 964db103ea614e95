import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsds.density import (DensityTable, compute_kde, compute_kde_full, epanechnikov_weight,
                          kde_over, near_duplicate_distances)
from tsds.knn import build_index, get_knn, neighbors_from_distances

from conftest import make_set


def brute_kde(x, I, h):
    """Sum of kernel weights over the I nearest points (self included)."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for p in x:
        d = np.sqrt(((x - p) ** 2).sum(axis=1))
        d.sort()
        out.append(math.fsum(max(1 - v * v / (h * h), 0.0) for v in d[:I]))
    return np.array(out)


class TestKernel:
    def test_values(self):
        assert epanechnikov_weight(0.0, 0.2) == 1.0
        for h in (0.1, 0.37, 5.0):
            assert epanechnikov_weight(h, h) == 0.0
        assert epanechnikov_weight(0.05, 0.1) == 0.75

    def test_clamped_beyond_h(self):
        assert epanechnikov_weight(3.0, 1.0) == 0.0

    def test_bad_h(self):
        with pytest.raises(ValueError):
            epanechnikov_weight(0.1, 0.0)


class TestComputeKde:
    def _pool_table(self, pts, I, h):
        es = make_set(pts)
        nt = get_knn(build_index(es), make_set(pts[:1]), len(pts))
        return es, nt, compute_kde(nt, es, I, h)

    def test_isolated_point(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        _, nt, dt = self._pool_table(pts, 10, 0.2)
        assert (dt.values == 1.0).all()

    def test_two_exact_copies(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        _, nt, dt = self._pool_table(pts, 10, 0.2)
        rho = dict(zip(dt.positions.tolist(), dt.rho.tolist()))
        assert rho[0] == 3 and rho[2] == 3 and rho[3] == 3 and rho[1] == 1

    def test_collinear_middle(self):
        h = 0.5  # exact in float32 storage
        pts = np.array([[0.0], [h / 2], [h]])
        rho = compute_kde_full(make_set(pts), h)
        # derived: 1 + 0.75 + 0.75 in the middle, 1 + 0.75 + 0 at the ends
        assert rho[1] == 2.5 and rho[0] == 1.75 and rho[2] == 1.75

    def test_consistent_across_rows(self):
        rng = np.random.default_rng(0)
        es = make_set(rng.normal(scale=0.1, size=(60, 2)))
        nt = get_knn(build_index(es), make_set(rng.normal(scale=0.1, size=(4, 2))), 30)
        dt = compute_kde(nt, es, 15, 0.1)
        lookup = dict(zip(dt.positions.tolist(), dt.rho.tolist()))
        for i in range(nt.M):
            for k in range(nt.L):
                assert dt.values[i, k] == lookup[int(nt.indices[i, k])]
        assert (dt.values >= 1).all()

    def test_pool_is_prefetched_union(self):
        # candidate 2 is close to candidate 1 but is never prefetched
        pts = np.array([[0.0], [1.0], [1.05], [5.0]])
        es = make_set(pts)
        nt = neighbors_from_distances(np.array([[0.0, 1.0, 9.0, 9.0]]), L=2)
        dt = compute_kde(nt, es, 10, 0.2)
        assert dt.rho.tolist() == [1.0, 1.0]

    def test_empty_table(self):
        nt = neighbors_from_distances(np.zeros((0, 3)), L=1)
        with pytest.raises(ValueError):
            compute_kde(nt, make_set(np.zeros((3, 1))), 5, 0.1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 12), st.floats(0.05, 2.0), st.integers(0, 2**31),
           st.booleans())
    def test_matches_brute_force(self, n, I, h, seed, dupes):
        rng = np.random.default_rng(seed)
        x = rng.normal(scale=0.5, size=(n, 3))
        if dupes and n > 2:
            x[: n // 2] = x[rng.integers(0, n, n // 2)]
        got = kde_over(x.astype(np.float32), I, h)
        want = brute_kde(x.astype(np.float32), I, h)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_high_dimension_matches_brute_force(self, seed):
        # pair search runs in a projection above 12 dims; true pairs must all survive
        rng = np.random.default_rng(seed)
        centers = rng.normal(size=(20, 40))
        x = centers[rng.integers(0, 20, 300)] + rng.normal(scale=0.05, size=(300, 40))
        np.testing.assert_allclose(kde_over(x, 50, 0.4), brute_kde(x, 50, 0.4), rtol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 2**31))
    def test_full_equals_capped_with_large_I(self, n, seed):
        rng = np.random.default_rng(seed)
        es = make_set(rng.normal(scale=0.3, size=(n, 2)))
        nt = neighbors_from_distances(np.zeros((1, n)))
        dt = compute_kde(nt, es, n, 0.4)
        assert dt.rho.tobytes() == compute_kde_full(es, 0.4).tobytes()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 20), st.floats(0.0, 0.99), st.integers(0, 2**31))
    def test_adding_close_point_never_decreases(self, n, frac, seed):
        rng = np.random.default_rng(seed)
        h = 0.5
        x = rng.normal(scale=0.4, size=(n, 2))
        direction = rng.normal(size=2)
        extra = x[0] + frac * h * direction / np.linalg.norm(direction)
        before = compute_kde_full(x, h)[0]
        after = compute_kde_full(np.vstack([x, extra]), h)[0]
        assert after >= before


class TestFull:
    def test_singleton(self):
        assert compute_kde_full(make_set([[1.0, 2.0]]), 0.1).tolist() == [1.0]

    def test_two_identical(self):
        assert compute_kde_full(make_set([[1.0], [1.0]]), 0.1).tolist() == [2.0, 2.0]

    def test_cap(self):
        with pytest.raises(ValueError, match="cap"):
            compute_kde_full(np.zeros((11, 1)), 0.1, cap=10)

    def test_duplicated_point_at_least_r(self):
        rng = np.random.default_rng(0)
        x = np.vstack([rng.normal(size=(10, 2)), np.tile([[0.3, 0.3]], (5, 1))])
        rho = compute_kde_full(x, 0.5)
        assert (rho[10:] >= 5).all()


class TestHelpers:
    def test_near_duplicate_summary(self):
        es = make_set([[0.0, 0.0], [0.03, 0.0], [0.0, 0.04], [9.0, 9.0]], ids=[10, 11, 12, 13])
        s = near_duplicate_distances(es, [10, 11, 12])
        assert s["pairs"] == 3
        assert s["max"] == pytest.approx(0.05, rel=1e-6)

    def test_from_vector(self):
        nt = neighbors_from_distances(np.array([[0.3, 0.1, 0.2]]))
        dt = DensityTable.from_vector(nt, [1.0, 2.0, 3.0])
        assert dt.values.tolist() == [[2.0, 3.0, 1.0]]
