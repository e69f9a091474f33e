import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from protopropel.cloud import KnnIndex, PointCloud
from protopropel.exceptions import InvalidKError
from protopropel.features import (
    FeatureKind,
    FeatureMatrix,
    GeometricFeatures,
    SemanticFeatures,
    canonicalize_sign,
    compute_height,
    edge_differences,
    estimate_density,
    estimate_normals,
    geometric_feature,
    semantic_feature,
    standardize,
)


def cloud_of(pos, colors=None):
    pos = np.asarray(pos, dtype=float)
    return PointCloud(pos, np.zeros(len(pos), dtype=int), colors=colors)


def grid_plane(axis_fixed, n=8):
    u, v = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    cols = [u.ravel(), v.ravel()]
    cols.insert(axis_fixed, np.zeros(n * n))
    return np.column_stack(cols)


class TestNormals:
    def test_plane_z(self):
        pos = grid_plane(2)
        n = estimate_normals(cloud_of(pos), KnnIndex(pos, 16), 8)
        np.testing.assert_allclose(n, np.tile([0, 0, 1.0], (len(pos), 1)), atol=1e-9)

    def test_plane_x(self):
        pos = grid_plane(0)
        n = estimate_normals(cloud_of(pos), KnnIndex(pos, 16), 8)
        np.testing.assert_allclose(n, np.tile([1.0, 0, 0], (len(pos), 1)), atol=1e-9)

    def test_noisy_plane_within_5_degrees(self):
        # 100 points over a unit square; k=32 keeps the neighbourhood radius well above the noise
        rng = np.random.default_rng(0)
        pos = np.column_stack([rng.uniform(0, 1, 100), rng.uniform(0, 1, 100), rng.normal(0, 0.01, 100)])
        # reference: least-squares plane over the whole cloud
        centered = pos - pos.mean(axis=0)
        ref = np.linalg.svd(centered)[2][-1]
        ref = canonicalize_sign(ref[None])[0]
        n = estimate_normals(cloud_of(pos), KnnIndex(pos, 32), 32)
        angles = np.degrees(np.arccos(np.clip(np.abs(n @ ref), 0, 1)))
        assert angles.max() < 5.0

    def test_degenerate_collinear(self):
        pos = np.column_stack([np.arange(6.0), np.zeros(6), np.zeros(6)])
        n = estimate_normals(cloud_of(pos), KnnIndex(pos, 6), 4)
        np.testing.assert_array_equal(n, np.tile([0, 0, 1.0], (6, 1)))

    def test_k_below_three(self):
        pos = grid_plane(2, 3)
        with pytest.raises(InvalidKError):
            estimate_normals(cloud_of(pos), KnnIndex(pos, 4), 2)

    def test_sign_tie_prefers_z(self):
        v = np.array([[0.0, -1.0, -1.0], [1.0, -1.0, 0.0]])
        out = canonicalize_sign(v)
        np.testing.assert_array_equal(out, [[0, 1, 1], [-1, 1, 0]])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50))
    def test_unit_norm_and_translation_invariant(self, seed, dx, dy, dz):
        pos = np.random.default_rng(seed).normal(size=(40, 3))
        n1 = estimate_normals(cloud_of(pos), KnnIndex(pos, 10), 10)
        moved = pos + np.array([dx, dy, dz])
        n2 = estimate_normals(cloud_of(moved), KnnIndex(moved, 10), 10)
        np.testing.assert_allclose(np.linalg.norm(n1, axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(np.abs(np.sum(n1 * n2, axis=1)), 1.0, atol=1e-6)


class TestHeight:
    def test_constant(self):
        assert np.all(compute_height(cloud_of([[0, 0, 5.0], [1, 1, 5.0]])) == 0)

    def test_values(self):
        h = compute_height(cloud_of([[0, 0, 1.0], [0, 0, 2.0], [0, 0, 4.0]]))
        np.testing.assert_array_equal(h[:, 0], [0, 1, 3])

    def test_min_is_zero(self, rng):
        pos = rng.normal(size=(50, 3))
        assert compute_height(cloud_of(pos)).min() == 0.0


class TestDensity:
    def test_interior_grid_points_equal(self):
        g = np.stack(np.meshgrid(*[np.arange(7.0)] * 3), axis=-1).reshape(-1, 3)
        rho = estimate_density(cloud_of(g), KnnIndex(g, 8), 6)[:, 0]
        a = np.flatnonzero(np.all(g == [3, 3, 3], axis=1))[0]
        b = np.flatnonzero(np.all(g == [2, 3, 3], axis=1))[0]
        assert abs(rho[a] - rho[b]) / rho[a] < 1e-9

    def test_oracle_value(self):
        pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 2.0, 0], [0, 0, 3.0]])
        rho = estimate_density(cloud_of(pos), KnnIndex(pos, 4), 2)[:, 0]
        # point 0: second non-self neighbour at distance 2
        assert rho[0] == pytest.approx(2 / (4 / 3 * np.pi * 8))

    def test_tight_cluster_denser(self):
        rng = np.random.default_rng(2)
        pos = np.vstack([rng.normal(0, 0.1, (100, 3)), rng.normal(10, 1.0, (100, 3))])
        rho = estimate_density(cloud_of(pos), KnnIndex(pos, 9), 8)[:, 0]
        assert rho[:100].mean() > rho[100:].mean()

    def test_duplicate_point_clamped(self):
        pos = np.array([[0.0, 0, 0], [0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0], [3.0, 1, 0]])
        rho = estimate_density(cloud_of(pos), KnnIndex(pos, 3), 2)[:, 0]
        assert np.all(np.isfinite(rho))
        assert rho[0] == rho[np.isfinite(rho)].max()

    def test_needs_more_points_than_k(self):
        pos = np.eye(3)
        with pytest.raises(InvalidKError):
            estimate_density(cloud_of(pos), KnnIndex(pos, 4), 3)

    @pytest.mark.parametrize("s", [0.5, 2.0])
    def test_scaling(self, s):
        pos = np.random.default_rng(5).normal(size=(80, 3))
        r1 = estimate_density(cloud_of(pos), KnnIndex(pos, 9), 8)
        r2 = estimate_density(cloud_of(pos * s), KnnIndex(pos * s, 9), 8)
        np.testing.assert_allclose(r2, r1 * s**-3, rtol=1e-9)
        r3 = estimate_density(cloud_of(pos + 7.0), KnnIndex(pos + 7.0, 9), 8)
        np.testing.assert_allclose(r3, r1, rtol=1e-9)


class TestFeatureMatrices:
    def test_plane_constant_height(self):
        pos = grid_plane(2)
        f = geometric_feature(cloud_of(pos), KnnIndex(pos, 16), 8)
        assert f.kind is FeatureKind.GEOMETRIC
        np.testing.assert_allclose(f.values, np.tile([0, 0, 1.0, 0], (len(pos), 1)), atol=1e-9)

    def test_single_point(self):
        pos = np.zeros((1, 3))
        f = geometric_feature(cloud_of(pos), KnnIndex(pos, 4), 16)
        np.testing.assert_array_equal(f.values, [[0, 0, 1, 0]])

    def test_height_standardized(self, rng):
        pos = rng.normal(size=(200, 3))
        h = geometric_feature(cloud_of(pos), KnnIndex(pos, 17), 16).values[:, 3]
        assert abs(h.mean()) < 1e-6 and abs(h.std() - 1) < 1e-6

    def test_semantic_without_colors(self, rng):
        pos = rng.normal(size=(30, 3))
        f = semantic_feature(cloud_of(pos), KnnIndex(pos, 9), 8)
        assert f.kind is FeatureKind.SEMANTIC
        assert np.all(f.values[:, 1:] == 0)

    def test_semantic_uniform_density(self):
        g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3), axis=-1).reshape(-1, 3)
        # a periodic lattice: wrap the cloud so every point sees the same neighbourhood
        pos = g[np.all((g >= 1) & (g <= 2), axis=1)]
        f = semantic_feature(cloud_of(pos, colors=np.full((len(pos), 3), 0.5)), KnnIndex(pos, 8), 3)
        np.testing.assert_allclose(f.values[:, 0], 0.0, atol=1e-12)
        np.testing.assert_array_equal(f.values[:, 1:], 0.5)

    def test_semantic_sign_separates_density(self):
        rng = np.random.default_rng(4)
        pos = np.vstack([rng.normal(0, 0.1, (60, 3)), rng.normal(10, 1.0, (60, 3))])
        f = semantic_feature(cloud_of(pos), KnnIndex(pos, 9), 8).values[:, 0]
        assert np.all(f[:60] > 0) and np.all(f[60:] < 0)

    def test_standardize_constant(self):
        np.testing.assert_array_equal(standardize(np.full(5, 3.0)), np.zeros(5))

    def test_feature_matrix_validation(self):
        with pytest.raises(ValueError):
            FeatureMatrix(np.zeros((2, 2)), FeatureKind.GEOMETRIC, ("a",))
        with pytest.raises(ValueError):
            FeatureMatrix(np.array([[np.inf]]), FeatureKind.GEOMETRIC, ("a",))


class TestEdges:
    def test_constant_features(self, rng):
        pos = rng.normal(size=(20, 3))
        e = edge_differences(np.ones((20, 3)), KnnIndex(pos, 6), 5)
        assert e.shape == (20, 5, 6)
        assert np.all(e[:, :, 3:] == 0)

    def test_two_points(self):
        pos = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        e = edge_differences(np.array([[0.0], [3.0]]), KnnIndex(pos, 2), 1)
        np.testing.assert_array_equal(e[0, 0], [0, 3])
        np.testing.assert_array_equal(e[1, 0], [3, -3])

    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 40), st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**31))
    def test_naive_loop(self, n, k, d, seed):
        rng = np.random.default_rng(seed)
        pos = rng.normal(size=(n, 3))
        f = rng.normal(size=(n, d))
        index = KnnIndex(pos, k + 1)
        got = edge_differences(f, index, k)
        kk = min(k, n - 1)
        ref = np.zeros((n, kk, 2 * d))
        for i in range(n):
            nb = index.query(i, kk + 1)[1:]
            for j, q in enumerate(nb):
                ref[i, j, :d] = f[i]
                ref[i, j, d:] = f[q] - f[i]
        assert np.array_equal(got, ref)


class TestTransformers:
    def test_sklearn_api(self, rng):
        X = np.column_stack([rng.normal(size=(40, 3)), rng.uniform(size=(40, 3))])
        geo = GeometricFeatures(k=8).fit(X)
        assert geo.n_features_in_ == 6
        assert geo.transform(X).shape == (40, 4)
        assert SemanticFeatures(k=8).fit_transform(X).shape == (40, 4)
        assert clone(geo).get_params() == {"k": 8}

    def test_bad_width(self):
        with pytest.raises(ValueError):
            GeometricFeatures().fit(np.zeros((5, 4)))
