import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protopropel.cloud import (
    CloudFormat,
    KnnIndex,
    PointCloud,
    SceneSpec,
    build_knn_index,
    generate_scene,
    load_cloud,
    save_cloud,
)
from protopropel.exceptions import EmptyFileError, InvalidKError, MalformedLineError


def brute_knn(pos, k):
    """All-pairs scan; self first, then distance, ties to the lower index."""
    n = len(pos)
    out = []
    for i in range(n):
        d2 = [float(np.sum((pos[j] - pos[i]) ** 2)) for j in range(n)]
        order = sorted(range(n), key=lambda j: (j != i, d2[j], j))
        out.append(order[: min(k, n)])
    return np.array(out)


class TestPointCloud:
    def test_defaults_and_immutability(self):
        c = PointCloud(np.zeros((2, 3)), [0, 1])
        assert c.n_points == 2
        assert c.class_names == ("class_0", "class_1")
        with pytest.raises(ValueError):
            c.positions[0, 0] = 1.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, np.nan, 0.0]]), [0])

    def test_rejects_label_beyond_classes(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((1, 3)), [2], class_names=("a", "b"))

    def test_ignore_label_allowed(self):
        c = PointCloud(np.zeros((2, 3)), [-1, 0])
        assert c.labels[0] == -1


class TestLoadSave:
    def test_rgb_line(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("0 0 0 255 0 0 2\n")
        c = load_cloud(p, CloudFormat.XYZRGBL_TEXT)
        assert c.n_points == 1
        np.testing.assert_array_equal(c.positions[0], [0, 0, 0])
        np.testing.assert_array_equal(c.colors[0], [1, 0, 0])
        assert c.labels[0] == 2

    def test_xyzl_line(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("0 0 0 2\n")
        c = load_cloud(p, CloudFormat.XYZL_TEXT)
        assert c.colors is None
        assert c.labels[0] == 2

    def test_autodetect(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("0 0 0 2\n1 1 1 0\n")
        assert load_cloud(p).colors is None

    def test_malformed_token(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("0 0 x 2\n")
        with pytest.raises(MalformedLineError) as err:
            load_cloud(p, CloudFormat.XYZL_TEXT)
        assert err.value.line_no == 1

    def test_malformed_field_count_reports_physical_line(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("0 0 0 1\n\n0 0 0\n")
        with pytest.raises(MalformedLineError) as err:
            load_cloud(p, CloudFormat.XYZL_TEXT)
        assert err.value.line_no == 3

    def test_empty_file(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("\n\n")
        with pytest.raises(EmptyFileError):
            load_cloud(p)

    def test_round_trip(self, tmp_path, two_class_cloud):
        p = tmp_path / "scene.txt"
        save_cloud(two_class_cloud, p, CloudFormat.XYZRGBL_TEXT)
        back = load_cloud(p)
        np.testing.assert_allclose(back.positions, two_class_cloud.positions, rtol=1e-9, atol=0)
        np.testing.assert_array_equal(back.labels, two_class_cloud.labels)
        # colours are quantised to 0-255 on disk
        np.testing.assert_allclose(back.colors, two_class_cloud.colors, atol=0.5 / 255 + 1e-12)

    def test_round_trip_no_colors(self, tmp_path):
        c = PointCloud(np.array([[0.1, 0.2, 0.3], [1e-7, 2.5, -3.0]]), [0, -1])
        p = tmp_path / "xyzl.txt"
        save_cloud(c, p, CloudFormat.XYZL_TEXT)
        back = load_cloud(p)
        np.testing.assert_array_equal(back.positions, c.positions)
        np.testing.assert_array_equal(back.labels, c.labels)


class TestKnn:
    def test_single_point(self):
        idx = build_knn_index(PointCloud(np.zeros((1, 3)), [0]))
        np.testing.assert_array_equal(idx.query(0, 5), [0])

    def test_line(self):
        pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        np.testing.assert_array_equal(KnnIndex(pos).query(0, 2), [0, 1])

    def test_tie_to_lower_index(self):
        pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
        np.testing.assert_array_equal(KnnIndex(pos).query(0, 2), [0, 1])

    def test_duplicates_keep_self_first(self):
        pos = np.zeros((4, 3))
        idx = KnnIndex(pos)
        for i in range(4):
            assert idx.query(i, 4)[0] == i

    def test_matches_exhaustive_scan_200(self):
        pos = np.random.default_rng(0).uniform(size=(200, 3))
        idx, dist = KnnIndex(pos, k_max=8).query_all(8)
        np.testing.assert_array_equal(idx, brute_knn(pos, 8))
        assert np.all(np.diff(dist, axis=1) >= 0)
        assert np.all(dist[:, 0] == 0)

    def test_k_beyond_k_max(self):
        idx = KnnIndex(np.random.default_rng(0).normal(size=(20, 3)), k_max=4)
        with pytest.raises(InvalidKError):
            idx.query(0, 5)

    def test_neighbors_drop_self(self):
        pos = np.random.default_rng(1).normal(size=(30, 3))
        idx = KnnIndex(pos, k_max=6)
        nbrs, _ = idx.neighbors(5)
        assert nbrs.shape == (30, 5)
        assert not np.any(nbrs == np.arange(30)[:, None])

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)), elements=st.integers(-3, 3).map(float)),
        st.integers(1, 12),
    )
    def test_property_equals_brute_force_with_ties(self, pos, k):
        # integer grid coordinates produce many exact distance ties
        idx = KnnIndex(pos, k_max=k)
        got, _ = idx.query_all(k)
        np.testing.assert_array_equal(got, brute_knn(pos, k))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 500), st.integers(1, 16), st.integers(0, 2**31))
    def test_property_random_clouds(self, n, k, seed):
        pos = np.random.default_rng(seed).normal(size=(n, 3))
        got, _ = KnnIndex(pos, k_max=k).query_all(k)
        ref = brute_knn(pos, k) if n <= 120 else None
        if ref is not None:
            np.testing.assert_array_equal(got, ref)
        else:
            d = np.linalg.norm(pos[:, None] - pos[None], axis=2)
            rows = np.arange(n)[:, None]
            np.testing.assert_array_equal(got[:, 0], np.arange(n))
            assert np.all(np.diff(d[rows, got], axis=1) >= 0)


class TestScene:
    def test_separated_classes(self):
        spec = SceneSpec(2, (10, 10), ((0, 0, 0), (10, 0, 0)), (0.1, 0.1), seed=1)
        c = generate_scene(spec)
        assert np.bincount(c.labels).tolist() == [10, 10]
        a, b = c.positions[c.labels == 0], c.positions[c.labels == 1]
        assert np.linalg.norm(a[:, None] - b[None], axis=2).min() > 5

    def test_deterministic(self, two_class_spec):
        a, b = generate_scene(two_class_spec), generate_scene(two_class_spec)
        assert a.positions.tobytes() == b.positions.tobytes()
        assert a.colors.tobytes() == b.colors.tobytes()

    def test_long_tail_histogram(self):
        spec = SceneSpec(2, (1000, 10), ((0, 0, 0), (1, 1, 1)), (0.5, 0.5))
        assert np.bincount(generate_scene(spec).labels).tolist() == [1000, 10]

    def test_overlap_shift(self):
        spec = SceneSpec(2, (5, 5), ((0, 0, 0), (10, 0, 0)), (1, 1), overlap_shift=((0, 1, 0.25),))
        np.testing.assert_allclose(spec.shifted_centers()[1], [7.5, 0, 0])

    def test_dict_round_trip(self, two_class_spec):
        assert SceneSpec.from_dict(two_class_spec.to_dict()) == two_class_spec

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(points_per_class=(0, 5)),
            dict(cluster_stddev=(0.0, 1.0)),
            dict(overlap_shift=((0, 0, 0.5),)),
        ],
    )
    def test_invalid_specs(self, kwargs):
        base = dict(n_classes=2, points_per_class=(5, 5), cluster_centers=((0, 0, 0), (1, 0, 0)), cluster_stddev=(1, 1))
        base.update(kwargs)
        with pytest.raises(ValueError):
            SceneSpec(**base)
