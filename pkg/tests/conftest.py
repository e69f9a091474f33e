import numpy as np
import pytest

from protopropel.cloud import PointCloud, SceneSpec, generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_class_spec():
    return SceneSpec(
        n_classes=2,
        points_per_class=(60, 60),
        cluster_centers=((0.0, 0.0, 0.0), (4.0, 0.0, 1.0)),
        cluster_stddev=(0.3, 0.3),
        color_means=((0.9, 0.1, 0.1), (0.1, 0.1, 0.9)),
        seed=3,
    )


@pytest.fixture
def two_class_cloud(two_class_spec):
    return generate_scene(two_class_spec)


def random_cloud(rng, n, n_classes=3, colors=True):
    pos = rng.normal(size=(n, 3))
    labels = rng.integers(0, n_classes, size=n)
    col = rng.uniform(size=(n, 3)) if colors else None
    return PointCloud(pos, labels, colors=col, class_names=tuple(f"c{i}" for i in range(n_classes)))


@pytest.fixture(scope="session")
def three_class_spec():
    return SceneSpec(
        n_classes=3,
        points_per_class=(80, 80, 40),
        cluster_centers=((0.0, 0.0, 0.0), (4.0, 0.0, 1.0), (0.0, 4.0, 2.0)),
        cluster_stddev=(0.4, 0.4, 0.3),
        color_means=((0.9, 0.1, 0.1), (0.1, 0.1, 0.9), (0.1, 0.8, 0.1)),
        seed=5,
    )
