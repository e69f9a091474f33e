"""Hand-crafted geometric and semantic point features.

Geometric features are ``[n_x, n_y, n_z, height]`` and semantic features are
``[log-density, r, g, b]``; height and log-density are standardized per
cloud.  ``edge_differences`` builds EdgeConv-style ``(f_i, f_j - f_i)`` pairs.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .cloud import KnnIndex, PointCloud
from .exceptions import InvalidKError
from .validation import check_k, check_matrix

_DEGENERATE_NORMAL = np.array([0.0, 0.0, 1.0])
# relative eigenvalue gap below which the smallest-eigenvalue direction is not unique
_DEGENERATE_RTOL = 1e-10


class FeatureKind(str, Enum):
    GEOMETRIC = "GEOMETRIC"
    SEMANTIC = "SEMANTIC"
    EMBEDDING = "EMBEDDING"


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    kind: FeatureKind
    column_names: tuple

    def __post_init__(self):
        vals = check_matrix(self.values, name="feature values")
        if vals.shape[1] < 1:
            raise ValueError("a feature matrix needs at least one column")
        if len(self.column_names) != vals.shape[1]:
            raise ValueError("column_names length must match the feature width")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "kind", FeatureKind(self.kind))
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def width(self):
        return self.values.shape[1]


def _positions(cloud):
    return cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def canonicalize_sign(normals):
    """Flip each row so its largest-magnitude component is positive.

    Magnitude ties prefer z, then y, then x.
    """
    normals = np.array(normals, dtype=np.float64, copy=True)
    mag = np.abs(normals)
    top = mag.max(axis=1, keepdims=True)
    is_top = mag >= top - 1e-12
    # first hit scanning z, y, x
    axis = np.where(is_top[:, 2], 2, np.where(is_top[:, 1], 1, 0))
    sign = np.sign(normals[np.arange(len(normals)), axis])
    sign[sign == 0] = 1.0
    return normals * sign[:, None]


def estimate_normals(cloud, index, k):
    """PCA normals from the ``k``-neighbourhood (self included) of each point.

    Neighbourhoods whose smallest-eigenvalue direction is not unique
    (fewer than three points, collinear or coincident points) get ``(0, 0, 1)``.
    """
    k = check_k(k, 3, InvalidKError)
    pos = _positions(cloud)
    n = pos.shape[0]
    out = np.tile(_DEGENERATE_NORMAL, (n, 1))
    if n < 3:
        return out
    idx, _ = index.query_all(min(k, n))
    nbrs = pos[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / idx.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    scale = np.maximum(evals[:, 2], np.finfo(float).tiny)
    ok = (evals[:, 1] - evals[:, 0]) > _DEGENERATE_RTOL * scale
    normals = evecs[:, :, 0]
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    out[ok] = canonicalize_sign(normals[ok])
    return out


def compute_height(cloud):
    pos = _positions(cloud)
    return (pos[:, 2] - pos[:, 2].min())[:, None]


def estimate_density(cloud, index, k):
    """Ball density ``k / (4/3 pi r_k^3)`` with ``r_k`` the k-th non-self neighbour distance.

    Points whose ``r_k`` is zero (duplicates) take the largest finite density
    in the cloud.
    """
    k = check_k(k, 2, InvalidKError)
    pos = _positions(cloud)
    n = pos.shape[0]
    if n <= k:
        raise InvalidKError(f"density needs N > k, got N={n}, k={k}")
    _, dist = index.query_all(k + 1)
    r = dist[:, k]
    with np.errstate(divide="ignore"):
        rho = k / ((4.0 / 3.0) * np.pi * r**3)
    finite = np.isfinite(rho)
    fill = rho[finite].max() if finite.any() else 1.0
    rho[~finite] = fill
    return rho[:, None]


def standardize(column):
    """Zero-mean, unit-variance scaling; (near-)constant columns become zeros."""
    column = np.asarray(column, dtype=np.float64)
    mean = column.mean()
    std = column.std()
    if std <= 1e-9 * max(1.0, abs(mean)):
        return np.zeros_like(column)
    return (column - mean) / std


def geometric_feature(cloud, index, k):
    """``[n_x, n_y, n_z, standardized height]``; ``k`` is clamped to the cloud size."""
    pos = _positions(cloud)
    n = pos.shape[0]
    normals = estimate_normals(pos, index, max(3, min(k, max(n, 3))))
    height = standardize(compute_height(pos)[:, 0])
    return FeatureMatrix(
        np.column_stack([normals, height]),
        FeatureKind.GEOMETRIC,
        ("normal_x", "normal_y", "normal_z", "height"),
    )


def semantic_feature(cloud, index, k):
    """``[standardized log density, r, g, b]``; colours fall back to zeros."""
    pos = _positions(cloud)
    n = pos.shape[0]
    if n > 2:
        rho = estimate_density(pos, index, max(2, min(k, n - 1)))[:, 0]
        log_rho = standardize(np.log(rho))
    else:
        log_rho = np.zeros(n)
    colors = getattr(cloud, "colors", None)
    if colors is None:
        colors = np.zeros((n, 3))
    return FeatureMatrix(
        np.column_stack([log_rho, colors]),
        FeatureKind.SEMANTIC,
        ("log_density", "red", "green", "blue"),
    )


def edge_differences(feats, index, k):
    """Edge tensor of shape (N, k, 2D): ``concat(f_i, f_q - f_i)`` over non-self neighbours q."""
    values = feats.values if isinstance(feats, FeatureMatrix) else check_matrix(feats, name="features")
    k = check_k(k, 1, InvalidKError)
    nbrs, _ = index.neighbors(k)
    center = np.broadcast_to(values[:, None, :], (values.shape[0], nbrs.shape[1], values.shape[1]))
    return np.concatenate([center, values[nbrs] - center], axis=2)


class _CloudFeatureTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer over an (N, 3) xyz or (N, 6) xyz+rgb array."""

    def __init__(self, k=16):
        self.k = k

    def fit(self, X, y=None):
        X = check_matrix(X, name="X")
        if X.shape[1] not in (3, 6):
            raise ValueError("X must have 3 (xyz) or 6 (xyz + rgb) columns")
        self.n_features_in_ = X.shape[1]
        return self

    def _cloud(self, X):
        X = check_matrix(X, name="X")
        colors = X[:, 3:6] if X.shape[1] == 6 else None
        cloud = PointCloud(X[:, :3], np.full(len(X), -1), colors=colors)
        return cloud, KnnIndex(cloud.positions, k_max=self.k + 1)


class GeometricFeatures(_CloudFeatureTransformer):
    def transform(self, X):
        cloud, index = self._cloud(X)
        return geometric_feature(cloud, index, self.k).values


class SemanticFeatures(_CloudFeatureTransformer):
    def transform(self, X):
        cloud, index = self._cloud(X)
        return semantic_feature(cloud, index, self.k).values
