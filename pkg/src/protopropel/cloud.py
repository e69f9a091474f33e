"""Point-cloud container, kNN indexing, text I/O and a synthetic scene generator."""

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import EmptyFileError, InvalidKError, MalformedLineError
from .validation import IGNORE, check_labels, check_positions

DEFAULT_K_MAX = 32


class CloudFormat(str, Enum):
    XYZRGBL_TEXT = "XYZRGBL_TEXT"
    XYZL_TEXT = "XYZL_TEXT"

    @property
    def n_fields(self):
        return 7 if self is CloudFormat.XYZRGBL_TEXT else 4


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable point cloud.

    Parameters
    ----------
    positions : ndarray of shape (N, 3)
        Coordinates in meters.
    labels : ndarray of shape (N,)
        Class ids in ``0..C-1`` or ``IGNORE`` (-1).
    colors : ndarray of shape (N, 3) or None
        RGB in ``[0, 1]``.
    class_names : list of str
        One name per class; its length defines ``C``.
    """

    positions: np.ndarray
    labels: np.ndarray
    colors: Optional[np.ndarray] = None
    class_names: tuple = field(default_factory=tuple)

    def __post_init__(self):
        pos = check_positions(self.positions)
        if pos.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        names = tuple(self.class_names)
        labels = check_labels(self.labels, pos.shape[0], len(names) if names else None)
        if not names:
            names = tuple(f"class_{c}" for c in range(int(labels.max(initial=IGNORE)) + 1))
        colors = self.colors
        if colors is not None:
            colors = np.asarray(colors, dtype=np.float64)
            if colors.shape != pos.shape:
                raise ValueError(f"colors must have shape {pos.shape}, got {colors.shape}")
            if not np.all(np.isfinite(colors)) or colors.min() < 0.0 or colors.max() > 1.0:
                raise ValueError("colors must be finite and lie in [0, 1]")
            colors = _frozen(colors)
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "class_names", names)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def n_points(self):
        return self.positions.shape[0]

    @property
    def n_classes(self):
        return len(self.class_names)

    def with_labels(self, labels, class_names=None):
        return replace(self, labels=labels, class_names=self.class_names if class_names is None else class_names)


class KnnIndex:
    """Exact k-nearest-neighbour table over a fixed set of positions.

    Neighbour lists always start with the query point itself; the rest are
    ordered by Euclidean distance with ties going to the lower point index.
    The full table up to ``k_max`` is computed once at construction, so the
    object is read-only afterwards.
    """

    def __init__(self, positions, k_max=DEFAULT_K_MAX):
        pos = check_positions(positions)
        self.positions = _frozen(pos)
        n = pos.shape[0]
        self.n_points = n
        self.k_max = n if k_max is None else max(1, min(int(k_max), n))
        idx, dist = self._build(pos, self.k_max)
        self._indices = _frozen(idx)
        self._distances = _frozen(dist)

    @staticmethod
    def _order(pos, row, cand):
        d2 = np.sum((pos[cand] - pos[row]) ** 2, axis=1)
        not_self = cand != row
        return cand[np.lexsort((cand, d2, not_self))], d2

    def _build(self, pos, k):
        n = pos.shape[0]
        tree = cKDTree(pos)
        kk = min(n, k + 1)
        _, cand = tree.query(pos, k=kk)
        cand = np.asarray(cand).reshape(n, kk)
        d2 = np.sum((pos[cand] - pos[:, None, :]) ** 2, axis=2)
        not_self = cand != np.arange(n)[:, None]
        # row-wise lexsort on (not_self, d2, index)
        order = np.lexsort((cand, d2, not_self), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        if kk < n:
            # a row is exact only if nothing outside the candidate set can tie the k-th neighbour
            boundary = d2[:, k - 1]
            worst = d2.max(axis=1)
            unsafe = ~(boundary < worst * (1.0 - 1e-12))
            unsafe |= cand[:, 0] != np.arange(n)
            everything = np.arange(n)
            for row in np.flatnonzero(unsafe):
                ordered, full_d2 = self._order(pos, row, everything)
                cand[row] = ordered[:kk]
                d2[row] = full_d2[ordered[:kk]]
        return cand[:, :k].astype(np.int64), np.sqrt(d2[:, :k])

    def _check_k(self, k):
        k = int(k)
        if k < 1:
            raise InvalidKError(f"k must be >= 1, got {k}")
        k = min(k, self.n_points)
        if k > self.k_max:
            raise InvalidKError(f"k={k} exceeds the index's k_max={self.k_max}")
        return k

    def query(self, i, k):
        """Indices of the ``min(k, N)`` nearest neighbours of point ``i`` (self first)."""
        return self._indices[i, : self._check_k(k)].copy()

    def query_all(self, k):
        """Neighbour indices and distances for every point, each of shape (N, min(k, N))."""
        k = self._check_k(k)
        return self._indices[:, :k].copy(), self._distances[:, :k].copy()

    def neighbors(self, k):
        """Like :meth:`query_all` but with the point itself removed.

        Returns at most ``N - 1`` columns; a single-point cloud falls back to
        using the point as its own neighbour so the result is never empty.
        """
        if self.n_points == 1:
            return np.zeros((1, 1), dtype=np.int64), np.zeros((1, 1))
        k = min(int(k), self.n_points - 1)
        idx, dist = self.query_all(k + 1)
        return idx[:, 1:], dist[:, 1:]


def build_knn_index(cloud, k_max=DEFAULT_K_MAX):
    positions = cloud.positions if isinstance(cloud, PointCloud) else cloud
    return KnnIndex(positions, k_max=k_max)


def _parse_line(tokens, fmt, line_no):
    if len(tokens) != fmt.n_fields:
        raise MalformedLineError(line_no, f"expected {fmt.n_fields} fields, got {len(tokens)}")
    try:
        xyz = [float(t) for t in tokens[:3]]
        rest = [int(t) for t in tokens[3:]]
    except ValueError as exc:
        raise MalformedLineError(line_no, str(exc)) from None
    if not all(np.isfinite(xyz)):
        raise MalformedLineError(line_no, "non-finite coordinate")
    if fmt is CloudFormat.XYZRGBL_TEXT and not all(0 <= v <= 255 for v in rest[:3]):
        raise MalformedLineError(line_no, "color channel outside 0-255")
    if rest[-1] < IGNORE:
        raise MalformedLineError(line_no, "label below -1")
    return xyz, rest


def load_cloud(path, format=None, class_names=None):
    """Read a whitespace-separated point file.

    ``format`` may be a :class:`CloudFormat` (or its name); when omitted it is
    inferred from the field count of the first non-empty line.
    """
    lines = Path(path).read_text().splitlines()
    fmt = CloudFormat(format) if format is not None else None
    xyz, rgb, labels = [], [], []
    for line_no, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if fmt is None:
            if len(tokens) == 7:
                fmt = CloudFormat.XYZRGBL_TEXT
            elif len(tokens) == 4:
                fmt = CloudFormat.XYZL_TEXT
            else:
                raise MalformedLineError(line_no, f"cannot infer format from {len(tokens)} fields")
        p, rest = _parse_line(tokens, fmt, line_no)
        xyz.append(p)
        labels.append(rest[-1])
        if fmt is CloudFormat.XYZRGBL_TEXT:
            rgb.append(rest[:3])
    if not xyz:
        raise EmptyFileError(f"{path} contains no points")
    colors = np.asarray(rgb, dtype=np.float64) / 255.0 if rgb else None
    return PointCloud(
        positions=np.asarray(xyz, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        colors=colors,
        class_names=tuple(class_names) if class_names else (),
    )


def save_cloud(cloud, path, format=None):
    """Write ``cloud`` as text; coordinates keep 17 significant digits."""
    if format is None:
        fmt = CloudFormat.XYZRGBL_TEXT if cloud.colors is not None else CloudFormat.XYZL_TEXT
    else:
        fmt = CloudFormat(format)
    rows = []
    colors = None
    if fmt is CloudFormat.XYZRGBL_TEXT:
        src = cloud.colors if cloud.colors is not None else np.zeros_like(cloud.positions)
        colors = np.rint(src * 255.0).astype(np.int64)
    for i in range(cloud.n_points):
        x, y, z = cloud.positions[i]
        parts = [f"{x:.17g}", f"{y:.17g}", f"{z:.17g}"]
        if colors is not None:
            parts += [str(int(v)) for v in colors[i]]
        parts.append(str(int(cloud.labels[i])))
        rows.append(" ".join(parts))
    Path(path).write_text("\n".join(rows) + "\n")


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a synthetic scene of isotropic Gaussian class clusters.

    ``overlap_shift`` entries ``(a, b, fraction)`` move class ``b``'s center
    the given fraction of the way toward class ``a``'s center.
    """

    n_classes: int
    points_per_class: Sequence[int]
    cluster_centers: Sequence[Sequence[float]]
    cluster_stddev: Sequence[float]
    overlap_shift: Sequence[tuple] = ()
    color_means: Optional[Sequence[Sequence[float]]] = None
    color_stddev: float = 0.05
    seed: int = 0
    class_names: Sequence[str] = ()

    def __post_init__(self):
        # normalise sequences to tuples so equality and hashing ignore list/tuple differences
        object.__setattr__(self, "points_per_class", tuple(int(n) for n in self.points_per_class))
        object.__setattr__(self, "cluster_centers", tuple(tuple(float(v) for v in row) for row in self.cluster_centers))
        object.__setattr__(self, "cluster_stddev", tuple(float(s) for s in self.cluster_stddev))
        object.__setattr__(self, "overlap_shift", tuple((int(a), int(b), float(f)) for a, b, f in self.overlap_shift))
        if self.color_means is not None:
            object.__setattr__(self, "color_means", tuple(tuple(float(v) for v in row) for row in self.color_means))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        c = int(self.n_classes)
        if c < 1:
            raise ValueError("n_classes must be >= 1")
        if len(self.points_per_class) != c or any(int(n) < 1 for n in self.points_per_class):
            raise ValueError("points_per_class needs n_classes entries, all >= 1")
        if np.asarray(self.cluster_centers, dtype=float).shape != (c, 3):
            raise ValueError("cluster_centers must have shape (n_classes, 3)")
        if len(self.cluster_stddev) != c or any(s <= 0 for s in self.cluster_stddev):
            raise ValueError("cluster_stddev needs n_classes positive entries")
        if self.color_means is not None and np.asarray(self.color_means, dtype=float).shape != (c, 3):
            raise ValueError("color_means must have shape (n_classes, 3)")
        if self.color_stddev < 0:
            raise ValueError("color_stddev must be non-negative")
        for a, b, frac in self.overlap_shift:
            if not (0 <= a < c and 0 <= b < c and a != b):
                raise ValueError(f"invalid overlap pair ({a}, {b})")
            if not 0.0 <= frac <= 1.0:
                raise ValueError("overlap fraction must lie in [0, 1]")

    def shifted_centers(self):
        centers = np.array(self.cluster_centers, dtype=np.float64)
        for a, b, frac in self.overlap_shift:
            centers[b] = centers[b] + frac * (centers[a] - centers[b])
        return centers

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def to_dict(self):
        return {
            "n_classes": int(self.n_classes),
            "points_per_class": [int(n) for n in self.points_per_class],
            "cluster_centers": [[float(v) for v in row] for row in self.cluster_centers],
            "cluster_stddev": [float(s) for s in self.cluster_stddev],
            "overlap_shift": [[int(a), int(b), float(f)] for a, b, f in self.overlap_shift],
            "color_means": None
            if self.color_means is None
            else [[float(v) for v in row] for row in self.color_means],
            "color_stddev": float(self.color_stddev),
            "seed": int(self.seed),
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["overlap_shift"] = tuple(tuple(t) for t in data.get("overlap_shift") or ())
        data["class_names"] = tuple(data.get("class_names") or ())
        return cls(**data)


def generate_scene(spec):
    """Sample a labelled cloud from ``spec``; a pure function of the spec."""
    rng = np.random.default_rng(spec.seed)
    centers = spec.shifted_centers()
    positions, colors, labels = [], [], []
    for c in range(spec.n_classes):
        n = int(spec.points_per_class[c])
        positions.append(centers[c] + rng.normal(0.0, spec.cluster_stddev[c], size=(n, 3)))
        if spec.color_means is not None:
            col = np.asarray(spec.color_means[c], dtype=np.float64) + rng.normal(0.0, spec.color_stddev, size=(n, 3))
            colors.append(np.clip(col, 0.0, 1.0))
        labels.append(np.full(n, c, dtype=np.int64))
    names = tuple(spec.class_names) or tuple(f"class_{c}" for c in range(spec.n_classes))
    return PointCloud(
        positions=np.concatenate(positions),
        labels=np.concatenate(labels),
        colors=np.concatenate(colors) if colors else None,
        class_names=names,
    )
