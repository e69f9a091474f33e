"""Uncertainty-guided pseudo-labelling for the novel-class phase.

Uncertainty is BALD-style mutual information across ``T`` random
neighbourhood configurations: each configuration averages the frozen base
model's softmax over a random subset of a point's neighbours, weighted by a
Gaussian kernel on distance.  Thresholds scale with local density so sparse
regions accept more pseudo-labels and dense regions fewer.

Per point, the first matching rule wins:

* an existing novel annotation is kept;
* a confident base prediction (``u <= tau``, not background) is used;
* otherwise a distance-weighted vote over confident, non-background neighbours;
* otherwise the point is ignored.
"""

import csv
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .cloud import KnnIndex
from .exceptions import InvalidConfigError, ShapeMismatchError
from .network import TrainConfig, clone_for_novel
from .protoguard import SegmentationModel, _as_cloud, _as_clouds, fit_model, prepare_cloud
from .validation import IGNORE

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


class Source(IntEnum):
    KEPT_NOVEL = 0
    BASE_CONFIDENT = 1
    NEIGHBOR_VOTE = 2
    IGNORED = 3


@dataclass
class UncertaintyMap:
    u: np.ndarray
    passes: int
    k_neighbors: int
    seed: int
    sigma: float


@dataclass
class ThresholdMap:
    tau: np.ndarray
    tau0: float
    gamma: float
    tau_min: float
    tau_max: float


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    source: np.ndarray
    y_bg: int

    def counts(self):
        return {s.name: int(np.count_nonzero(self.source == s)) for s in Source}


@dataclass
class PropelConfig:
    """Pseudo-labelling hyperparameters; ``None`` entries resolve per cloud or per base class count."""

    passes: int = 8
    k: int = 16
    subset: int = None  # neighbours per configuration, self included; default k // 2
    sigma: float = None  # kernel width; default median neighbour distance
    tau0: float = None  # default 0.3 * ln(C_base)
    gamma: float = 0.5
    tau_min: float = None  # default 0.05 * ln(C_base)
    tau_max: float = None  # default 0.9 * ln(C_base)
    seed: int = 0
    balance_classes: bool = False  # weight novel-phase targets by inverse class frequency

    def thresholds(self, n_base_classes):
        scale = np.log(max(n_base_classes, 2))
        tau0 = 0.3 * scale if self.tau0 is None else self.tau0
        lo = 0.05 * scale if self.tau_min is None else self.tau_min
        hi = 0.9 * scale if self.tau_max is None else self.tau_max
        return tau0, lo, hi


def _splitmix64(x):
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return x ^ (x >> np.uint64(31))


def counter_uniform(seed, *counters):
    """Uniform [0, 1) values that depend only on ``(seed, *counters)``.

    Every output element is a hash of its own counters, so results do not
    depend on evaluation order or on how points are partitioned.
    """
    arrays = np.broadcast_arrays(*[np.asarray(c, dtype=np.uint64) for c in counters])
    with np.errstate(over="ignore"):
        x = _splitmix64(np.full(arrays[0].shape, np.uint64(seed & 0xFFFFFFFFFFFFFFFF), dtype=np.uint64))
        for arr in arrays:
            x = _splitmix64(x ^ arr)
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def sample_configurations(neighbors, passes, subset, seed):
    """Random neighbourhood configurations of shape (N, T, subset).

    ``neighbors`` is an (N, k) table whose first column is the point itself;
    every configuration keeps that column and draws ``subset - 1`` of the
    remaining ``k - 1`` without replacement.
    """
    n, k = neighbors.shape
    if subset == 1 or k == 1:
        return np.repeat(neighbors[:, None, :1], passes, axis=1)
    i = np.arange(n)[:, None, None]
    t = np.arange(passes)[None, :, None]
    j = np.arange(1, k)[None, None, :]
    keys = counter_uniform(seed, i, t, j)
    pick = np.argsort(keys, axis=2, kind="stable")[:, :, : subset - 1] + 1
    chosen = np.take_along_axis(np.broadcast_to(neighbors[:, None, :], (n, passes, k)), pick, axis=2)
    return np.concatenate([np.broadcast_to(neighbors[:, None, :1], (n, passes, 1)), chosen], axis=2)


def entropy(p, axis=-1):
    """Natural-log entropy with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def configuration_predictions(probs, positions, configs, sigma):
    """Kernel-weighted mean prediction per configuration, shape (N, T, C)."""
    d2 = ((positions[configs] - positions[:, None, None, :]) ** 2).sum(axis=3)
    # shift by the per-configuration minimum: normalisation is unchanged and the largest weight is 1
    logw = -(d2 - d2.min(axis=2, keepdims=True)) / (2.0 * sigma**2)
    w = np.exp(logw)
    w /= w.sum(axis=2, keepdims=True)
    return np.einsum("ntm,ntmc->ntc", w, probs[configs])


def bald_from_configurations(probs, positions, configs, sigma):
    """Mutual information ``H(mean_t p_t) - mean_t H(p_t)`` per point, clamped at zero."""
    p_t = configuration_predictions(probs, positions, configs, sigma)
    u = entropy(p_t.mean(axis=1)) - entropy(p_t).mean(axis=1)
    return np.maximum(u, 0.0)


def median_neighbor_distance(distances):
    """Median of non-self neighbour distances, falling back to the smallest positive one."""
    dist = np.asarray(distances)[:, 1:]
    if dist.size == 0:
        return 1.0
    med = float(np.median(dist))
    if med > 0:
        return med
    positive = dist[dist > 0]
    return float(positive.min()) if positive.size else 1.0


def bald_uncertainty(base_probs, positions, index, passes=8, k=16, subset=None, sigma=None, seed=0):
    """Per-point BALD uncertainty of a frozen model's predictions ``base_probs``."""
    probs = np.asarray(base_probs, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if probs.shape[0] != n:
        raise ShapeMismatchError("base_probs must have one row per point")
    if passes < 2:
        raise InvalidConfigError("need at least two passes")
    if k < 1:
        raise InvalidConfigError("k must be >= 1")
    subset = max(1, k // 2) if subset is None else subset
    if not 1 <= subset <= k:
        raise InvalidConfigError("subset size must satisfy 1 <= m <= k")
    if sigma is not None and not sigma > 0:
        raise InvalidConfigError("sigma must be positive")
    k_eff = min(k, n)
    subset = min(subset, k_eff)
    neighbors, distances = index.query_all(k_eff)
    if sigma is None:
        sigma = median_neighbor_distance(distances)
    configs = sample_configurations(neighbors, passes, subset, seed)
    u = bald_from_configurations(probs, positions, configs, sigma)
    return UncertaintyMap(u, passes, k_eff, seed, float(sigma))


def adaptive_threshold(u, density, tau0, gamma=0.5, tau_min=0.05, tau_max=0.9):
    """``clamp(tau0 * (rho / mean rho) ** -gamma, tau_min, tau_max)`` per point."""
    density = np.asarray(density, dtype=np.float64).reshape(-1)
    if np.any(density <= 0):
        raise InvalidConfigError("density must be positive")
    if gamma < 0:
        raise InvalidConfigError("gamma must be non-negative")
    if not 0 < tau_min <= tau_max:
        raise InvalidConfigError("thresholds need 0 < tau_min <= tau_max")
    u_arr = u.u if isinstance(u, UncertaintyMap) else np.asarray(u)
    if u_arr.shape != density.shape:
        raise ShapeMismatchError("uncertainty and density must align")
    ratio = density / density.mean()
    tau = np.clip(tau0 * ratio ** (-gamma), tau_min, tau_max)
    return ThresholdMap(tau, float(tau0), float(gamma), float(tau_min), float(tau_max))


def propagate_pseudo_labels(base_probs, novel_annotations, u, tau, index, k, y_bg):
    """Four-rule hierarchical pseudo-label decision (annotation, base, neighbours, ignore)."""
    probs = np.asarray(base_probs, dtype=np.float64)
    ann = np.asarray(novel_annotations, dtype=np.int64)
    u_arr = u.u if isinstance(u, UncertaintyMap) else np.asarray(u, dtype=np.float64)
    tau_arr = tau.tau if isinstance(tau, ThresholdMap) else np.asarray(tau, dtype=np.float64)
    n = ann.shape[0]
    if probs.shape[0] != n or u_arr.shape != (n,) or tau_arr.shape != (n,):
        raise ShapeMismatchError("base predictions, annotations, uncertainty and thresholds must align")

    base_arg = probs.argmax(axis=1)
    reliable = (u_arr <= tau_arr) & (base_arg != y_bg)
    annotated = (ann != y_bg) & (ann != IGNORE)

    labels = np.full(n, IGNORE, dtype=np.int64)
    source = np.full(n, Source.IGNORED, dtype=np.int64)

    labels[annotated] = ann[annotated]
    source[annotated] = Source.KEPT_NOVEL

    rule_a = ~annotated & reliable
    labels[rule_a] = base_arg[rule_a]
    source[rule_a] = Source.BASE_CONFIDENT

    rest = np.flatnonzero(~annotated & ~reliable)
    if rest.size and n > 1:
        nbrs, dist = index.neighbors(k)
        nbrs, dist = nbrs[rest], dist[rest]
        ok = reliable[nbrs]
        weights = np.where(ok, 1.0 / np.maximum(dist, 1e-12), 0.0)
        n_cls = max(probs.shape[1], int(base_arg.max()) + 1)
        votes = np.zeros((rest.size, n_cls))
        np.add.at(votes, (np.repeat(np.arange(rest.size), nbrs.shape[1]), base_arg[nbrs].ravel()), weights.ravel())
        has = ok.any(axis=1)
        winners = votes.argmax(axis=1)  # first maximum, i.e. lowest class index on ties
        labels[rest[has]] = winners[has]
        source[rest[has]] = Source.NEIGHBOR_VOTE
    return PseudoLabelSet(labels, source, int(y_bg))


def write_pseudo_label_csv(path, uncertainty, thresholds, pseudo):
    """Debug dump with columns ``point_id,u,tau,source,label``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["point_id", "u", "tau", "source", "label"])
        for i, (uu, tt, ss, ll) in enumerate(zip(uncertainty.u, thresholds.tau, pseudo.source, pseudo.labels)):
            writer.writerow([i, repr(float(uu)), repr(float(tt)), Source(int(ss)).name, int(ll)])


def clone_model_for_novel(base, n_new_classes, freeze_base_outputs=False, seed=None):
    """Novel-phase model: widened network, copied fusion, bank with frozen base rows.

    With ``freeze_base_outputs`` only the new classifier outputs train
    (freeze-and-add); otherwise everything is trainable.
    """
    net = clone_for_novel(base.network, n_new_classes, seed=seed)
    n_old = base.network.n_classes
    if freeze_base_outputs:
        net.frozen_extractor = True
        net.frozen_outputs = n_old
    if not base.use_prototypes:
        return SegmentationModel(net)
    fusion = base.fusion.copy()
    fusion.frozen = True
    bank = base.bank.copy()
    bank.frozen[:] = True
    bank = bank.expand(n_new_classes)
    bank.momentum.learnable = not freeze_base_outputs
    return SegmentationModel(net, fusion, bank)


@dataclass
class NovelPhaseResult:
    model: SegmentationModel
    pseudo_labels: list  # per cloud PseudoLabelSet, or None without pseudo-labelling
    uncertainty: list
    thresholds: list


def pseudo_label_cloud(base, ctx, positions, annotations, y_bg, propel_config):
    """Run uncertainty, thresholds and label propagation for one cloud against the frozen base."""
    probs = base.predict_proba_ctx(ctx)
    cfg = propel_config
    index = ctx.index
    if index.k_max < min(cfg.k + 1, ctx.n_points):
        index = KnnIndex(positions, k_max=cfg.k + 1)
    umap = bald_uncertainty(probs, positions, index, cfg.passes, cfg.k, cfg.subset, cfg.sigma, cfg.seed)
    tau0, lo, hi = cfg.thresholds(base.n_classes)
    tmap = adaptive_threshold(umap, ctx.density, tau0, cfg.gamma, lo, hi)
    pls = propagate_pseudo_labels(probs, annotations, umap, tmap, index, cfg.k, y_bg)
    return umap, tmap, pls


def train_novel(
    base,
    novel_clouds,
    annotations,
    n_new_classes,
    y_bg,
    train_config=None,
    propel_config=None,
    mode="propel",
    k=16,
    update_novel_prototypes=True,
):
    """Novel-phase training against a frozen ``base`` model.

    ``mode`` is ``"propel"`` (pseudo-labels plus annotations), ``"ft"``
    (annotations only, everything trainable) or ``"fa"`` (annotations only,
    base outputs and extractor frozen).  ``base`` itself is never modified.
    """
    if mode not in ("propel", "ft", "fa"):
        raise InvalidConfigError(f"unknown novel-phase mode {mode!r}")
    train_config = train_config or TrainConfig()
    propel_config = propel_config or PropelConfig(k=k)
    novel = clone_model_for_novel(base, n_new_classes, freeze_base_outputs=(mode == "fa"), seed=train_config.seed + 1)
    if novel.use_prototypes and not update_novel_prototypes:
        novel.bank.momentum.learnable = False
    result = NovelPhaseResult(novel, [], [], [])
    if not novel_clouds:
        return result
    n_old = base.network.n_classes
    contexts, loss_labels, proto_labels = [], [], []
    for cloud, ann in zip(novel_clouds, annotations):
        ann = np.asarray(ann, dtype=np.int64)
        if ann.shape != (cloud.n_points,):
            raise ShapeMismatchError("annotations must have one entry per point")
        ctx = prepare_cloud(cloud, k)
        contexts.append(ctx)
        annotated = (ann != y_bg) & (ann != IGNORE)
        if np.any(ann[annotated] < n_old) or np.any(ann[annotated] >= n_old + n_new_classes):
            raise ValueError("novel annotations must use the new class ids or y_bg")
        plain_targets = np.where(annotated, ann, IGNORE)
        proto_labels.append(plain_targets if update_novel_prototypes else None)
        if mode == "propel":
            umap, tmap, pls = pseudo_label_cloud(base, ctx, cloud.positions, ann, y_bg, propel_config)
            result.uncertainty.append(umap)
            result.thresholds.append(tmap)
            result.pseudo_labels.append(pls)
            loss_labels.append(pls.labels)
        else:
            loss_labels.append(plain_targets)
    weights = class_balance_weights(loss_labels) if propel_config.balance_classes else None
    fit_model(novel, contexts, loss_labels, proto_labels, train_config, weights=weights)
    return result


def class_balance_weights(label_sets):
    """Per-point weights ``1 / count(label)`` pooled over all clouds, rescaled to mean 1.

    IGNORE points get weight 0; they never reach the loss anyway.
    """
    pooled = np.concatenate([np.asarray(lab) for lab in label_sets])
    active = pooled[pooled != IGNORE]
    if active.size == 0:
        return [np.zeros(len(lab)) for lab in label_sets]
    classes, counts = np.unique(active, return_counts=True)
    inv = dict(zip(classes.tolist(), (1.0 / counts).tolist()))
    scale = active.size / sum(inv[c] * n for c, n in zip(classes.tolist(), counts.tolist()))
    out = []
    for lab in label_sets:
        lab = np.asarray(lab)
        out.append(np.array([scale * inv[c] if c != IGNORE else 0.0 for c in lab.tolist()]))
    return out


class PropelSegmenter(ClassifierMixin, BaseEstimator):
    """Novel-phase estimator built on a fitted :class:`~protopropel.protoguard.ProtoGuardSegmenter`.

    ``fit`` takes novel clouds and, via ``y``, per-cloud annotation arrays
    that use the new class ids ``n_base .. n_base + n_new_classes - 1`` and
    ``y_bg`` for everything else.  When ``y`` is omitted the clouds' own
    labels are used, keeping only the new classes.
    """

    def __init__(
        self,
        base_estimator=None,
        n_new_classes=1,
        mode="propel",
        passes=8,
        subset=None,
        sigma=None,
        tau0=None,
        gamma=0.5,
        tau_min=None,
        tau_max=None,
        learning_rate=0.5,
        epochs=100,
        batch_points=0,
        l2=0.0,
        random_state=0,
    ):
        self.base_estimator = base_estimator
        self.n_new_classes = n_new_classes
        self.mode = mode
        self.passes = passes
        self.subset = subset
        self.sigma = sigma
        self.tau0 = tau0
        self.gamma = gamma
        self.tau_min = tau_min
        self.tau_max = tau_max
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_points = batch_points
        self.l2 = l2
        self.random_state = random_state

    def fit(self, X, y=None):
        check_is_fitted(self.base_estimator, "model_")
        clouds = _as_clouds(X)
        base = self.base_estimator.model_
        n_base = base.network.n_classes
        n_all = n_base + self.n_new_classes
        self.y_bg_ = n_all
        if y is None:
            y = [np.where((c.labels >= n_base) & (c.labels < n_all), c.labels, self.y_bg_) for c in clouds]
        k = self.base_estimator.k
        seed = int(self.random_state or 0)
        result = train_novel(
            base,
            clouds,
            y,
            self.n_new_classes,
            self.y_bg_,
            TrainConfig(self.learning_rate, self.epochs, self.batch_points, self.l2, seed),
            PropelConfig(self.passes, k, self.subset, self.sigma, self.tau0, self.gamma, self.tau_min, self.tau_max, seed),
            mode=self.mode,
            k=k,
        )
        self.model_ = result.model
        self.pseudo_labels_ = result.pseudo_labels
        self.classes_ = np.arange(n_all)
        self.n_classes_ = n_all
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba_ctx(prepare_cloud(_as_cloud(X), self.base_estimator.k))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
