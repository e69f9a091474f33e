"""Prototype-enhanced base-phase segmentation.

Each class keeps a geometric and a semantic prototype.  Prototypes start as
class means and then move toward each batch's class mean with a momentum
``m = m_min + (m_max - m_min) * sigmoid(a * s + b)``, where ``s`` is the
highest cosine similarity between the prototype and another class's batch
mean.  ``a`` and ``b`` are trained by the segmentation loss.

Per point, the geometric and semantic streams (feature concatenated with the
prototype of the point's assigned class) are projected to a shared width and
mixed by a two-way attention softmax.  The result is paired with every edge
feature ``(f_i, f_j - f_i)`` of the point, passed through a tanh layer and
max-pooled over neighbours before entering the network.
"""

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .cloud import KnnIndex, PointCloud
from .exceptions import InvalidConfigError, ShapeMismatchError, UninitializedPrototypeError
from .features import FeatureKind, FeatureMatrix, edge_differences, estimate_density, geometric_feature, semantic_feature
from .network import (
    Network,
    TrainConfig,
    apply_freeze,
    cross_entropy,
    finite_difference,
    init_network,
    l2_penalty,
    network_backward,
    network_forward,
    relative_error,
    uniform_init,
)
from .validation import IGNORE

STREAMS = ("geo", "sem")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class MomentumParams:
    """Bounds and learnable factors of the adaptive momentum map.

    ``ab`` holds ``(a, b)`` as a length-2 array so it can be trained in place.
    ``direction="increasing"`` gives confusable prototypes (high similarity)
    the larger momentum; ``"decreasing"`` reverses that.
    """

    ab: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))
    m_min: float = 0.01
    m_max: float = 0.5
    direction: str = "increasing"
    learnable: bool = True

    def __post_init__(self):
        self.ab = np.array(self.ab, dtype=np.float64).reshape(2)
        if not (0.0 <= self.m_min < self.m_max <= 1.0):
            raise ValueError("momentum bounds must satisfy 0 <= m_min < m_max <= 1")
        if self.direction not in ("increasing", "decreasing"):
            raise ValueError("direction must be 'increasing' or 'decreasing'")

    @property
    def a(self):
        return float(self.ab[0])

    @property
    def b(self):
        return float(self.ab[1])

    def signed(self, s):
        return s if self.direction == "increasing" else -s


def adaptive_momentum(similarity, params):
    """Momentum in ``[m_min, m_max]`` for a similarity in ``[-1, 1]``."""
    s = params.signed(np.asarray(similarity, dtype=np.float64))
    return params.m_min + (params.m_max - params.m_min) * sigmoid(params.ab[0] * s + params.ab[1])


@dataclass
class PrototypeBank:
    geo: np.ndarray
    sem: np.ndarray
    initialized: np.ndarray
    update_count: np.ndarray
    momentum: MomentumParams = field(default_factory=MomentumParams)
    frozen: np.ndarray = None  # per-class flag; frozen rows are never changed
    spread: np.ndarray = None  # per joint dimension within-class variance used by assign_classes

    def __post_init__(self):
        c = self.geo.shape[0]
        if self.sem.shape[0] != c:
            raise ShapeMismatchError("geo and sem banks need the same number of classes")
        d = self.geo.shape[1] + self.sem.shape[1]
        self.spread = np.ones(d) if self.spread is None else np.asarray(self.spread, dtype=np.float64)
        if self.spread.shape != (d,):
            raise ShapeMismatchError(f"spread must have {d} entries")
        self.initialized = np.asarray(self.initialized, dtype=bool)
        self.update_count = np.asarray(self.update_count, dtype=np.int64)
        self.frozen = np.zeros(c, dtype=bool) if self.frozen is None else np.asarray(self.frozen, dtype=bool)

    @classmethod
    def empty(cls, n_classes, d_geo=4, d_sem=4, momentum=None):
        return cls(
            geo=np.zeros((n_classes, d_geo)),
            sem=np.zeros((n_classes, d_sem)),
            initialized=np.zeros(n_classes, dtype=bool),
            update_count=np.zeros(n_classes, dtype=np.int64),
            momentum=momentum or MomentumParams(),
        )

    @property
    def n_classes(self):
        return self.geo.shape[0]

    def stream(self, name):
        return self.geo if name == "geo" else self.sem

    def copy(self):
        return copy.deepcopy(self)

    def freeze_all(self):
        self.frozen[:] = True
        self.momentum.learnable = False
        return self

    def expand(self, n_new):
        """Append ``n_new`` uninitialized, unfrozen classes."""
        out = self.copy()
        out.geo = np.vstack([out.geo, np.zeros((n_new, out.geo.shape[1]))])
        out.sem = np.vstack([out.sem, np.zeros((n_new, out.sem.shape[1]))])
        out.initialized = np.concatenate([out.initialized, np.zeros(n_new, dtype=bool)])
        out.update_count = np.concatenate([out.update_count, np.zeros(n_new, dtype=np.int64)])
        out.frozen = np.concatenate([out.frozen, np.zeros(n_new, dtype=bool)])
        return out

    def state_dict(self, prefix="bank."):
        return {
            prefix + "geo": self.geo.copy(),
            prefix + "sem": self.sem.copy(),
            prefix + "initialized": self.initialized.copy(),
            prefix + "update_count": self.update_count.copy(),
            prefix + "frozen": self.frozen.copy(),
            prefix + "spread": self.spread.copy(),
            prefix + "ab": self.momentum.ab.copy(),
            prefix + "bounds": np.array([self.momentum.m_min, self.momentum.m_max]),
            prefix + "mode": np.array(
                [self.momentum.direction == "increasing", self.momentum.learnable], dtype=np.int64
            ),
        }

    @classmethod
    def from_state_dict(cls, state, prefix="bank."):
        inc, learn = (int(v) for v in state[prefix + "mode"])
        lo, hi = (float(v) for v in state[prefix + "bounds"])
        momentum = MomentumParams(
            np.array(state[prefix + "ab"]), lo, hi, "increasing" if inc else "decreasing", bool(learn)
        )
        return cls(
            geo=np.array(state[prefix + "geo"]),
            sem=np.array(state[prefix + "sem"]),
            initialized=np.array(state[prefix + "initialized"]),
            update_count=np.array(state[prefix + "update_count"]),
            momentum=momentum,
            frozen=np.array(state[prefix + "frozen"]),
            spread=np.array(state[prefix + "spread"]),
        )


def class_means(values, labels, n_classes):
    """Per-class mean rows and a presence mask; labels outside ``0..C-1`` are skipped."""
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    valid = (labels >= 0) & (labels < n_classes)
    counts = np.bincount(labels[valid], minlength=n_classes).astype(np.float64)
    sums = np.zeros((n_classes, values.shape[1]))
    np.add.at(sums, labels[valid], values[valid])
    present = counts > 0
    means = np.zeros_like(sums)
    means[present] = sums[present] / counts[present, None]
    return means, present


def _stream_of(features):
    if isinstance(features, FeatureMatrix):
        if features.kind is FeatureKind.GEOMETRIC:
            return "geo", features.values
        if features.kind is FeatureKind.SEMANTIC:
            return "sem", features.values
        raise ValueError("prototype streams need GEOMETRIC or SEMANTIC features")
    raise TypeError("expected a FeatureMatrix")


def init_prototypes(bank, features, labels):
    """Set every present class's prototype to the mean of its feature rows."""
    name, values = _stream_of(features)
    out = bank.copy()
    means, present = class_means(values, labels, bank.n_classes)
    present &= ~out.frozen
    out.stream(name)[present] = means[present]
    out.initialized = out.initialized | present
    return out


def cosine(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _similarities(prototypes, means, present):
    """Max cosine between each prototype and the other present classes' means (-1 if none)."""
    c = prototypes.shape[0]
    out = np.full(c, -1.0)
    for i in range(c):
        others = [cosine(prototypes[i], means[j]) for j in range(c) if j != i and present[j]]
        if others:
            out[i] = max(others)
    return out


def stream_similarity(bank, class_id, batch_features, labels):
    """Max cosine between class ``class_id``'s prototype and other classes' batch means."""
    if not bank.initialized[class_id]:
        raise UninitializedPrototypeError(class_id)
    name, values = _stream_of(batch_features)
    means, present = class_means(values, labels, bank.n_classes)
    present[class_id] = False
    sims = [cosine(bank.stream(name)[class_id], means[j]) for j in np.flatnonzero(present)]
    return max(sims) if sims else -1.0


@dataclass
class PrototypeUpdate:
    """Record of one momentum update, kept for the momentum-factor gradient."""

    before: dict  # stream -> (C, D) prototypes prior to the momentum step
    means: dict  # stream -> (C, D) batch means
    similarity: dict  # stream -> (C,)
    momentum: dict  # stream -> (C,)
    updated: np.ndarray  # classes moved by momentum this step


def within_class_variance(values, labels, n_classes, floor=1e-4):
    """Pooled per-column variance around the class means, floored to stay positive."""
    means, present = class_means(values, labels, n_classes)
    valid = (labels >= 0) & (labels < n_classes)
    if not valid.any():
        return np.ones(values.shape[1])
    resid = values[valid] - means[labels[valid]]
    return np.maximum((resid**2).mean(axis=0), floor)


def _initialize_fresh(bank, geo, sem, labels):
    """Set never-seen, unfrozen classes to their batch means; returns the mask of such classes.

    The first initialization of an empty bank also fixes ``spread``.
    """
    c = bank.n_classes
    if not bank.initialized.any():
        bank.spread = within_class_variance(np.hstack([geo, sem]), np.asarray(labels), c)
    fresh = None
    for name, values in (("geo", geo), ("sem", sem)):
        means, present = class_means(values, labels, c)
        if fresh is None:
            fresh = present & ~bank.initialized & ~bank.frozen
        bank.stream(name)[fresh] = means[fresh]
    bank.initialized |= fresh
    return fresh


def _update(bank, geo, sem, labels, fresh=None):
    """Initialize new classes, then momentum-update the rest; mutates ``bank``."""
    if fresh is None:
        fresh = _initialize_fresh(bank, geo, sem, labels)
    c = bank.n_classes
    info = PrototypeUpdate({}, {}, {}, {}, np.zeros(c, dtype=bool))
    present = None
    for name, values in (("geo", geo), ("sem", sem)):
        means, present = class_means(values, labels, c)
        info.means[name] = means
    updated = present & bank.initialized & ~bank.frozen & ~fresh
    for name in STREAMS:
        proto = bank.stream(name)
        info.before[name] = proto.copy()
        sims = _similarities(proto, info.means[name], present)
        m = adaptive_momentum(sims, bank.momentum)
        info.similarity[name] = sims
        info.momentum[name] = np.where(updated, m, 0.0)
        proto[updated] = (1.0 - m[updated, None]) * proto[updated] + m[updated, None] * info.means[name][updated]
    bank.update_count[present & ~bank.frozen] += 1
    info.updated = updated
    return info


def update_prototypes(bank, geo_feats, sem_feats, labels):
    """Momentum update of every class in the batch; returns a new bank."""
    out = bank.copy()
    geo = geo_feats.values if isinstance(geo_feats, FeatureMatrix) else np.asarray(geo_feats, dtype=np.float64)
    sem = sem_feats.values if isinstance(sem_feats, FeatureMatrix) else np.asarray(sem_feats, dtype=np.float64)
    _update(out, geo, sem, np.asarray(labels))
    return out


def assign_classes(bank, geo, sem):
    """Nearest initialized prototype in the joint (geometric, semantic) space; ties to lower index.

    Squared differences are divided by the bank's per-dimension ``spread``,
    so noisy columns (e.g. normals of isotropic blobs) weigh less than
    tight ones (e.g. colour).
    """
    ids = np.flatnonzero(bank.initialized)
    if ids.size == 0:
        raise UninitializedPrototypeError(0)
    x = np.hstack([geo, sem])
    protos = np.hstack([bank.geo[ids], bank.sem[ids]])
    d = (((x[:, None, :] - protos[None]) ** 2) / bank.spread).sum(axis=2)
    return ids[np.argmin(d, axis=1)]


@dataclass
class FusionParams:
    params: dict
    frozen: bool = False

    @property
    def d_proto(self):
        return self.params["proj_geo_W"].shape[1]

    @property
    def d_fused(self):
        return self.params["fuse_W"].shape[1]

    def copy(self):
        return copy.deepcopy(self)

    def state_dict(self, prefix="fusion."):
        state = {prefix + k: v.copy() for k, v in self.params.items()}
        state[prefix + "frozen"] = np.array([self.frozen], dtype=np.int64)
        return state

    @classmethod
    def from_state_dict(cls, state, prefix="fusion."):
        params = {
            k[len(prefix):]: np.array(v, dtype=np.float64)
            for k, v in state.items()
            if k.startswith(prefix) and k != prefix + "frozen"
        }
        return cls(params, bool(int(state[prefix + "frozen"][0])))


def init_fusion(d_geo=4, d_sem=4, d_proto=8, d_edge=8, d_fused=16, seed=0):
    """Attention, projection and edge-fusion weights; ``d_edge`` is the per-point edge feature width."""
    rng = np.random.default_rng(seed)
    fuse_in = d_proto + 2 * d_edge
    params = {
        "att_geo_w": uniform_init(rng, 2 * d_geo, (2 * d_geo,)),
        "att_geo_b": np.zeros(()),
        "att_sem_w": uniform_init(rng, 2 * d_sem, (2 * d_sem,)),
        "att_sem_b": np.zeros(()),
        "proj_geo_W": uniform_init(rng, 2 * d_geo, (2 * d_geo, d_proto)),
        "proj_geo_b": np.zeros(d_proto),
        "proj_sem_W": uniform_init(rng, 2 * d_sem, (2 * d_sem, d_proto)),
        "proj_sem_b": np.zeros(d_proto),
        "fuse_W": uniform_init(rng, fuse_in, (fuse_in, d_fused)),
        "fuse_b": np.zeros(d_fused),
    }
    return FusionParams(params)


def _check_assigned(bank, assigned):
    missing = np.unique(assigned[~bank.initialized[assigned]])
    if missing.size:
        raise UninitializedPrototypeError(int(missing[0]))


def prototype_feature(bank, geo_feats, sem_feats, fusion, assigned, return_cache=False):
    """Attention-weighted mix of the projected geometric and semantic streams.

    Each stream is ``concat(feature_i, prototype_{assigned_i})``.
    """
    geo = geo_feats.values if isinstance(geo_feats, FeatureMatrix) else np.asarray(geo_feats, dtype=np.float64)
    sem = sem_feats.values if isinstance(sem_feats, FeatureMatrix) else np.asarray(sem_feats, dtype=np.float64)
    assigned = np.asarray(assigned, dtype=np.int64)
    _check_assigned(bank, assigned)
    p = fusion.params
    G = np.concatenate([geo, bank.geo[assigned]], axis=1)
    S = np.concatenate([sem, bank.sem[assigned]], axis=1)
    score_g = G @ p["att_geo_w"] + p["att_geo_b"]
    score_s = S @ p["att_sem_w"] + p["att_sem_b"]
    alpha_g = sigmoid(score_g - score_s)
    Zg = G @ p["proj_geo_W"] + p["proj_geo_b"]
    Zs = S @ p["proj_sem_W"] + p["proj_sem_b"]
    out = alpha_g[:, None] * Zg + (1.0 - alpha_g)[:, None] * Zs
    if not return_cache:
        return out
    cache = {"G": G, "S": S, "alpha_g": alpha_g, "Zg": Zg, "Zs": Zs, "assigned": assigned, "d_geo": geo.shape[1], "d_sem": sem.shape[1]}
    return out, cache


def attention_weights(bank, geo, sem, fusion, assigned):
    """(alpha_geo, alpha_sem) per point."""
    _, cache = prototype_feature(bank, geo, sem, fusion, assigned, return_cache=True)
    return cache["alpha_g"], 1.0 - cache["alpha_g"]


def fuse_with_edges(proto_feats, edge_diffs, fusion, return_cache=False):
    """Per point: tanh layer over ``concat(proto_i, edge_ij)`` for each neighbour j, then max over j."""
    proto_feats = np.asarray(proto_feats, dtype=np.float64)
    edge_diffs = np.asarray(edge_diffs, dtype=np.float64)
    n, k, _ = edge_diffs.shape
    if proto_feats.shape[0] != n:
        raise ShapeMismatchError("prototype features and edges must cover the same points")
    p = fusion.params
    H_in = np.concatenate([np.broadcast_to(proto_feats[:, None, :], (n, k, proto_feats.shape[1])), edge_diffs], axis=2)
    if H_in.shape[2] != p["fuse_W"].shape[0]:
        raise ShapeMismatchError(f"fusion expects width {p['fuse_W'].shape[0]}, got {H_in.shape[2]}")
    H = np.tanh(H_in @ p["fuse_W"] + p["fuse_b"])
    arg = H.argmax(axis=1)
    out = np.take_along_axis(H, arg[:, None, :], axis=1)[:, 0, :]
    if not return_cache:
        return out
    return out, {"H_in": H_in, "H": H, "arg": arg, "d_proto": proto_feats.shape[1]}


def fusion_backward(fusion, bank, proto_cache, fuse_cache, d_out):
    """Gradients of fusion parameters and of the prototype rows that were looked up."""
    p = fusion.params
    H, H_in, arg = fuse_cache["H"], fuse_cache["H_in"], fuse_cache["arg"]
    n, k, d_f = H.shape
    dH = np.zeros_like(H)
    np.put_along_axis(dH, arg[:, None, :], d_out[:, None, :], axis=1)
    dA = dH * (1.0 - H**2)
    grads = {
        "fuse_W": np.einsum("nki,nkj->ij", H_in, dA),
        "fuse_b": dA.sum(axis=(0, 1)),
    }
    dH_in = dA @ p["fuse_W"].T
    dP = dH_in[:, :, : fuse_cache["d_proto"]].sum(axis=1)

    G, S, a = proto_cache["G"], proto_cache["S"], proto_cache["alpha_g"]
    Zg, Zs = proto_cache["Zg"], proto_cache["Zs"]
    dZg = a[:, None] * dP
    dZs = (1.0 - a)[:, None] * dP
    d_alpha = ((Zg - Zs) * dP).sum(axis=1)
    d_score_g = d_alpha * a * (1.0 - a)
    grads["proj_geo_W"] = G.T @ dZg
    grads["proj_geo_b"] = dZg.sum(axis=0)
    grads["proj_sem_W"] = S.T @ dZs
    grads["proj_sem_b"] = dZs.sum(axis=0)
    grads["att_geo_w"] = G.T @ d_score_g
    grads["att_geo_b"] = np.array(d_score_g.sum())
    grads["att_sem_w"] = -(S.T @ d_score_g)
    grads["att_sem_b"] = np.array(-d_score_g.sum())
    dG = dZg @ p["proj_geo_W"].T + d_score_g[:, None] * p["att_geo_w"]
    dS = dZs @ p["proj_sem_W"].T - d_score_g[:, None] * p["att_sem_w"]

    dg = proto_cache["d_geo"]
    assigned = proto_cache["assigned"]
    d_proto = {"geo": np.zeros_like(bank.geo), "sem": np.zeros_like(bank.sem)}
    np.add.at(d_proto["geo"], assigned, dG[:, dg:])
    np.add.at(d_proto["sem"], assigned, dS[:, proto_cache["d_sem"] :])
    return grads, d_proto


def momentum_backward(momentum, info, d_proto):
    """Chain prototype-row gradients back to the momentum factors ``(a, b)``."""
    g = np.zeros(2)
    span = momentum.m_max - momentum.m_min
    for name in STREAMS:
        upd = info.updated
        if not upd.any():
            continue
        dm = (d_proto[name][upd] * (info.means[name][upd] - info.before[name][upd])).sum(axis=1)
        s = momentum.signed(info.similarity[name][upd])
        sig = sigmoid(momentum.ab[0] * s + momentum.ab[1])
        dz = dm * span * sig * (1.0 - sig)
        g[0] += float((dz * s).sum())
        g[1] += float(dz.sum())
    return g


@dataclass
class CloudContext:
    """Per-cloud features that do not depend on any trainable parameter."""

    geo: np.ndarray
    sem: np.ndarray
    plain: np.ndarray
    edges: np.ndarray
    density: np.ndarray
    index: KnnIndex
    k: int

    @property
    def n_points(self):
        return self.geo.shape[0]


def prepare_cloud(cloud, k=16):
    """Compute features, density, kNN table and edge tensor for ``cloud``."""
    n = cloud.n_points
    index = KnnIndex(cloud.positions, k_max=min(n, k + 1))
    geo = geometric_feature(cloud, index, k).values
    sem = semantic_feature(cloud, index, k).values
    plain = np.concatenate([geo, sem], axis=1)
    if n > 2:
        density = estimate_density(cloud, index, max(2, min(k, n - 1)))[:, 0]
    else:
        density = np.ones(n)
    edges = edge_differences(plain, index, k)
    return CloudContext(geo, sem, plain, edges, density, index, k)


@dataclass
class ModelConfig:
    k: int = 16
    hidden: int = 16
    embed_dim: int = 16
    proto_dim: int = 8
    fused_dim: int = 16
    use_prototypes: bool = True
    momentum_a: float = 1.0
    momentum_b: float = 0.0
    m_min: float = 0.01
    m_max: float = 0.5
    learnable_momentum: bool = True
    momentum_direction: str = "increasing"


@dataclass
class SegmentationModel:
    """Network plus, when prototypes are enabled, the fusion weights and prototype bank."""

    network: Network
    fusion: FusionParams = None
    bank: PrototypeBank = None

    @property
    def use_prototypes(self):
        return self.fusion is not None

    @property
    def n_classes(self):
        return self.network.n_classes

    def copy(self):
        return copy.deepcopy(self)

    def freeze(self):
        self.network.freeze()
        if self.use_prototypes:
            self.fusion.frozen = True
            self.bank.freeze_all()
        return self

    def network_input(self, ctx, rows=None, bank=None, assigned=None, return_cache=False):
        rows = np.arange(ctx.n_points) if rows is None else rows
        if not self.use_prototypes:
            X = ctx.plain[rows]
            return (X, None) if return_cache else X
        bank = self.bank if bank is None else bank
        geo, sem = ctx.geo[rows], ctx.sem[rows]
        if assigned is None:
            assigned = assign_classes(bank, geo, sem)
        P, pcache = prototype_feature(bank, geo, sem, self.fusion, assigned, return_cache=True)
        F, fcache = fuse_with_edges(P, ctx.edges[rows], self.fusion, return_cache=True)
        return (F, (pcache, fcache)) if return_cache else F

    def predict_proba_ctx(self, ctx):
        return self.network.forward(self.network_input(ctx))[1]

    def predict_ctx(self, ctx):
        return self.predict_proba_ctx(ctx).argmax(axis=1)

    def trainable_params(self):
        """Flat view ``{qualified name: array}`` of every parameter that may be updated."""
        out = {}
        for name, arr in self.network.params.items():
            if self.network.trainable(name):
                out["net." + name] = arr
        if self.use_prototypes:
            if not self.fusion.frozen:
                out.update({"fusion." + n: a for n, a in self.fusion.params.items()})
            if self.bank.momentum.learnable:
                out["momentum.ab"] = self.bank.momentum.ab
        return out

    def state_dict(self):
        state = self.network.state_dict()
        if self.use_prototypes:
            state.update(self.fusion.state_dict())
            state.update(self.bank.state_dict())
        return state

    @classmethod
    def from_state_dict(cls, state):
        net = Network.from_state_dict(state)
        if "fusion.frozen" in state:
            return cls(net, FusionParams.from_state_dict(state), PrototypeBank.from_state_dict(state))
        return cls(net)

    def fingerprint(self):
        h = hashlib.sha256()
        for key, arr in sorted(self.state_dict().items()):
            h.update(key.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build_model(d_plain, n_classes, config, seed=0):
    if config.use_prototypes:
        fusion = init_fusion(4, 4, config.proto_dim, d_plain, config.fused_dim, seed=seed + 7919)
        momentum = MomentumParams(
            np.array([config.momentum_a, config.momentum_b]),
            config.m_min,
            config.m_max,
            config.momentum_direction,
            config.learnable_momentum,
        )
        bank = PrototypeBank.empty(n_classes, 4, 4, momentum)
        net = init_network(config.fused_dim, config.hidden, config.embed_dim, n_classes, seed)
        return SegmentationModel(net, fusion, bank)
    return SegmentationModel(init_network(d_plain, config.hidden, config.embed_dim, n_classes, seed))


def batch_objective(model, ctx, rows, loss_labels, proto_labels=None, weights=None, l2=0.0, bank=None):
    """Loss and analytic gradients for one batch, including the prototype update.

    ``bank`` is the prototype state before this batch (defaults to the
    model's).  It is not modified; the post-update bank is returned so the
    caller can commit it.  Returns ``(loss, grads, new_bank)`` with ``grads``
    keyed like :meth:`SegmentationModel.trainable_params` (frozen parameters
    are absent).
    """
    loss_labels = np.asarray(loss_labels)
    new_bank, info, assigned = None, None, None
    if model.use_prototypes:
        new_bank = (model.bank if bank is None else bank).copy()
        new_bank.momentum = model.bank.momentum  # trainable (a, b) always come from the model
        if proto_labels is not None:
            geo, sem = ctx.geo[rows], ctx.sem[rows]
            pl = np.asarray(proto_labels)
            # classes first seen here are initialized; lookup then uses the pre-momentum bank
            fresh = _initialize_fresh(new_bank, geo, sem, pl)
            assigned = assign_classes(new_bank, geo, sem)
            info = _update(new_bank, geo, sem, pl, fresh)
        X, caches = model.network_input(ctx, rows, bank=new_bank, assigned=assigned, return_cache=True)
    else:
        X, caches = model.network_input(ctx, rows, return_cache=True)

    net = model.network
    _, probs, ncache = network_forward(net, X)
    loss, dlogits = cross_entropy(probs, loss_labels, weights)
    ngrads, dX = network_backward(net, ncache, dlogits)
    reg, reg_grads = l2_penalty(net, l2)
    for name, g in reg_grads.items():
        ngrads[name] = ngrads[name] + g
    apply_freeze(net, ngrads)
    grads = {"net." + n: g for n, g in ngrads.items() if net.trainable(n)}

    if model.use_prototypes:
        pcache, fcache = caches
        fgrads, d_proto = fusion_backward(model.fusion, new_bank, pcache, fcache, dX)
        if not model.fusion.frozen:
            for name, g in fgrads.items():
                if name in ("fuse_W", "proj_geo_W", "proj_sem_W") and l2:
                    g = g + l2 * model.fusion.params[name]
                    reg += 0.5 * l2 * float(np.sum(model.fusion.params[name] ** 2))
                grads["fusion." + name] = g
        if new_bank.momentum.learnable:
            grads["momentum.ab"] = (
                momentum_backward(new_bank.momentum, info, d_proto) if info is not None else np.zeros(2)
            )
    return loss + reg, grads, new_bank


def _commit(model, grads, learning_rate):
    params = model.trainable_params()
    for key, g in grads.items():
        if key in params and np.any(g):
            # update in place so the parameter dicts keep their arrays
            params[key] -= learning_rate * g


def model_gradient_check(model, ctx, rows, loss_labels, proto_labels=None, weights=None, l2=0.0, eps=1e-5):
    """Max relative error of :func:`batch_objective` gradients against central differences."""
    bank0 = model.bank.copy() if model.use_prototypes else None
    _, analytic, _ = batch_objective(model, ctx, rows, loss_labels, proto_labels, weights, l2, bank=bank0)
    params = model.trainable_params()

    def loss_fn():
        return batch_objective(model, ctx, rows, loss_labels, proto_labels, weights, l2, bank=bank0)[0]

    numeric = finite_difference(loss_fn, params, list(params), eps)
    for name in ("W3", "b3"):
        mask = model.network.grad_mask(name)
        if mask is not None and "net." + name in numeric:
            numeric["net." + name] *= mask
    errs = {name: float(relative_error(analytic[name], numeric[name]).max(initial=0.0)) for name in params}
    return max(errs.values(), default=0.0), errs


def _batches(n, batch_points, rng):
    if not batch_points or batch_points >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[i : i + batch_points] for i in range(0, n, batch_points)]


def fit_model(model, contexts, loss_labels, proto_labels, config, weights=None, history=None):
    """Gradient-descent loop shared by the base and novel phases.

    ``proto_labels`` drives prototype updates (ignored without prototypes);
    ``loss_labels`` are the cross-entropy targets.  Returns the mean loss of
    the final epoch (NaN when no step ran).
    """
    rng = np.random.default_rng(config.seed)
    last = float("nan")
    for _ in range(config.epochs):
        losses = []
        for ci, ctx in enumerate(contexts):
            for rows in _batches(ctx.n_points, config.batch_points, rng):
                labels = loss_labels[ci][rows]
                if not np.any(labels != IGNORE):
                    continue
                pl = None if proto_labels is None or proto_labels[ci] is None else proto_labels[ci][rows]
                w = None if weights is None or weights[ci] is None else weights[ci][rows]
                loss, grads, new_bank = batch_objective(model, ctx, rows, labels, pl, w, config.l2)
                _commit(model, grads, config.learning_rate)
                if model.use_prototypes:
                    model.bank = new_bank
                losses.append(loss)
        if losses:
            last = float(np.mean(losses))
            if history is not None:
                history.append(last)
    return last


def base_labels(cloud, n_classes):
    """Ground truth restricted to ``0..n_classes-1``; everything else becomes IGNORE."""
    labels = np.asarray(cloud.labels if isinstance(cloud, PointCloud) else cloud, dtype=np.int64)
    return np.where((labels >= 0) & (labels < n_classes), labels, IGNORE)


def train_base(dataset, n_classes, config=None, model_config=None, labels=None, history=None):
    """Base-phase training; returns a :class:`SegmentationModel`.

    ``labels`` optionally overrides each cloud's own labels.  Labels outside
    ``0..n_classes-1`` are excluded from the loss and from prototype updates.
    """
    config = config or TrainConfig()
    model_config = model_config or ModelConfig()
    contexts = [prepare_cloud(c, model_config.k) for c in dataset]
    targets = [base_labels(labels[i] if labels is not None else c, n_classes) for i, c in enumerate(dataset)]
    model = build_model(contexts[0].plain.shape[1], n_classes, model_config, seed=config.seed)
    fit_model(model, contexts, targets, targets, config, history=history)
    return model


class ProtoGuardSegmenter(ClassifierMixin, BaseEstimator):
    """Base-phase point-cloud segmenter with optional prototype enhancement.

    ``fit`` takes a sequence of :class:`PointCloud` (labels taken from the
    clouds unless ``y`` supplies per-cloud label arrays); ``predict`` takes a
    single cloud and returns one label per point.
    """

    def __init__(
        self,
        n_classes=None,
        k=16,
        hidden=16,
        embed_dim=16,
        proto_dim=8,
        fused_dim=16,
        use_prototypes=True,
        momentum_a=1.0,
        momentum_b=0.0,
        m_min=0.01,
        m_max=0.5,
        learnable_momentum=True,
        momentum_direction="increasing",
        learning_rate=0.5,
        epochs=100,
        batch_points=0,
        l2=0.0,
        random_state=0,
    ):
        self.n_classes = n_classes
        self.k = k
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.proto_dim = proto_dim
        self.fused_dim = fused_dim
        self.use_prototypes = use_prototypes
        self.momentum_a = momentum_a
        self.momentum_b = momentum_b
        self.m_min = m_min
        self.m_max = m_max
        self.learnable_momentum = learnable_momentum
        self.momentum_direction = momentum_direction
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_points = batch_points
        self.l2 = l2
        self.random_state = random_state

    def _model_config(self):
        return ModelConfig(
            self.k, self.hidden, self.embed_dim, self.proto_dim, self.fused_dim, self.use_prototypes,
            self.momentum_a, self.momentum_b, self.m_min, self.m_max, self.learnable_momentum,
            self.momentum_direction,
        )

    def _train_config(self):
        return TrainConfig(self.learning_rate, self.epochs, self.batch_points, self.l2, int(self.random_state or 0))

    def fit(self, X, y=None):
        clouds = _as_clouds(X)
        n_classes = self.n_classes
        if n_classes is None:
            n_classes = max(c.n_classes for c in clouds)
        self.loss_history_ = []
        self.model_ = train_base(
            clouds, n_classes, self._train_config(), self._model_config(), labels=y, history=self.loss_history_
        )
        self.classes_ = np.arange(n_classes)
        self.n_classes_ = n_classes
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba_ctx(prepare_cloud(_as_cloud(X), self.k))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y=None, sample_weight=None):
        """Mean IoU over the fitted classes present in ``X``."""
        from .evaluation import ConfusionMatrix, miou

        cloud = _as_cloud(X)
        gt = base_labels(cloud if y is None else y, self.n_classes_)
        cm = ConfusionMatrix.empty(self.n_classes_).accumulate(self.predict(cloud), gt)
        return miou(cm, range(self.n_classes_))[1]


def _as_clouds(X):
    if isinstance(X, PointCloud):
        return [X]
    clouds = list(X)
    if not clouds or not all(isinstance(c, PointCloud) for c in clouds):
        raise TypeError("expected a PointCloud or a non-empty sequence of PointCloud")
    return clouds


def _as_cloud(X):
    if not isinstance(X, PointCloud):
        raise TypeError("expected a PointCloud")
    return X


MODEL_FORMAT_VERSION = 1


def save_model(model, path):
    """Write ``model`` as an ``.npz`` archive; loading it back is bit-exact."""
    state = model.state_dict()
    state["format_version"] = np.array([MODEL_FORMAT_VERSION], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **state)


def load_model(path):
    with np.load(path, allow_pickle=False) as data:
        state = {k: data[k] for k in data.files}
    version = int(state.pop("format_version", np.array([0]))[0])
    if version != MODEL_FORMAT_VERSION:
        raise InvalidConfigError(f"unsupported model file version {version}")
    return SegmentationModel.from_state_dict(state)
