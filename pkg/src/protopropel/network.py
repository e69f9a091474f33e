"""Point-wise tanh MLP extractor with a softmax classifier and manual gradients.

The extractor is ``tanh(tanh(X W1 + b1) W2 + b2)`` and the classifier a
single dense layer followed by softmax.  Gradients are written out by hand so
they can be verified against central finite differences.
"""

import copy
import hashlib
from dataclasses import dataclass

import numpy as np

from .exceptions import AllIgnoredError, ShapeMismatchError
from .validation import IGNORE

EXTRACTOR_PARAMS = ("W1", "b1", "W2", "b2")
CLASSIFIER_PARAMS = ("W3", "b3")
WEIGHT_PARAMS = ("W1", "W2", "W3")


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 100
    batch_points: int = 0  # 0 means one full-cloud batch
    l2: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_points < 0:
            raise ValueError("batch_points must be non-negative")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Network:
    params: dict
    frozen_extractor: bool = False
    frozen_classifier: bool = False
    frozen_outputs: int = 0  # leading classifier outputs kept fixed even when the classifier trains
    rng_seed: int = 0

    def __post_init__(self):
        p = self.params
        d_in, hidden = p["W1"].shape
        if p["b1"].shape != (hidden,) or p["W2"].shape[0] != hidden:
            raise ShapeMismatchError("extractor layer shapes do not chain")
        d_embed = p["W2"].shape[1]
        if p["b2"].shape != (d_embed,) or p["W3"].shape[0] != d_embed or p["b3"].shape != (p["W3"].shape[1],):
            raise ShapeMismatchError("classifier shape does not match the embedding width")
        for name, arr in p.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} has non-finite entries")

    @property
    def d_in(self):
        return self.params["W1"].shape[0]

    @property
    def n_classes(self):
        return self.params["W3"].shape[1]

    def forward(self, features):
        emb, probs, _ = network_forward(self, features)
        return emb, probs

    def predict(self, features):
        return self.forward(features)[1].argmax(axis=1)

    def copy(self):
        return copy.deepcopy(self)

    def freeze(self):
        self.frozen_extractor = True
        self.frozen_classifier = True
        return self

    def trainable(self, name):
        if name in EXTRACTOR_PARAMS:
            return not self.frozen_extractor
        return not self.frozen_classifier

    def grad_mask(self, name):
        """Multiplicative mask for a gradient, or None when nothing is masked."""
        if name in CLASSIFIER_PARAMS and self.frozen_outputs and not self.frozen_classifier:
            mask = np.ones_like(self.params[name])
            mask[..., : self.frozen_outputs] = 0.0
            return mask
        return None

    def state_dict(self, prefix="net."):
        state = {prefix + k: v.copy() for k, v in self.params.items()}
        state[prefix + "flags"] = np.array(
            [self.frozen_extractor, self.frozen_classifier, self.frozen_outputs, self.rng_seed], dtype=np.int64
        )
        return state

    @classmethod
    def from_state_dict(cls, state, prefix="net."):
        params = {k: np.array(state[prefix + k], dtype=np.float64) for k in EXTRACTOR_PARAMS + CLASSIFIER_PARAMS}
        fe, fc, fo, seed = (int(v) for v in state[prefix + "flags"])
        return cls(params, bool(fe), bool(fc), fo, seed)

    def fingerprint(self):
        """SHA-256 over parameter bytes; equal fingerprints mean bit-identical parameters."""
        h = hashlib.sha256()
        for name in EXTRACTOR_PARAMS + CLASSIFIER_PARAMS:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


def init_network(d_in, hidden, d_embed, n_classes, seed=0):
    for dim in (d_in, hidden, d_embed, n_classes):
        if dim < 1:
            raise ValueError("all network dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    params = {
        "W1": uniform_init(rng, d_in, (d_in, hidden)),
        "b1": np.zeros(hidden),
        "W2": uniform_init(rng, hidden, (hidden, d_embed)),
        "b2": np.zeros(d_embed),
        "W3": uniform_init(rng, d_embed, (d_embed, n_classes)),
        "b3": np.zeros(n_classes),
    }
    return Network(params, rng_seed=int(seed))


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def network_forward(net, features):
    """Forward pass returning ``(embeddings, probabilities, cache)``."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.d_in:
        raise ShapeMismatchError(f"expected features of shape (N, {net.d_in}), got {X.shape}")
    p = net.params
    h1 = np.tanh(X @ p["W1"] + p["b1"])
    emb = np.tanh(h1 @ p["W2"] + p["b2"])
    logits = emb @ p["W3"] + p["b3"]
    if X.shape[0] == 0:
        probs = np.zeros((0, net.n_classes))
    else:
        probs = softmax(logits)
    return emb, probs, {"X": X, "h1": h1, "emb": emb, "logits": logits, "probs": probs}


def network_backward(net, cache, dlogits):
    """Backpropagate ``dlogits``; returns (param grads, grad wrt the input features)."""
    p = net.params
    emb, h1, X = cache["emb"], cache["h1"], cache["X"]
    grads = {"W3": emb.T @ dlogits, "b3": dlogits.sum(axis=0)}
    dz2 = (dlogits @ p["W3"].T) * (1.0 - emb**2)
    grads["W2"] = h1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ p["W2"].T) * (1.0 - h1**2)
    grads["W1"] = X.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads, dz1 @ p["W1"].T


def cross_entropy(probs, labels, weights=None):
    """Weighted mean of ``-log p(y)`` over non-IGNORE points, and its gradient wrt the logits."""
    labels = np.asarray(labels)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ShapeMismatchError("labels must align with the predictions")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0):
        raise ValueError("per-point weights must be non-negative and aligned")
    active = labels != IGNORE
    if np.any(labels[active] >= c) or np.any(labels[active] < 0):
        raise ValueError(f"labels must be < {c} or IGNORE")
    w = np.where(active, w, 0.0)
    total = w.sum()
    if not active.any() or total <= 0:
        raise AllIgnoredError("no non-IGNORE point carries weight")
    safe = np.where(active, labels, 0)
    picked = probs[np.arange(n), safe]
    loss = -(w * np.log(np.maximum(picked, 1e-300))).sum() / total
    dlogits = probs.copy()
    dlogits[np.arange(n), safe] -= 1.0
    dlogits *= (w / total)[:, None]
    return loss, dlogits


def l2_penalty(net, l2):
    if not l2:
        return 0.0, {}
    loss, grads = 0.0, {}
    for name in WEIGHT_PARAMS:
        if net.trainable(name):
            loss += 0.5 * l2 * float(np.sum(net.params[name] ** 2))
            grads[name] = l2 * net.params[name]
    return loss, grads


def loss_and_gradients(net, features, labels, weights=None, l2=0.0):
    """Loss plus analytic gradients; frozen parameters report exactly zero gradient."""
    _, probs, cache = network_forward(net, features)
    loss, dlogits = cross_entropy(probs, labels, weights)
    grads, dX = network_backward(net, cache, dlogits)
    reg, reg_grads = l2_penalty(net, l2)
    for name, g in reg_grads.items():
        grads[name] = grads[name] + g
    apply_freeze(net, grads)
    return loss + reg, grads, dX


def apply_freeze(net, grads):
    for name in list(grads):
        if not net.trainable(name):
            grads[name] = np.zeros_like(grads[name])
        else:
            mask = net.grad_mask(name)
            if mask is not None:
                grads[name] = grads[name] * mask
    return grads


def sgd_update(params, grads, learning_rate):
    for name, g in grads.items():
        if np.any(g):
            params[name] = params[name] - learning_rate * g


def train_step(net, features, labels, weights=None, config=None):
    """One full-batch gradient-descent update; returns the pre-update loss."""
    config = config or TrainConfig()
    loss, grads, _ = loss_and_gradients(net, features, labels, weights, config.l2)
    sgd_update(net.params, grads, config.learning_rate)
    return loss


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor turns the comparison into an absolute one for gradients that
    are essentially zero, where a ratio is dominated by rounding.
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference(loss_fn, params, names, eps):
    """Central differences of ``loss_fn()`` wrt every entry of ``params[name]``."""
    numeric = {}
    for name in names:
        arr = params[name]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn()
            flat[j] = orig - eps
            down = loss_fn()
            flat[j] = orig
            g.reshape(-1)[j] = (up - down) / (2.0 * eps)
        numeric[name] = g
    return numeric


def gradient_check(net, features, labels, eps=1e-5, weights=None, l2=0.0):
    """Max relative error between analytic and finite-difference gradients.

    Only trainable parameters are perturbed; frozen ones are verified to
    report an analytic gradient of exactly zero.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    _, analytic, _ = loss_and_gradients(net, features, labels, weights, l2)
    names = [n for n in analytic if net.trainable(n)]
    for name in analytic:
        if name not in names and np.any(analytic[name]):
            raise AssertionError(f"frozen parameter {name} has a non-zero gradient")

    def loss_fn():
        return loss_and_gradients(net, features, labels, weights, l2)[0]

    numeric = finite_difference(loss_fn, net.params, names, eps)
    for name in names:
        mask = net.grad_mask(name)
        if mask is not None:
            numeric[name] = numeric[name] * mask
    errs = [relative_error(analytic[n], numeric[n]).max(initial=0.0) for n in names]
    return float(max(errs, default=0.0))


def clone_for_novel(base, n_new_classes, seed=None):
    """Copy ``base`` and widen its classifier by ``n_new_classes`` outputs.

    Existing classifier columns are copied exactly; new columns use the
    standard uniform init with zero bias.  The clone has no frozen flags.
    """
    if n_new_classes < 1:
        raise ValueError("n_new_classes must be >= 1")
    seed = base.rng_seed + 1 if seed is None else seed
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in base.params.items()}
    d_embed = params["W3"].shape[0]
    params["W3"] = np.concatenate([params["W3"], uniform_init(rng, d_embed, (d_embed, n_new_classes))], axis=1)
    params["b3"] = np.concatenate([params["b3"], np.zeros(n_new_classes)])
    return Network(params, rng_seed=int(seed))
