import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protopropel.exceptions import AllIgnoredError, ShapeMismatchError
from protopropel.network import (
    Network,
    TrainConfig,
    clone_for_novel,
    cross_entropy,
    gradient_check,
    init_network,
    loss_and_gradients,
    relative_error,
    train_step,
)
from protopropel.validation import IGNORE


def zero_net(d_in=3, hidden=4, d_embed=4, c=2):
    net = init_network(d_in, hidden, d_embed, c, seed=0)
    for v in net.params.values():
        v[...] = 0.0
    return net


class TestInit:
    def test_deterministic(self):
        a, b = init_network(4, 8, 8, 3, seed=5), init_network(4, 8, 8, 3, seed=5)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_shapes_and_bounds(self):
        net = init_network(4, 8, 8, 3, seed=1)
        assert net.params["W3"].shape == (8, 3)
        assert np.all(np.abs(net.params["W1"]) <= 1 / np.sqrt(4))
        assert np.all(np.abs(net.params["W2"]) <= 1 / np.sqrt(8))
        assert np.all(np.abs(net.params["W3"]) <= 1 / np.sqrt(8))
        assert not any(np.any(net.params[b]) for b in ("b1", "b2", "b3"))

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            init_network(0, 2, 2, 2)

    def test_shape_chain_checked(self):
        p = init_network(3, 4, 4, 2).params
        p["W2"] = np.zeros((5, 4))
        with pytest.raises(ShapeMismatchError):
            Network(p)


class TestForward:
    def test_zero_net_uniform(self):
        _, probs = zero_net(c=4).forward(np.random.default_rng(0).normal(size=(5, 3)))
        np.testing.assert_array_equal(probs, 0.25)

    def test_empty_input(self):
        emb, probs = init_network(3, 4, 5, 2).forward(np.zeros((0, 3)))
        assert emb.shape == (0, 5) and probs.shape == (0, 2)

    def test_rows_sum_to_one(self, rng):
        _, probs = init_network(3, 6, 6, 5, seed=2).forward(rng.normal(size=(50, 3)) * 10)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs >= 0)

    def test_wrong_width(self):
        with pytest.raises(ShapeMismatchError):
            init_network(3, 4, 4, 2).forward(np.zeros((2, 4)))


class TestLoss:
    def test_all_ignore(self):
        net = init_network(3, 4, 4, 2)
        with pytest.raises(AllIgnoredError):
            train_step(net, np.zeros((3, 3)), np.full(3, IGNORE))

    def test_single_point_ln2(self):
        net = zero_net()
        loss = train_step(net, np.ones((1, 3)), np.array([1]))
        assert loss == pytest.approx(np.log(2), abs=1e-15)

    def test_weighted_mean_oracle(self, rng):
        probs = rng.dirichlet(np.ones(3), size=6)
        labels = np.array([0, 2, IGNORE, 1, 1, 0])
        w = rng.uniform(0.1, 2, size=6)
        loss, _ = cross_entropy(probs, labels, w)
        keep = labels != IGNORE
        ref = -(w[keep] * np.log(probs[keep, labels[keep]])).sum() / w[keep].sum()
        assert loss == pytest.approx(ref, rel=1e-14)

    def test_separable_training(self, two_class_cloud):
        X = np.column_stack([two_class_cloud.positions, two_class_cloud.colors])
        y = two_class_cloud.labels
        net = init_network(6, 8, 8, 2, seed=0)
        cfg = TrainConfig(learning_rate=0.5)
        losses = [train_step(net, X, y, config=cfg) for _ in range(50)]
        assert losses[-1] < losses[0]
        assert np.all(net.predict(X) == y)


class TestGradients:
    @pytest.mark.parametrize("seed", range(10))
    def test_small_net(self, seed):
        rng = np.random.default_rng(seed)
        net = init_network(4, 6, 6, 3, seed=seed)
        X = rng.normal(size=(20, 4))
        y = rng.integers(0, 3, size=20)
        y[:3] = IGNORE
        assert gradient_check(net, X, y, eps=1e-5, weights=rng.uniform(0.5, 1.5, 20), l2=0.01) < 1e-4

    def test_frozen_layers_zero(self, rng):
        net = init_network(4, 6, 6, 3, seed=1)
        net.frozen_extractor = True
        X, y = rng.normal(size=(10, 4)), rng.integers(0, 3, 10)
        _, grads, _ = loss_and_gradients(net, X, y)
        for name in ("W1", "b1", "W2", "b2"):
            assert not np.any(grads[name])
        assert gradient_check(net, X, y) < 1e-4

    def test_frozen_outputs_masked(self, rng):
        net = init_network(4, 6, 6, 5, seed=1)
        net.frozen_outputs = 3
        X, y = rng.normal(size=(10, 4)), rng.integers(0, 5, 10)
        _, grads, _ = loss_and_gradients(net, X, y)
        assert not np.any(grads["W3"][:, :3]) and not np.any(grads["b3"][:3])
        assert gradient_check(net, X, y) < 1e-4

    def test_duplicate_dataset_same_gradient(self, rng):
        net = init_network(4, 6, 6, 3, seed=2)
        X, y = rng.normal(size=(12, 4)), rng.integers(0, 3, 12)
        _, g1, _ = loss_and_gradients(net, X, y)
        _, g2, _ = loss_and_gradients(net, np.vstack([X, X]), np.concatenate([y, y]))
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)

    def test_eps_bounds(self, rng):
        with pytest.raises(ValueError):
            gradient_check(init_network(2, 2, 2, 2), np.zeros((1, 2)), np.array([0]), eps=0.1)

    def test_relative_error_floor(self):
        assert relative_error(1e-9, 0.0) == pytest.approx(1e-3)
        assert relative_error(2.0, 1.0) == pytest.approx(0.5)


class TestFreezeAndClone:
    @settings(max_examples=10, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2**31))
    def test_freeze_contract(self, steps, seed):
        rng = np.random.default_rng(seed)
        net = init_network(3, 5, 5, 3, seed=seed)
        net.frozen_extractor = True
        before = {k: net.params[k].tobytes() for k in ("W1", "b1", "W2", "b2")}
        X, y = rng.normal(size=(15, 3)), rng.integers(0, 3, 15)
        for _ in range(steps):
            train_step(net, X, y)
        assert before == {k: net.params[k].tobytes() for k in before}

    def test_fully_frozen_fingerprint(self, rng):
        net = init_network(3, 5, 5, 3).freeze()
        fp = net.fingerprint()
        train_step(net, rng.normal(size=(5, 3)), rng.integers(0, 3, 5))
        assert net.fingerprint() == fp

    def test_clone_widens_and_copies(self, rng):
        base = init_network(3, 5, 5, 3, seed=4).freeze()
        clone = clone_for_novel(base, 2)
        assert clone.n_classes == 5
        assert not clone.frozen_extractor and not clone.frozen_classifier
        X = rng.normal(size=(7, 3))
        from protopropel.network import network_forward

        base_logits = network_forward(base, X)[2]["logits"]
        clone_logits = network_forward(clone, X)[2]["logits"]
        assert np.array_equal(base_logits, clone_logits[:, :3])
        assert np.all(clone.params["b3"][3:] == 0)

    def test_base_isolated_from_clone_training(self, rng):
        base = init_network(3, 5, 5, 3, seed=4)
        fp = base.fingerprint()
        clone = clone_for_novel(base, 1)
        train_step(clone, rng.normal(size=(6, 3)), rng.integers(0, 4, 6))
        assert base.fingerprint() == fp

    def test_state_round_trip(self):
        net = init_network(3, 5, 5, 3, seed=9)
        net.frozen_outputs = 2
        back = Network.from_state_dict(net.state_dict())
        assert back.fingerprint() == net.fingerprint()
        assert back.frozen_outputs == 2

    def test_determinism(self, rng):
        X, y = rng.normal(size=(20, 3)), rng.integers(0, 3, 20)
        fps = []
        for _ in range(2):
            net = init_network(3, 5, 5, 3, seed=11)
            for _ in range(5):
                train_step(net, X, y)
            fps.append(net.fingerprint())
        assert fps[0] == fps[1]
