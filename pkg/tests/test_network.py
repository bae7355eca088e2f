import json

import numpy as np
import pytest

from perturbcert import (
    Activation,
    Batch,
    Network,
    RankDeficientDownstreamError,
    ReluBranchError,
    TanhRangeError,
    downstream,
    downstream_inverse,
    forward,
    upstream,
)

from conftest import random_invertible_network, random_network
from oracles import reference_forward

N_PROPERTY_CASES = 500


class TestActivation:
    def test_leaky_relu_requires_positive_slope(self):
        with pytest.raises(ValueError):
            Activation.leaky_relu(0.0)
        with pytest.raises(ValueError):
            Activation.leaky_relu(-0.1)

    def test_leaky_relu_invert_negative_branch(self):
        act = Activation.leaky_relu(0.1)
        assert act.invert(np.array([-0.05]))[0] == pytest.approx(-0.5)

    def test_tanh_invert_zero(self):
        assert Activation.tanh().invert(np.array([0.0]))[0] == 0.0

    def test_tanh_invert_out_of_range(self):
        with pytest.raises(TanhRangeError):
            Activation.tanh().invert(np.array([1.0]))

    def test_relu_invert_rejects_nonpositive(self):
        with pytest.raises(ReluBranchError):
            Activation.relu().invert(np.array([0.0]))

    def test_round_trips(self):
        rng = np.random.default_rng(7)
        v = rng.uniform(-3, 3, size=200)
        for act in (Activation.identity(), Activation.leaky_relu(0.1)):
            np.testing.assert_allclose(act.invert(act.apply(v)), v, atol=1e-12)
        act = Activation.tanh()
        np.testing.assert_allclose(act.invert(act.apply(v)), v, atol=1e-10)
        pos = np.abs(v) + 0.1
        np.testing.assert_allclose(Activation.relu().invert(Activation.relu().apply(pos)),
                                   pos, atol=1e-12)


class TestNetworkConstruction:
    def test_dimension_chain_enforced(self):
        with pytest.raises(ValueError):
            Network([np.ones((2, 3)), np.ones((2, 4))], [Activation.identity()])

    def test_activation_count_enforced(self):
        with pytest.raises(ValueError):
            Network([np.ones((2, 2))], [Activation.identity()])

    def test_weights_immutable(self):
        net = Network([np.eye(2)], [])
        with pytest.raises(ValueError):
            net.weights[0][0, 0] = 5.0

    def test_batch_label_validation(self):
        with pytest.raises(ValueError):
            Batch(np.ones((2, 3)), labels=[0, 1])


class TestForward:
    def test_single_identity_layer(self):
        net = Network([np.eye(2)], [])
        np.testing.assert_allclose(forward(net, [[1.0], [2.0]]), [[1.0], [2.0]])

    def test_leaky_relu_negative_branch(self):
        net = Network([np.eye(1), np.eye(1)], [Activation.leaky_relu(0.1)])
        np.testing.assert_allclose(forward(net, [[-1.0]]), [[-0.1]])

    def test_matches_independent_evaluator(self, rng):
        net = random_network(rng, [4, 5, 3, 2], alpha=0.1)
        x = rng.standard_normal((4, 6))
        alphas = [0.1, 0.1, None]
        expected = reference_forward(net.weights, alphas, x)
        np.testing.assert_allclose(forward(net, x), expected, atol=1e-12)

    def test_dimension_mismatch(self):
        net = Network([np.eye(2)], [])
        with pytest.raises(ValueError):
            forward(net, np.ones((3, 1)))


class TestUpstreamDownstream:
    def test_upstream_first_layer_is_input(self, rng):
        net = random_network(rng, [3, 4, 2])
        x = rng.standard_normal((3, 5))
        np.testing.assert_array_equal(upstream(net, 1, x), x)

    def test_upstream_identity_net(self):
        net = Network([np.eye(2), np.eye(2)], [Activation.identity()])
        x = np.array([[1.0], [2.0]])
        np.testing.assert_allclose(upstream(net, 2, x), x)

    def test_upstream_final_layer_composes(self, rng):
        net = random_network(rng, [3, 4, 4, 2], alpha=0.1)
        x = rng.standard_normal((3, 5))
        # upstream at the last layer equals the forward pass of a network
        # built from the first M-1 layers followed by... the activation,
        # composed manually here.
        z = x
        for l in range(net.num_layers - 1):
            z = net.activations[l].apply(net.weights[l] @ z)
        np.testing.assert_allclose(upstream(net, net.num_layers, x), z, atol=1e-12)

    def test_downstream_last_layer_is_identity(self, rng):
        net = random_network(rng, [3, 4, 2])
        z = rng.standard_normal((2, 5))
        np.testing.assert_array_equal(downstream(net, net.num_layers, z), z)

    def test_downstream_penultimate_identity_activation(self, rng):
        net = random_network(rng, [3, 4, 2], activation="identity")
        z = rng.standard_normal((4, 5))
        np.testing.assert_allclose(downstream(net, net.num_layers - 1, z),
                                   net.weights[-1] @ z, atol=1e-13)

    def test_factorization_property(self):
        rng = np.random.default_rng(11)
        for _ in range(N_PROPERTY_CASES):
            depth = int(rng.integers(1, 5))
            dims = [int(d) for d in rng.integers(2, 6, size=depth + 1)]
            kind = rng.choice(["leaky_relu", "identity", "tanh", "relu"])
            net = random_network(rng, dims, activation=kind, alpha=0.1)
            x = rng.standard_normal((dims[0], int(rng.integers(1, 4))))
            y = forward(net, x)
            for n in range(1, net.num_layers + 1):
                z = net.weight(n) @ upstream(net, n, x)
                np.testing.assert_allclose(downstream(net, n, z), y, atol=1e-12)


class TestDownstreamInverse:
    def test_last_layer_returns_target(self, rng):
        net = random_network(rng, [3, 4, 2])
        y = rng.standard_normal((2, 3))
        z_ref = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(
            downstream_inverse(net, net.num_layers, y, z_ref), y)

    def test_penultimate_with_invertible_final(self, rng):
        w2 = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        net = Network([rng.standard_normal((3, 2)), w2], [Activation.identity()])
        y = rng.standard_normal((3, 2))
        z_ref = rng.standard_normal((3, 2))
        z_star = downstream_inverse(net, 1, y, z_ref)
        np.testing.assert_allclose(z_star, np.linalg.solve(w2, y), atol=1e-10)

    def test_round_trip_property(self):
        rng = np.random.default_rng(12)
        for _ in range(N_PROPERTY_CASES):
            depth = int(rng.integers(2, 5))
            kind = rng.choice(["leaky_relu", "identity", "tanh"])
            if kind == "tanh":
                # square layers: targets from a nearby true trajectory stay
                # inside the open tanh range at every inversion stage
                d = int(rng.integers(2, 6))
                dims = [d] * (depth + 1)
                net = random_invertible_network(rng, dims, activation=kind)
                x = rng.standard_normal((d, 2))
                y = forward(net, x + 0.1 * rng.standard_normal((d, 2)))
            else:
                dims = sorted(
                    (int(d) for d in rng.integers(2, 6, size=depth + 1)), reverse=True
                )
                net = random_invertible_network(rng, dims, activation=kind, alpha=0.1)
                x = rng.standard_normal((dims[0], 2))
                y = forward(net, x) + 0.1 * rng.standard_normal((dims[-1], 2))
            n = int(rng.integers(1, depth + 1))
            z_ref = net.weight(n) @ upstream(net, n, x)
            z_star = downstream_inverse(net, n, y, z_ref)
            back = downstream(net, n, z_star)
            assert np.max(np.abs(back - y)) <= 1e-8 * (1 + np.max(np.abs(y)))

    def test_leaky_relu_never_raises_branch_errors(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            dims = sorted(
                (int(d) for d in rng.integers(2, 6, size=4)), reverse=True)
            net = random_invertible_network(rng, dims, activation="leaky_relu", alpha=0.1)
            x = rng.standard_normal((dims[0], 1))
            z_ref = net.weight(1) @ upstream(net, 1, x)
            y = forward(net, x) + rng.standard_normal((dims[-1], 1))
            downstream_inverse(net, 1, y, z_ref)  # must not raise

    def test_relu_positive_branch_round_trip(self, rng):
        # strictly positive trajectory: all-positive weights and input
        w1 = rng.uniform(0.5, 1.5, size=(3, 3))
        w2 = rng.uniform(0.5, 1.5, size=(2, 3))
        net = Network([w1, w2], [Activation.relu()])
        x = rng.uniform(0.5, 1.5, size=(3, 1))
        z_ref = net.weight(1) @ upstream(net, 1, x)
        y = forward(net, x) * 1.05
        z_star = downstream_inverse(net, 1, y, z_ref)
        np.testing.assert_allclose(downstream(net, 1, z_star), y, rtol=1e-8)

    def test_relu_branch_violation_raises(self, rng):
        w1 = rng.uniform(0.5, 1.5, size=(2, 2))
        w2 = rng.uniform(0.5, 1.5, size=(2, 2))
        net = Network([w1, w2], [Activation.relu()])
        x = rng.uniform(0.5, 1.5, size=(2, 1))
        z_ref = net.weight(1) @ upstream(net, 1, x)
        # a target needing a negative pre-activation violates the branch
        y_bad = -forward(net, x)
        with pytest.raises(ReluBranchError):
            downstream_inverse(net, 1, y_bad, z_ref)

    def test_relu_reference_pattern_violation_raises(self, rng):
        w1 = np.array([[1.0, 0.0], [0.0, 1.0]])
        w2 = np.eye(2)
        net = Network([w1, w2], [Activation.relu()])
        z_ref = np.array([[1.0], [-1.0]])  # reference leaves the positive branch
        y = np.array([[1.0], [1.0]])
        with pytest.raises(ReluBranchError):
            downstream_inverse(net, 1, y, z_ref)

    def test_tanh_out_of_range_target(self, rng):
        net = Network([np.eye(2), np.eye(2)], [Activation.tanh()])
        z_ref = np.zeros((2, 1))
        with pytest.raises(TanhRangeError):
            downstream_inverse(net, 1, np.array([[1.5], [0.0]]), z_ref)

    def test_rank_deficient_downstream_raises(self):
        # W2 maps R^2 -> R^2 with rank 1; generic targets are unreachable
        w1 = np.eye(2)
        w2 = np.array([[1.0, 0.0], [1.0, 0.0]])
        net = Network([w1, w2], [Activation.identity()])
        z_ref = np.ones((2, 1))
        with pytest.raises(RankDeficientDownstreamError):
            downstream_inverse(net, 1, np.array([[1.0], [2.0]]), z_ref)


class TestSerialization:
    def test_round_trip_exact(self, rng):
        net = random_network(rng, [3, 5, 4, 2], activation="leaky_relu", alpha=0.1)
        text = net.to_json()
        back = Network.from_json(text)
        assert back.dims == net.dims
        for a, b in zip(net.weights, back.weights):
            np.testing.assert_array_equal(a, b)  # bit-exact
        assert back.activations == net.activations

    def test_schema_fields(self, rng):
        net = random_network(rng, [2, 3, 2], activation="tanh")
        doc = json.loads(net.to_json())
        assert set(doc) == {"dims", "activations", "weights"}
        assert doc["dims"] == [2, 3, 2]
        assert len(doc["weights"][0]) == 6  # row-major flat 3x2

    def test_file_round_trip(self, rng, tmp_path):
        net = random_network(rng, [2, 4, 3], alpha=0.2)
        path = tmp_path / "net.json"
        net.save(path)
        back = Network.load(path)
        for a, b in zip(net.weights, back.weights):
            np.testing.assert_array_equal(a, b)
