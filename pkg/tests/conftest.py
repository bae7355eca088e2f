"""Shared helpers for building seeded random networks and inputs."""

import numpy as np
import pytest

from perturbcert import Activation, Network


def random_network(rng, dims, activation="leaky_relu", alpha=0.1, scale=1.0):
    """Random dense network with the given layer dims [d0, d1, ..., dM]."""
    weights = [
        scale * rng.standard_normal((dims[l + 1], dims[l])) / np.sqrt(dims[l])
        for l in range(len(dims) - 1)
    ]
    if activation == "leaky_relu":
        act = Activation.leaky_relu(alpha)
    elif activation == "identity":
        act = Activation.identity()
    elif activation == "tanh":
        act = Activation.tanh()
    elif activation == "relu":
        act = Activation.relu()
    else:
        raise ValueError(activation)
    return Network(weights, [act] * (len(dims) - 2))


def random_invertible_network(rng, dims, activation="leaky_relu", alpha=0.1):
    """Like random_network but with non-increasing dims so every downstream
    linear step has full row rank (right inverses exist)."""
    for a, b in zip(dims, dims[1:]):
        assert b <= a, "dims must be non-increasing for guaranteed invertibility"
    return random_network(rng, dims, activation=activation, alpha=alpha)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
