"""Hand-rolled reverse-mode differentiation for the dense networks here.

The networks are small enough that an explicit trace + backward sweep beats
pulling in a framework.  Kink points of relu/leaky_relu use the
positive-branch slope so gradients are deterministic.
"""

from __future__ import annotations

import numpy as np

from .network import Network


class ForwardTrace:
    """Per-layer pre- and post-activation values for one forward pass."""

    __slots__ = ("inputs", "preacts", "logits")

    def __init__(self, inputs: list[np.ndarray], preacts: list[np.ndarray], logits: np.ndarray):
        self.inputs = inputs      # inputs[l] enters W_{l+1}
        self.preacts = preacts    # preacts[l] = W_{l+1} @ inputs[l]
        self.logits = logits


def forward_trace(net: Network, x: np.ndarray) -> ForwardTrace:
    z = np.asarray(x, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    inputs = []
    preacts = []
    for l in range(net.num_layers):
        inputs.append(z)
        a = net.weights[l] @ z
        preacts.append(a)
        z = net.activations[l].apply(a) if l < net.num_layers - 1 else a
    return ForwardTrace(inputs, preacts, z)


def vjp_params(net: Network, trace: ForwardTrace, cotangent: np.ndarray,
               layers: set[int] | None = None) -> dict[int, np.ndarray]:
    """Gradients of <cotangent, logits> w.r.t. the weights of the given layers.

    layers uses 1-based indices; None means all layers.  The backward sweep
    always runs down to the lowest requested layer.
    """
    wanted = set(range(1, net.num_layers + 1)) if layers is None else set(layers)
    lowest = min(wanted)
    grads: dict[int, np.ndarray] = {}
    g = np.asarray(cotangent, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    for l in range(net.num_layers, 0, -1):
        if l in wanted:
            grads[l] = g @ trace.inputs[l - 1].T
        if l - 1 < lowest:
            break
        g = net.weights[l - 1].T @ g
        g = g * net.activations[l - 2].derivative(trace.preacts[l - 2])
    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=0, keepdims=True)


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over columns and its gradient w.r.t. logits."""
    y = np.asarray(logits, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    t = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    s = y.shape[1]
    if t.shape != (s,):
        raise ValueError(f"labels shape {t.shape} does not match {s} columns")
    shifted = y - np.max(y, axis=0, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=0))
    loss = float(np.mean(lse - shifted[t, np.arange(s)]))
    grad = softmax(y)
    grad[t, np.arange(s)] -= 1.0
    return loss, grad / s


class AdamState:
    """Adaptive-moment update over a list of arrays (one per trained tensor)."""

    def __init__(self, shapes, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        out = []
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


class SgdState:
    """Plain gradient descent with the same step interface as AdamState."""

    def __init__(self, shapes, lr: float = 1e-3):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        return [p - self.lr * g for p, g in zip(params, grads)]


def make_optimizer(name: str, shapes, lr: float):
    if name == "adam":
        return AdamState(shapes, lr=lr)
    if name == "sgd":
        return SgdState(shapes, lr=lr)
    raise ValueError(f"unknown optimizer {name!r} (expected 'adam' or 'sgd')")
