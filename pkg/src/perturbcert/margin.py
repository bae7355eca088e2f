"""Logit margins, pre-image differences, and the margin-Lipschitz bound.

The central inequality: any parameter perturbation that flips the predicted
class of a sample must satisfy

    gamma <= 2**((p-1)/p) * L * ||delta_theta||_p

where gamma is the pre-softmax margin and L the parameter-Lipschitz constant
at that sample.  Its contrapositive certifies robustness: when the
inequality fails, no class flip is possible for that perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix, spectral_norm
from .network import Network, downstream_inverse, forward, upstream


@dataclass(frozen=True)
class MarginReport:
    """Margin of one logit vector: gamma = logits[t] - max over other classes."""

    true_class: int
    runner_up: int
    gamma: float
    logits: tuple[float, ...]


def margin(logits, t: int) -> MarginReport:
    """Margin of class t against the best competitor (ties -> lowest index)."""
    y = np.asarray(logits, dtype=np.float64).ravel()
    c = y.size
    if c < 2:
        raise ValueError("margin needs at least two classes")
    if not 0 <= t < c:
        raise ValueError(f"class index {t} out of range for {c} classes")
    others = np.delete(np.arange(c), t)
    p = others[int(np.argmax(y[others]))]
    return MarginReport(
        true_class=t,
        runner_up=int(p),
        gamma=float(y[t] - y[p]),
        logits=tuple(float(v) for v in y),
    )


def margin_batch(logits, labels) -> list[MarginReport]:
    y = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    return [margin(y[:, j], int(labels[j])) for j in range(y.shape[1])]


@dataclass(frozen=True)
class BoundCheck:
    """One evaluation of the margin-Lipschitz inequality.

    satisfied == False certifies that this perturbation cannot flip the
    predicted class of the sample in question.
    """

    gamma: float
    lipschitz: float
    delta_norm: float
    p: float
    rhs: float
    satisfied: bool


def margin_lipschitz_check(gamma: float, lipschitz: float, delta_norm: float,
                           p: float = 2.0) -> BoundCheck:
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if lipschitz < 0 or delta_norm < 0:
        raise ValueError("lipschitz constant and perturbation norm must be >= 0")
    rhs = 2.0 ** ((p - 1.0) / p) * lipschitz * delta_norm
    return BoundCheck(
        gamma=float(gamma),
        lipschitz=float(lipschitz),
        delta_norm=float(delta_norm),
        p=float(p),
        rhs=float(rhs),
        satisfied=bool(gamma <= rhs),
    )


def preimage_difference(net: Network, n: int, y_tilde, x) -> np.ndarray:
    """Change in the layer-n pre-activation that moves the logits to y_tilde.

    Returns the columnwise difference between the downstream inverses of the
    target and of the current output.  Columns of y_tilde that equal the
    current output exactly yield exactly-zero columns.
    """
    x = as_matrix(x, "x")
    y_tilde = as_matrix(y_tilde, "y_tilde")
    y = forward(net, x)
    if y_tilde.shape != y.shape:
        raise ValueError(f"target shape {y_tilde.shape} does not match output {y.shape}")
    z_ref = net.weight(n) @ upstream(net, n, x)
    z_target = downstream_inverse(net, n, y_tilde, z_ref)
    z_current = downstream_inverse(net, n, y, z_ref)
    return z_target - z_current


def lipschitz_closed_form_single_layer(net: Network, n: int, x) -> float:
    """Spectral norm of the downstream weight product times the upstream norm.

    Treats the map W_n -> logits as if the downstream activations were
    absent; exact for a linear downstream (identity activations), the usual
    single-sample surrogate otherwise.  Requires 1-Lipschitz activations.
    """
    net._check_layer(n)
    for act in net.activations:
        if not act.is_one_lipschitz:
            raise ValueError("closed-form constant requires 1-Lipschitz activations")
    x = as_matrix(x, "x")
    if x.shape[1] != 1:
        raise ValueError("closed-form constant is defined for a single sample")
    z = upstream(net, n, x)
    product = None
    for l in range(n, net.num_layers):
        w = net.weights[l]
        product = w if product is None else w @ product
    down = 1.0 if product is None else spectral_norm(product)
    return down * float(np.linalg.norm(z))
