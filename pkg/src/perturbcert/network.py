"""Feedforward dense networks and their layer-wise decomposition.

A network is an ordered list of weight matrices W_1..W_M with an elementwise
activation after each of the first M-1 layers; the final layer emits raw
logits.  Layer indices are 1-based throughout the public API.  For any layer
n the forward map factors as

    forward(x) = downstream(n, W_n @ upstream(n, x))

and, when every downstream step is invertible at the operating point,
``downstream_inverse`` recovers the layer-n pre-activation that realizes a
prescribed logit target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import RankDeficientDownstreamError, ReluBranchError, TanhRangeError
from .linalg import as_matrix, pinv

# Margin kept away from +/-1 before atanh so inversion stays finite.
TANH_CLAMP = 1e-12
# Relative residual allowed for a least-squares layer inversion.
DOWNSTREAM_RESIDUAL_RTOL = 1e-6

IDENTITY = "identity"
LEAKY_RELU = "leaky_relu"
TANH = "tanh"
RELU = "relu"

_KINDS = (IDENTITY, LEAKY_RELU, TANH, RELU)


@dataclass(frozen=True)
class Activation:
    """Elementwise activation: identity, leaky_relu(alpha), tanh, or relu."""

    kind: str
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == LEAKY_RELU and not self.alpha > 0:
            raise ValueError("leaky_relu slope must be strictly positive")

    @classmethod
    def identity(cls) -> "Activation":
        return cls(IDENTITY)

    @classmethod
    def leaky_relu(cls, alpha: float) -> "Activation":
        return cls(LEAKY_RELU, float(alpha))

    @classmethod
    def tanh(cls) -> "Activation":
        return cls(TANH)

    @classmethod
    def relu(cls) -> "Activation":
        return cls(RELU)

    def apply(self, v: np.ndarray) -> np.ndarray:
        if self.kind == IDENTITY:
            return np.asarray(v, dtype=np.float64).copy()
        if self.kind == LEAKY_RELU:
            return np.where(v >= 0, v, self.alpha * v)
        if self.kind == TANH:
            return np.tanh(v)
        return np.maximum(v, 0.0)

    def invert(self, v: np.ndarray) -> np.ndarray:
        """Exact inverse on the valid domain; see module errors for failures."""
        v = np.asarray(v, dtype=np.float64)
        if self.kind == IDENTITY:
            return v.copy()
        if self.kind == LEAKY_RELU:
            return np.where(v >= 0, v, v / self.alpha)
        if self.kind == TANH:
            if np.any(np.abs(v) >= 1.0):
                raise TanhRangeError("tanh inversion target has magnitude >= 1")
            return np.arctanh(np.clip(v, -1.0 + TANH_CLAMP, 1.0 - TANH_CLAMP))
        # relu: bijective only on the open positive half-line
        if np.any(v <= 0):
            raise ReluBranchError(
                "relu inversion target has non-positive entries; "
                "the positive-branch inverse does not apply"
            )
        return v.copy()

    def derivative(self, v: np.ndarray) -> np.ndarray:
        """Elementwise derivative; kinks use the positive-branch slope."""
        v = np.asarray(v, dtype=np.float64)
        if self.kind == IDENTITY:
            return np.ones_like(v)
        if self.kind == LEAKY_RELU:
            return np.where(v >= 0, 1.0, self.alpha)
        if self.kind == TANH:
            t = np.tanh(v)
            return 1.0 - t * t
        return np.where(v >= 0, 1.0, 0.0)

    @property
    def is_one_lipschitz(self) -> bool:
        return self.kind != LEAKY_RELU or self.alpha <= 1.0

    def to_json(self) -> dict:
        if self.kind == LEAKY_RELU:
            return {"kind": self.kind, "alpha": self.alpha}
        return {"kind": self.kind}

    @classmethod
    def from_json(cls, obj: dict) -> "Activation":
        return cls(obj["kind"], float(obj.get("alpha", 0.0)))


activation_apply = Activation.apply
activation_invert = Activation.invert


class Network:
    """Immutable dense feedforward network (weights only, no biases).

    weights[l-1] is W_l with shape (d_l, d_{l-1}); activations[l-1] follows
    W_l for l = 1..M-1.  The final layer output is the logit matrix.
    """

    def __init__(self, weights, activations):
        ws = tuple(as_matrix(w, f"W_{i + 1}").copy() for i, w in enumerate(weights))
        if not ws:
            raise ValueError("network needs at least one layer")
        acts = tuple(activations)
        if len(acts) != len(ws) - 1:
            raise ValueError(
                f"expected {len(ws) - 1} activations for {len(ws)} layers, got {len(acts)}"
            )
        for i in range(1, len(ws)):
            if ws[i].shape[1] != ws[i - 1].shape[0]:
                raise ValueError(
                    f"W_{i + 1} has {ws[i].shape[1]} columns but W_{i} has "
                    f"{ws[i - 1].shape[0]} rows"
                )
        for w in ws:
            w.flags.writeable = False
        self.weights = ws
        self.activations = acts

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim,) + tuple(w.shape[0] for w in self.weights)

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.weights)

    def weight(self, n: int) -> np.ndarray:
        """1-based weight access: weight(1) is the first layer."""
        self._check_layer(n)
        return self.weights[n - 1]

    def _check_layer(self, n: int):
        if not 1 <= n <= self.num_layers:
            raise ValueError(f"layer index {n} out of range 1..{self.num_layers}")

    def with_weights(self, new_weights: dict[int, np.ndarray]) -> "Network":
        """Copy of the network with the given 1-based layers replaced."""
        ws = list(self.weights)
        for n, w in new_weights.items():
            self._check_layer(n)
            w = as_matrix(w, f"W_{n}")
            if w.shape != ws[n - 1].shape:
                raise ValueError(
                    f"replacement for W_{n} has shape {w.shape}, expected {ws[n - 1].shape}"
                )
            ws[n - 1] = w
        return Network(ws, self.activations)

    def with_deltas(self, deltas: dict[int, np.ndarray]) -> "Network":
        """Copy with deltas added to the given 1-based layers."""
        return self.with_weights(
            {n: self.weights[n - 1] + as_matrix(d, f"delta_{n}") for n, d in deltas.items()}
        )

    # ---- serialization ------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "dims": list(self.dims),
            "activations": [a.to_json() for a in self.activations],
            "weights": [w.ravel(order="C").tolist() for w in self.weights],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "Network":
        doc = json.loads(text)
        dims = doc["dims"]
        weights = []
        for l, flat in enumerate(doc["weights"]):
            shape = (dims[l + 1], dims[l])
            weights.append(np.asarray(flat, dtype=np.float64).reshape(shape, order="C"))
        acts = [Activation.from_json(a) for a in doc["activations"]]
        return cls(weights, acts)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class Batch:
    """Input columns with optional integer class labels per column."""

    x: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", as_matrix(self.x, "batch inputs"))
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (self.x.shape[1],):
                raise ValueError("labels must have one entry per column")
            object.__setattr__(self, "labels", lab)


def forward(net: Network, x) -> np.ndarray:
    """Logit matrix (c x s) for input columns x (d x s)."""
    z = as_matrix(x, "x")
    if z.shape[0] != net.input_dim:
        raise ValueError(f"input has {z.shape[0]} rows, network expects {net.input_dim}")
    for l in range(net.num_layers - 1):
        z = net.activations[l].apply(net.weights[l] @ z)
    return net.weights[-1] @ z


def upstream(net: Network, n: int, x) -> np.ndarray:
    """Representation entering layer n, i.e. the input pushed through layers 1..n-1."""
    net._check_layer(n)
    z = as_matrix(x, "x")
    if z.shape[0] != net.input_dim:
        raise ValueError(f"input has {z.shape[0]} rows, network expects {net.input_dim}")
    for l in range(n - 1):
        z = net.activations[l].apply(net.weights[l] @ z)
    return z


def downstream(net: Network, n: int, z) -> np.ndarray:
    """Map from the layer-n pre-activation to the logits.

    For n == M this is the identity; otherwise it applies the layer-n
    activation and the remaining weights in order.
    """
    net._check_layer(n)
    v = as_matrix(z, "z")
    if v.shape[0] != net.weights[n - 1].shape[0]:
        raise ValueError(
            f"pre-activation has {v.shape[0]} rows, layer {n} emits "
            f"{net.weights[n - 1].shape[0]}"
        )
    for l in range(n, net.num_layers):
        v = net.weights[l] @ net.activations[l - 1].apply(v)
    return v


def _invert_linear(w: np.ndarray, y: np.ndarray, v_ref: np.ndarray) -> np.ndarray:
    """Solve w @ v = y on the inverse branch through the reference point.

    Square invertible steps solve exactly.  Rectangular (full-row-rank)
    steps have a preimage family; the branch is pinned by taking the
    solution of minimum deviation from the reference trajectory value
    v_ref, so inverting the current output reproduces the current
    trajectory exactly.
    """
    rows, cols = w.shape
    v = None
    if rows == cols:
        try:
            v = np.linalg.solve(w, y)
        except np.linalg.LinAlgError:
            v = None
        if v is not None and not np.all(np.isfinite(v)):
            v = None
    if v is None:
        v = v_ref + pinv(w) @ (y - w @ v_ref)
    residual = float(np.linalg.norm(w @ v - y))
    if residual > DOWNSTREAM_RESIDUAL_RTOL * (1.0 + float(np.linalg.norm(y))):
        raise RankDeficientDownstreamError(
            f"layer inversion residual {residual:.3e} exceeds tolerance; "
            "target lies outside the image of the downstream map"
        )
    return v


def downstream_inverse(net: Network, n: int, y_target, z_reference) -> np.ndarray:
    """Pre-activation z* at layer n with downstream(net, n, z*) == y_target.

    Inversion walks back from the output along the branch anchored at the
    reference trajectory (the downstream pass of z_reference): linear steps
    use the exact inverse when square/invertible and the minimum-deviation
    right inverse otherwise; activation steps use the exact elementwise
    inverse.  Inverting the reference output itself recovers z_reference to
    round-off, so pre-image differences vanish where targets are unchanged.
    ReLU steps use the positive branch, valid only when both the reference
    trajectory and the computed target values are strictly positive at that
    layer; violations raise ReluBranchError.
    """
    net._check_layer(n)
    y = as_matrix(y_target, "y_target")
    if y.shape[0] != net.output_dim:
        raise ValueError(f"target has {y.shape[0]} rows, network emits {net.output_dim}")
    z_ref = as_matrix(z_reference, "z_reference")
    if z_ref.shape[0] != net.weights[n - 1].shape[0]:
        raise ValueError("z_reference rows must match the layer-n output dimension")

    # Reference values entering each downstream activation (pre) and each
    # downstream linear step (post), keyed by the 0-based weight index.
    ref_pre: dict[int, np.ndarray] = {}
    ref_post: dict[int, np.ndarray] = {}
    v_ref = z_ref
    for l in range(n, net.num_layers):
        ref_pre[l] = v_ref
        post = net.activations[l - 1].apply(v_ref)
        ref_post[l] = post
        v_ref = net.weights[l] @ post

    v = y
    for l in range(net.num_layers - 1, n - 1, -1):
        v = _invert_linear(net.weights[l], v, ref_post[l])
        act = net.activations[l - 1]
        if act.kind == RELU:
            if np.any(ref_pre[l] <= 0):
                raise ReluBranchError(
                    "reference trajectory leaves the positive relu branch"
                )
            if np.any(v <= 0):
                raise ReluBranchError(
                    "inversion target leaves the positive relu branch"
                )
            # Positive branch: relu is the identity there.
        else:
            v = act.invert(v)
    return v
