"""Compression operators and their margin diagnostics.

Three parameter maps - magnitude pruning, symmetric/affine quantization, and
truncated-SVD low-rank replacement - plus two analyses of what the low-rank
tail does to a classification margin: the exact pairwise margin change from
discarding trailing singular modes, and the split of output energy between
the retained subspace and the tail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix, low_rank_approx, svd
from .network import Network


@dataclass(frozen=True)
class Prune:
    """Zero the smallest-magnitude fraction rho of the in-scope weights."""

    rho: float
    scope: tuple[int, ...] | None = None  # 1-based layers; None = all

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if self.scope is not None:
            object.__setattr__(self, "scope", tuple(int(n) for n in self.scope))

    def label(self) -> str:
        return f"prune:{self.rho:g}"


@dataclass(frozen=True)
class Quantize:
    """Uniform affine quantize-dequantize of the in-scope weights.

    Symmetric mode (zero_point 0) calibrates a per-layer scale from the
    max-abs entry and clamps codes to +/- (2**(bits-1) - 1).  Asymmetric
    mode applies the given scale/zero_point with codes in [0, 2**bits - 1].
    """

    bits: int
    scale: float | None = None
    zero_point: int = 0
    symmetric: bool = True
    scope: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 1 <= self.bits <= 32:
            raise ValueError(f"bits must be in [1, 32], got {self.bits}")
        if self.symmetric and self.zero_point != 0:
            raise ValueError("symmetric quantization requires zero_point == 0")
        if not self.symmetric and (self.scale is None or self.scale <= 0):
            raise ValueError("asymmetric quantization requires a positive scale")
        if self.scale is not None and self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.scope is not None:
            object.__setattr__(self, "scope", tuple(int(n) for n in self.scope))

    def label(self) -> str:
        mode = "sym" if self.symmetric else f"s={self.scale:g},z={self.zero_point}"
        return f"quant:b={self.bits},{mode}"


@dataclass(frozen=True)
class LowRank:
    """Replace one layer's weights by their best rank-k approximation."""

    layer: int
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")

    def label(self) -> str:
        return f"lowrank:layer={self.layer},k={self.k}"


@dataclass(frozen=True)
class Identity:
    """No-op placeholder representing the full-precision model."""

    def label(self) -> str:
        return "identity"


CompressionOp = Prune | Quantize | LowRank | Identity


def parse_compression_op(text: str) -> CompressionOp:
    """Parse the CLI/config syntax, e.g. 'prune:0.2', 'quant:b=8,sym',
    'lowrank:layer=5,k=8', 'identity'."""
    text = text.strip()
    if text == "identity":
        return Identity()
    head, _, rest = text.partition(":")
    if head == "prune":
        return Prune(rho=float(rest))
    if head == "quant":
        fields = [f.strip() for f in rest.split(",") if f.strip()]
        kwargs: dict = {"symmetric": False}
        for f in fields:
            if f == "sym":
                kwargs["symmetric"] = True
            elif f.startswith("b="):
                kwargs["bits"] = int(f[2:])
            elif f.startswith("s="):
                kwargs["scale"] = float(f[2:])
            elif f.startswith("z="):
                kwargs["zero_point"] = int(f[2:])
            else:
                raise ValueError(f"unknown quantize field {f!r}")
        if "bits" not in kwargs:
            raise ValueError("quantize op needs b=<bits>")
        return Quantize(**kwargs)
    if head == "lowrank":
        fields = dict(f.strip().split("=", 1) for f in rest.split(","))
        return LowRank(layer=int(fields["layer"]), k=int(fields["k"]))
    raise ValueError(f"cannot parse compression op {text!r}")


def _scope_layers(net: Network, scope) -> list[int]:
    if scope is None:
        return list(range(1, net.num_layers + 1))
    layers = sorted(set(int(n) for n in scope))
    for n in layers:
        net._check_layer(n)
    return layers


def _delta_norm(old: Network, new: Network) -> float:
    total = 0.0
    for a, b in zip(old.weights, new.weights):
        d = b - a
        total += float(np.sum(d * d))
    return math.sqrt(total)


def prune(net: Network, rho: float, scope=None) -> tuple[Network, float]:
    """Magnitude pruning over the jointly flattened in-scope weights.

    Zeros the ceil(rho * T) entries of smallest magnitude; ties at the
    threshold are resolved toward lower flat index, and pre-existing zeros
    count toward the quota.  Returns the pruned network and the l2 norm of
    the parameter change.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    layers = _scope_layers(net, scope)
    sizes = [net.weights[n - 1].size for n in layers]
    total = sum(sizes)
    quota = math.ceil(rho * total)
    flat = np.concatenate([np.abs(net.weights[n - 1]).ravel() for n in layers])
    keep = np.ones(total, dtype=bool)
    if quota > 0:
        order = np.argsort(flat, kind="stable")  # stable: ties -> lower flat index
        keep[order[:quota]] = False
    new_weights = {}
    offset = 0
    for n, size in zip(layers, sizes):
        mask = keep[offset:offset + size].reshape(net.weights[n - 1].shape)
        new_weights[n] = np.where(mask, net.weights[n - 1], 0.0)
        offset += size
    pruned = net.with_weights(new_weights)
    return pruned, _delta_norm(net, pruned)


def _quantize_matrix(w: np.ndarray, op: Quantize) -> np.ndarray:
    if op.symmetric:
        max_code = 2 ** (op.bits - 1) - 1
        max_abs = float(np.max(np.abs(w))) if w.size else 0.0
        scale = max_abs / max_code if max_abs > 0 and max_code > 0 else 1.0
        if max_abs == 0.0:
            return w.copy()
        codes = np.clip(np.round(w / scale), -max_code, max_code)
        return codes * scale
    codes = np.clip(np.round(w / op.scale) + op.zero_point, 0, 2 ** op.bits - 1)
    return (codes - op.zero_point) * op.scale


def quantize(net: Network, op: Quantize, scope=None) -> tuple[Network, float]:
    """Quantize-dequantize the in-scope layers; see Quantize for the modes.

    Rounding is nearest with ties to even.  An all-zero layer is left
    unchanged (its scale would be degenerate).
    """
    layers = _scope_layers(net, scope if scope is not None else op.scope)
    new_weights = {n: _quantize_matrix(net.weights[n - 1], op) for n in layers}
    quantized = net.with_weights(new_weights)
    return quantized, _delta_norm(net, quantized)


def apply_low_rank(net: Network, layer: int, k: int) -> tuple[Network, float]:
    """Replace one layer by its best rank-k approximation."""
    net._check_layer(layer)
    w = net.weights[layer - 1]
    if not 1 <= k <= min(w.shape):
        raise ValueError(f"k must be in [1, {min(w.shape)}], got {k}")
    approx = low_rank_approx(w, k)
    replaced = net.with_weights({layer: approx})
    return replaced, _delta_norm(net, replaced)


def apply_op(net: Network, op: CompressionOp) -> tuple[Network, float]:
    """Dispatch a compression op; returns (new network, parameter l2 change)."""
    if isinstance(op, Identity):
        return net, 0.0
    if isinstance(op, Prune):
        return prune(net, op.rho, op.scope)
    if isinstance(op, Quantize):
        return quantize(net, op)
    if isinstance(op, LowRank):
        return apply_low_rank(net, op.layer, op.k)
    raise TypeError(f"unknown compression op {op!r}")


@dataclass(frozen=True)
class LowRankMarginAnalysis:
    """Pairwise margin effect of truncating a weight matrix at each rank k.

    m0 is the pre-truncation margin delta^T W z for delta = e_t - e_p.
    s_k sums the discarded singular contributions; the truncated margin is
    m0 - s_k, so the t/p order flips exactly when s_k > m0.  The residual
    norms quantify the two orthogonality conditions under which s_k
    vanishes: z inside the retained right subspace, or delta inside the
    retained left subspace.
    """

    true_class: int
    runner_up: int
    m0: float
    ks: tuple[int, ...]
    s_k: dict[int, float]
    flip_predicted: dict[int, bool]
    input_residual_norm: dict[int, float]
    output_residual_norm: dict[int, float]
    pairwise_only: bool


def low_rank_margin_analysis(w_final, z, t: int, p: int, ks,
                             pairwise_only: bool = False) -> LowRankMarginAnalysis:
    """Margin change caused by rank-k truncation of the final weight matrix.

    Set pairwise_only when (t, p) are not the top-2 logits of W z: the flip
    prediction then refers only to the t/p pair ordering, not the argmax.
    """
    w = as_matrix(w_final, "w_final")
    zv = np.asarray(z, dtype=np.float64).ravel()
    if zv.size != w.shape[1]:
        raise ValueError("z length must match the weight column count")
    c = w.shape[0]
    if t == p:
        raise ValueError("t and p must differ")
    if not (0 <= t < c and 0 <= p < c):
        raise ValueError("class indices out of range")
    delta = np.zeros(c)
    delta[t] = 1.0
    delta[p] = -1.0
    d = svd(w)
    r = d.sigma.size
    # Per-mode contributions sigma_i (delta^T u_i)(v_i^T z).
    du = d.u.T @ delta
    vz = d.vt @ zv
    contrib = d.sigma * du * vz
    m0 = float(delta @ (w @ zv))
    s_k: dict[int, float] = {}
    flips: dict[int, bool] = {}
    in_res: dict[int, float] = {}
    out_res: dict[int, float] = {}
    for k in ks:
        k = int(k)
        if not 1 <= k <= min(w.shape):
            raise ValueError(f"k must be in [1, {min(w.shape)}], got {k}")
        sk = float(np.sum(contrib[k:])) if k < r else 0.0
        s_k[k] = sk
        flips[k] = sk > m0
        in_res[k] = float(np.linalg.norm(zv - d.vt[:k].T @ (d.vt[:k] @ zv)))
        out_res[k] = float(np.linalg.norm(delta - d.u[:, :k] @ (d.u[:, :k].T @ delta)))
    return LowRankMarginAnalysis(
        true_class=t,
        runner_up=p,
        m0=m0,
        ks=tuple(int(k) for k in ks),
        s_k=s_k,
        flip_predicted=flips,
        input_residual_norm=in_res,
        output_residual_norm=out_res,
        pairwise_only=pairwise_only,
    )


@dataclass(frozen=True)
class EnergySplit:
    """Squared output energy through the retained rank-k part vs the tail.

    Normalization is reported two ways: by each component's own Frobenius
    norm (retained_own / tail_own) and by the full matrix norm
    (retained_full / tail_full).  The raw squared norms always satisfy
    retained_sq + tail_sq == ||W z||^2 because the two left singular
    subspaces are orthogonal.  When a direction is given the outputs are
    first projected onto it.
    """

    retained_sq: float
    tail_sq: float
    retained_own: float
    tail_own: float
    retained_full: float
    tail_full: float


def energy_split(w, z, k: int, direction=None) -> EnergySplit:
    w = as_matrix(w, "w")
    zv = np.asarray(z, dtype=np.float64).ravel()
    if zv.size != w.shape[1]:
        raise ValueError("z length must match the weight column count")
    z_norm_sq = float(zv @ zv)
    if z_norm_sq == 0.0:
        raise ValueError("z must be nonzero")
    if not 1 <= k <= min(w.shape):
        raise ValueError(f"k must be in [1, {min(w.shape)}], got {k}")
    wk = low_rank_approx(w, k)
    tail = w - wk
    out_k = wk @ zv
    out_tail = tail @ zv
    if direction is not None:
        dv = np.asarray(direction, dtype=np.float64).ravel()
        if dv.size != w.shape[0]:
            raise ValueError("direction length must match the weight row count")
        retained_sq = float(dv @ out_k) ** 2
        tail_sq = float(dv @ out_tail) ** 2
    else:
        retained_sq = float(out_k @ out_k)
        tail_sq = float(out_tail @ out_tail)
    wk_sq = float(np.sum(wk * wk))
    tail_norm_sq = float(np.sum(tail * tail))
    full_sq = float(np.sum(w * w))

    def _ratio(num: float, denom: float) -> float:
        return num / denom if denom > 0 else 0.0

    return EnergySplit(
        retained_sq=retained_sq,
        tail_sq=tail_sq,
        retained_own=_ratio(retained_sq, wk_sq * z_norm_sq),
        tail_own=_ratio(tail_sq, tail_norm_sq * z_norm_sq),
        retained_full=_ratio(retained_sq, full_sq * z_norm_sq),
        tail_full=_ratio(tail_sq, full_sq * z_norm_sq),
    )
