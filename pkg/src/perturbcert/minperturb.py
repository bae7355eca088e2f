"""Minimal weight perturbations: exact single-layer solutions and the
gradient-based multi-layer optimizer.

The exact solver computes, for a single layer n, the smallest-Frobenius-norm
update realizing a prescribed logit change: the layer-n pre-image difference
multiplied by the pseudoinverse of the upstream representation.  The result
is exact when the pre-image difference lies in the row space of the upstream
representation and the minimum-norm least-squares solution otherwise.  A
rank-restricted variant swaps in the truncated pseudoinverse.  Multi-layer
minima have no closed form; they are approached empirically with a
regularized cross-entropy objective, and an audit checks that norms for
nested layer sets never increase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import cross_entropy, forward_trace, make_optimizer, vjp_params
from .errors import NonFiniteLossError
from .linalg import as_matrix, effective_rank, pinv, pinv_truncated, svd
from .margin import margin, preimage_difference
from .network import Network, forward, upstream

# Residual below this counts as an exact (not least-squares) solution.
FEASIBILITY_TOL = 1e-6
# Relative tolerance for the rank-k support condition.
SUPPORT_RTOL = 1e-8
# Default slack for the nested-layer-set monotonicity audit.
MONOTONICITY_TOL = 0.05

DEFAULT_FLIP_EPSILON = 1e-3


@dataclass(frozen=True)
class FlipTarget:
    """A prescribed logit change: y_original -> y_tilde on selected columns.

    modified_columns and target_class are derived from the two logit
    matrices when not given: a column is modified if it differs anywhere,
    and its target class is the argmax of y_tilde there.
    """

    y_original: np.ndarray
    y_tilde: np.ndarray
    modified_columns: tuple[int, ...] = None
    target_class: tuple[int, ...] = None

    def __post_init__(self):
        y0 = as_matrix(self.y_original, "y_original")
        y1 = as_matrix(self.y_tilde, "y_tilde")
        if y0.shape != y1.shape:
            raise ValueError("y_original and y_tilde must have the same shape")
        object.__setattr__(self, "y_original", y0)
        object.__setattr__(self, "y_tilde", y1)
        if self.modified_columns is None:
            cols = tuple(int(j) for j in np.nonzero(np.any(y0 != y1, axis=0))[0])
            object.__setattr__(self, "modified_columns", cols)
        else:
            object.__setattr__(self, "modified_columns", tuple(self.modified_columns))
        if self.target_class is None:
            targets = tuple(int(np.argmax(y1[:, j])) for j in self.modified_columns)
            object.__setattr__(self, "target_class", targets)
        else:
            object.__setattr__(self, "target_class", tuple(self.target_class))


def make_flip_target(net: Network, x, t: int, epsilon: float = DEFAULT_FLIP_EPSILON) -> FlipTarget:
    """Target that moves a correctly classified sample just past the boundary.

    Shifts mass from the true class t to the runner-up p by gamma/2 + epsilon,
    leaving the new pairwise margin at exactly -2 epsilon.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = as_matrix(x, "x")
    if x.shape[1] != 1:
        raise ValueError("make_flip_target expects a single column")
    y = forward(net, x)
    rep = margin(y[:, 0], t)
    if rep.gamma <= 0:
        raise ValueError(
            f"sample is not strictly correctly classified (margin {rep.gamma:.3e})"
        )
    shift = rep.gamma / 2.0 + epsilon
    y_tilde = y.copy()
    y_tilde[t, 0] -= shift
    y_tilde[rep.runner_up, 0] += shift
    return FlipTarget(
        y_original=y,
        y_tilde=y_tilde,
        modified_columns=(0,),
        target_class=(rep.runner_up,),
    )


@dataclass(frozen=True)
class PerturbationResult:
    """A candidate weight update for one or more layers.

    frobenius_norm is the norm of the stacked deltas (all touched layers).
    constraint_residual is ||forward(perturbed) - y_tilde||_F for target-driven
    solvers and None for the empirical optimizer, which has no equality
    target.  flipped reports whether every modified column is classified to
    its target class after the update.
    """

    layers: tuple[int, ...]
    deltas: dict[int, np.ndarray]
    frobenius_norm: float
    achieved_logits: np.ndarray
    constraint_residual: float | None
    flipped: bool
    rank_of_delta: int
    least_squares_only: bool = False
    support_ok: bool = True
    rank_used: int | None = None
    iterations: int | None = None

    def to_record(self) -> dict:
        """JSON-ready summary (deltas reported by norm, not by entry)."""
        return {
            "layers": list(self.layers),
            "frobenius_norm": self.frobenius_norm,
            "constraint_residual": self.constraint_residual,
            "flipped": self.flipped,
            "rank_of_delta": self.rank_of_delta,
            "least_squares_only": self.least_squares_only,
            "support_ok": self.support_ok,
            "rank_used": self.rank_used,
            "iterations": self.iterations,
            "per_layer_norms": {
                str(n): float(np.linalg.norm(d)) for n, d in sorted(self.deltas.items())
            },
        }


def _stacked_norm(deltas: dict[int, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(d * d)) for d in deltas.values())))


def _flip_status(logits: np.ndarray, target: FlipTarget) -> bool:
    if not target.modified_columns:
        return False
    pred = np.argmax(logits, axis=0)
    return all(
        int(pred[j]) == c for j, c in zip(target.modified_columns, target.target_class)
    )


def _finalize_exact(net: Network, n: int, x: np.ndarray, target: FlipTarget,
                    delta: np.ndarray, support_ok: bool,
                    rank_used: int | None) -> PerturbationResult:
    achieved = forward(net.with_deltas({n: delta}), x)
    residual = float(np.linalg.norm(achieved - target.y_tilde))
    return PerturbationResult(
        layers=(n,),
        deltas={n: delta},
        frobenius_norm=float(np.linalg.norm(delta)),
        achieved_logits=achieved,
        constraint_residual=residual,
        flipped=_flip_status(achieved, target),
        rank_of_delta=effective_rank(delta) if np.any(delta) else 0,
        least_squares_only=residual > FEASIBILITY_TOL,
        support_ok=support_ok,
        rank_used=rank_used,
    )


def minimal_perturbation_exact(net: Network, n: int, x, target: FlipTarget) -> PerturbationResult:
    """Closed-form minimum-Frobenius-norm single-layer update.

    delta = (pre-image difference) @ pinv(upstream representation).  When the
    target's pre-image difference leaves the row space of the upstream
    representation no exact solution exists; the result is then the
    least-squares minimum-norm update and is flagged accordingly.
    """
    x = as_matrix(x, "x")
    diff = preimage_difference(net, n, target.y_tilde, x)
    rep = upstream(net, n, x)
    delta = diff @ pinv(rep)
    return _finalize_exact(net, n, x, target, delta, support_ok=True, rank_used=None)


def minimal_perturbation_rank_k(net: Network, n: int, x, target: FlipTarget,
                                k: int) -> PerturbationResult:
    """Rank-restricted variant using the truncated pseudoinverse.

    Exact when the pre-image difference is supported on the top-k right
    singular subspace of the upstream representation; otherwise the dropped
    component shows up in the residual and support_ok is False.
    """
    x = as_matrix(x, "x")
    diff = preimage_difference(net, n, target.y_tilde, x)
    rep = upstream(net, n, x)
    tp = pinv_truncated(rep, k)
    d = svd(rep)
    r = tp.rank_used
    vk = d.vt[:r].T if r else np.zeros((rep.shape[1], 0))
    proj = diff @ vk @ vk.T
    diff_norm = float(np.linalg.norm(diff))
    support_ok = float(np.linalg.norm(diff - proj)) <= SUPPORT_RTOL * max(diff_norm, 1.0)
    delta = diff @ tp.matrix
    return _finalize_exact(net, n, x, target, delta, support_ok=support_ok, rank_used=r)


def minimal_perturbation_empirical(net: Network, layers, x, target_class, lam: float,
                                   learning_rate: float = 1e-3, iterations: int = 3000,
                                   optimizer: str = "adam", seed: int = 0) -> PerturbationResult:
    """Gradient-based search for a small perturbation that flips the class.

    Minimizes cross-entropy toward the per-column targets plus
    lam * sum of squared Frobenius norms of the deltas, updating only the
    listed (1-based) layers.  target_class may be a single index (applied to
    every column) or one index per column.
    """
    layer_list = sorted(set(int(n) for n in layers))
    if not layer_list:
        raise ValueError("layer set must be non-empty")
    for n in layer_list:
        net._check_layer(n)
    if lam <= 0:
        raise ValueError("lam must be positive")
    x = as_matrix(x, "x")
    s = x.shape[1]
    targets = np.asarray(target_class, dtype=np.int64)
    if targets.ndim == 0:
        targets = np.full(s, int(targets))
    if targets.shape != (s,):
        raise ValueError("target_class must be a single index or one per column")

    shapes = [net.weights[n - 1].shape for n in layer_list]
    deltas = [np.zeros(sh) for sh in shapes]
    opt = make_optimizer(optimizer, shapes, lr=learning_rate)
    # Seed reserved for optimizers with stochastic state; deltas start at zero.
    _ = np.random.default_rng(seed)

    layer_set = set(layer_list)
    for it in range(iterations):
        perturbed = net.with_deltas(dict(zip(layer_list, deltas)))
        trace = forward_trace(perturbed, x)
        ce, dlogits = cross_entropy(trace.logits, targets)
        penalty = sum(float(np.sum(d * d)) for d in deltas)
        loss = ce + lam * penalty
        if not np.isfinite(loss):
            raise NonFiniteLossError(f"loss became non-finite at iteration {it}", iteration=it)
        grads_map = vjp_params(perturbed, trace, dlogits, layer_set)
        grads = [grads_map[n] + 2.0 * lam * d for n, d in zip(layer_list, deltas)]
        deltas = opt.step(deltas, grads)

    delta_map = dict(zip(layer_list, deltas))
    perturbed = net.with_deltas(delta_map)
    achieved = forward(perturbed, x)
    pred = np.argmax(achieved, axis=0)
    return PerturbationResult(
        layers=tuple(layer_list),
        deltas=delta_map,
        frobenius_norm=_stacked_norm(delta_map),
        achieved_logits=achieved,
        constraint_residual=None,
        flipped=bool(np.all(pred == targets)),
        rank_of_delta=max(
            (effective_rank(d) if np.any(d) else 0) for d in delta_map.values()
        ),
        iterations=iterations,
    )


@dataclass(frozen=True)
class MonotonicityViolation:
    smaller_set: tuple[int, ...]
    larger_set: tuple[int, ...]
    smaller_norm: float
    larger_norm: float


@dataclass(frozen=True)
class MonotonicityReport:
    checked_pairs: int
    tolerance: float
    violations: tuple[MonotonicityViolation, ...] = field(default=())

    @property
    def ok(self) -> bool:
        return not self.violations


def monotonicity_audit(results, tolerance: float = MONOTONICITY_TOL) -> MonotonicityReport:
    """Check that enlarging the perturbed layer set never raises the norm.

    results maps layer sets (any iterable of 1-based indices) to either a
    PerturbationResult or a bare norm.  Every nested pair (n subset of m) is
    checked; norm(m) may exceed norm(n) only by the optimizer-slack
    tolerance.
    """
    entries = []
    for key, value in results.items():
        layer_set = frozenset(int(i) for i in key)
        norm = value.frobenius_norm if isinstance(value, PerturbationResult) else float(value)
        entries.append((layer_set, norm))
    violations = []
    checked = 0
    for i, (set_a, norm_a) in enumerate(entries):
        for set_b, norm_b in entries[i + 1:]:
            if set_a < set_b:
                small, large = (set_a, norm_a), (set_b, norm_b)
            elif set_b < set_a:
                small, large = (set_b, norm_b), (set_a, norm_a)
            else:
                continue
            checked += 1
            if large[1] > small[1] * (1.0 + tolerance):
                violations.append(MonotonicityViolation(
                    smaller_set=tuple(sorted(small[0])),
                    larger_set=tuple(sorted(large[0])),
                    smaller_norm=small[1],
                    larger_norm=large[1],
                ))
    return MonotonicityReport(
        checked_pairs=checked,
        tolerance=tolerance,
        violations=tuple(violations),
    )
