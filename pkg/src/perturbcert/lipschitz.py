"""Parameter-space Lipschitz estimation by finite-difference power iteration.

For a fixed input the local parameter Lipschitz constant equals the top
singular value of the Jacobian of the logits with respect to the (selected)
weights.  The estimator applies that Jacobian with a central finite
difference, applies its transpose with an analytic backward sweep, and
normalizes - the classic power iteration, never forming the Jacobian.  A
dense finite-difference Jacobian plus SVD serves as the oracle for small
networks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import forward_trace, vjp_params
from .errors import ZeroGradientError
from .linalg import SvdResult, as_column, svd
from .network import LEAKY_RELU, RELU, Network

DEFAULT_ITERATIONS = 10
DEFAULT_STEP = 1e-3
CONVERGENCE_RTOL = 1e-4
MAX_RESTARTS = 5
MAX_STEP_HALVINGS = 6
DENSE_PARAM_CAP = 20000


@dataclass(frozen=True)
class ParamSubset:
    """Selected weight entries: 1-based layer indices plus boolean masks."""

    layers: tuple[int, ...]
    masks: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("parameter subset must be non-empty")
        if len(self.layers) != len(self.masks):
            raise ValueError("one mask per selected layer required")
        masks = []
        total = 0
        for mask in self.masks:
            m = np.asarray(mask, dtype=bool)
            m.flags.writeable = False
            masks.append(m)
            total += int(np.count_nonzero(m))
        if total == 0:
            raise ValueError("parameter subset selects no entries")
        object.__setattr__(self, "masks", tuple(masks))
        object.__setattr__(self, "_count", total)

    @property
    def count(self) -> int:
        return self._count

    def validate_against(self, net: Network):
        for n, mask in zip(self.layers, self.masks):
            net._check_layer(n)
            if mask.shape != net.weights[n - 1].shape:
                raise ValueError(
                    f"mask for layer {n} has shape {mask.shape}, "
                    f"weight has {net.weights[n - 1].shape}"
                )

    @classmethod
    def of_layers(cls, net: Network, layers) -> "ParamSubset":
        """Every entry of the given 1-based layers."""
        ls = tuple(sorted(set(int(n) for n in layers)))
        masks = []
        for n in ls:
            net._check_layer(n)
            masks.append(np.ones(net.weights[n - 1].shape, dtype=bool))
        return cls(layers=ls, masks=tuple(masks))

    @classmethod
    def full(cls, net: Network) -> "ParamSubset":
        return cls.of_layers(net, range(1, net.num_layers + 1))

    def flatten(self, arrays: dict[int, np.ndarray]) -> np.ndarray:
        """Concatenate the selected entries of per-layer arrays."""
        parts = [arrays[n][mask] for n, mask in zip(self.layers, self.masks)]
        return np.concatenate(parts)

    def unflatten(self, vec: np.ndarray) -> dict[int, np.ndarray]:
        """Per-layer dense arrays with vec scattered onto the selected entries."""
        out = {}
        offset = 0
        for n, mask in zip(self.layers, self.masks):
            k = int(np.count_nonzero(mask))
            arr = np.zeros(mask.shape)
            arr[mask] = vec[offset:offset + k]
            out[n] = arr
            offset += k
        return out


@dataclass(frozen=True)
class LipschitzEstimate:
    """Power-iteration output: sigma_hat with its convergence trace."""

    sigma_hat: float
    iterations: int
    epsilon: float
    trace: tuple[float, ...]
    converged: bool
    pattern_unstable: bool = False
    restarts: int = 0


def _perturbed_forward(net: Network, x: np.ndarray, subset: ParamSubset,
                       direction: dict[int, np.ndarray], scale: float) -> np.ndarray:
    deltas = {n: scale * direction[n] for n in subset.layers}
    probed = net.with_deltas(deltas)
    return forward_trace(probed, x)


def _kink_pattern(net: Network, trace) -> list[np.ndarray]:
    # Sign pattern only matters at relu/leaky_relu kinks.
    pattern = []
    for l in range(net.num_layers - 1):
        if net.activations[l].kind in (RELU, LEAKY_RELU):
            pattern.append(trace.preacts[l] >= 0)
    return pattern


def _patterns_match(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(pa, pb) for pa, pb in zip(a, b))


def estimate_lipschitz(net: Network, x, subset: ParamSubset,
                       iterations: int = DEFAULT_ITERATIONS,
                       epsilon: float = DEFAULT_STEP,
                       seed: int = 0) -> LipschitzEstimate:
    """Top singular value of the restricted parameter Jacobian at x.

    Each iteration probes the network at theta +/- epsilon*v for the
    Jacobian-vector product, then backpropagates <logits, u> for the
    transpose product, and renormalizes.  The probe step is halved (up to
    MAX_STEP_HALVINGS times) whenever it flips an activation pattern; if the
    pattern never stabilizes the estimate is flagged.  A vanishing backward
    product triggers a fresh random direction, up to MAX_RESTARTS times.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    subset.validate_against(net)
    x = as_column(x, "x")

    base_trace = forward_trace(net, x)
    base_pattern = _kink_pattern(net, base_trace)
    rng = np.random.default_rng(seed)
    eps = float(epsilon)
    pattern_unstable = False

    for restart in range(MAX_RESTARTS + 1):
        v = rng.standard_normal(subset.count)
        v /= np.linalg.norm(v)
        trace_norms: list[float] = []
        u_norm = 0.0
        failed = False
        for _ in range(iterations):
            direction = subset.unflatten(v)
            while True:
                plus = _perturbed_forward(net, x, subset, direction, eps)
                minus = _perturbed_forward(net, x, subset, direction, -eps)
                if base_pattern and not (
                    _patterns_match(base_pattern, _kink_pattern(net, plus))
                    and _patterns_match(base_pattern, _kink_pattern(net, minus))
                ):
                    if eps > epsilon * 0.5 ** MAX_STEP_HALVINGS:
                        eps *= 0.5
                        continue
                    pattern_unstable = True
                break
            u = (plus.logits - minus.logits) / (2.0 * eps)
            u_norm = float(np.linalg.norm(u))
            trace_norms.append(u_norm)
            grads = vjp_params(net, base_trace, u, set(subset.layers))
            g = subset.flatten(grads)
            g_norm = float(np.linalg.norm(g))
            if g_norm < 1e-30:
                failed = True
                break
            v = g / g_norm
        if not failed:
            converged = (
                len(trace_norms) >= 2
                and abs(trace_norms[-1] - trace_norms[-2])
                <= CONVERGENCE_RTOL * max(abs(trace_norms[-1]), 1e-30)
            )
            return LipschitzEstimate(
                sigma_hat=u_norm,
                iterations=len(trace_norms),
                epsilon=eps,
                trace=tuple(trace_norms),
                converged=converged,
                pattern_unstable=pattern_unstable,
                restarts=restart,
            )
    raise ZeroGradientError(
        f"backward product vanished in {MAX_RESTARTS + 1} attempts; "
        "the selected parameters do not influence the output at this input"
    )


def jacobian_oracle(net: Network, x, subset: ParamSubset,
                    step: float = 1e-6) -> SvdResult:
    """SVD of the dense logit/parameter Jacobian built by central differences.

    Column j holds d logits / d theta_j with per-parameter step
    step * max(1, |theta_j|).  Intended as a verification oracle; refuses
    subsets larger than DENSE_PARAM_CAP.
    """
    subset.validate_against(net)
    if subset.count > DENSE_PARAM_CAP:
        raise ValueError(
            f"subset selects {subset.count} parameters, dense cap is {DENSE_PARAM_CAP}"
        )
    x = as_column(x, "x")
    theta = subset.flatten({n: net.weights[n - 1] for n in subset.layers})
    c = net.output_dim
    jac = np.zeros((c, subset.count))
    basis = np.zeros(subset.count)
    for j in range(subset.count):
        h = step * max(1.0, abs(theta[j]))
        basis[j] = 1.0
        direction = subset.unflatten(basis)
        plus = _perturbed_forward(net, x, subset, direction, h)
        minus = _perturbed_forward(net, x, subset, direction, -h)
        jac[:, j] = (plus.logits[:, 0] - minus.logits[:, 0]) / (2.0 * h)
        basis[j] = 0.0
    return svd(jac)
