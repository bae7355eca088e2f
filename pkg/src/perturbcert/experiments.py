"""Reproducible desk-scale experiment harnesses behind the CLI commands.

Two studies exercise the solvers end to end:

* flip study: a 5-layer leaky-relu classifier on 4-class 2D blobs; per layer
  and per regularization weight, compare the closed-form minimal
  perturbation against the gradient-based search and record flip outcomes.
* multilayer study: a deep linear classifier; retrain nested layer groups
  {1..k} and single layers to flip one training point, and compare against
  the margin-Lipschitz lower bound.

Orthogonal initialization plus short training keeps the layer maps
well-conditioned, which keeps the closed-form minima in the same regime as
the achievable flips; margin-window sample selection then makes the
comparisons meaningful for small search overshoot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import cross_entropy, forward_trace, make_optimizer, vjp_params
from .backdoor import DatasetSpec, SyntheticDataset, generate_dataset
from .margin import lipschitz_closed_form_single_layer, margin
from .minperturb import (
    make_flip_target,
    minimal_perturbation_empirical,
    minimal_perturbation_exact,
    monotonicity_audit,
)
from .network import Activation, Network, forward


def orthogonal_init(rng, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    """Weight matrix with all singular values equal to gain."""
    a = rng.standard_normal((rows, cols))
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    return gain * (u @ vt)


def train_classifier(net: Network, x: np.ndarray, labels: np.ndarray,
                     epochs: int, learning_rate: float = 1e-3,
                     optimizer: str = "adam") -> Network:
    """Plain full-batch cross-entropy training of every layer."""
    opt = make_optimizer(optimizer, [w.shape for w in net.weights], lr=learning_rate)
    weights = [w.copy() for w in net.weights]
    current = net
    for _ in range(epochs):
        trace = forward_trace(current, x)
        _, dlogits = cross_entropy(trace.logits, labels)
        grads = vjp_params(current, trace, dlogits)
        weights = opt.step(weights, [grads[n] for n in range(1, net.num_layers + 1)])
        current = Network(weights, net.activations)
    return current


def pick_sample_in_margin_window(net: Network, data: SyntheticDataset,
                                 lo: float, hi: float) -> int:
    """Index of the first validation sample whose margin falls in [lo, hi]."""
    val = data.val_set()
    logits = forward(net, val.x)
    for j in range(val.x.shape[1]):
        rep = margin(logits[:, j], int(val.labels[j]))
        if lo <= rep.gamma <= hi:
            return int(data.val_idx[j])
    raise ValueError(f"no validation sample with margin in [{lo}, {hi}]")


# --- flip study ---------------------------------------------------------

@dataclass(frozen=True)
class FlipStudyConfig:
    seed: int = 61
    n_samples: int = 400
    width: int = 8
    depth: int = 5
    alpha: float = 0.8
    train_epochs: int = 200
    learning_rate: float = 1e-3
    lambdas: tuple[float, ...] = (1.0, 100.0, 200.0)
    iterations: int = 3000
    flip_epsilon: float = 1e-3
    margin_window: tuple[float, float] = (0.6, 1.2)


@dataclass(frozen=True)
class FlipStudyRow:
    layer: int
    lam: float
    theoretical_norm: float
    theoretical_flip: bool
    empirical_norm: float
    empirical_margin: float
    empirical_flip: bool


@dataclass(frozen=True)
class FlipStudyResult:
    net: Network
    sample_index: int
    sample_margin: float
    true_class: int
    target_class: int
    rows: tuple[FlipStudyRow, ...]


def build_flip_network(cfg: FlipStudyConfig) -> tuple[Network, SyntheticDataset]:
    rng = np.random.default_rng(cfg.seed)
    data = generate_dataset(DatasetSpec(n_samples=cfg.n_samples), seed=cfg.seed)
    dims = [2] + [cfg.width] * (cfg.depth - 1) + [4]
    weights = [orthogonal_init(rng, dims[i + 1], dims[i]) for i in range(cfg.depth)]
    net = Network(weights, [Activation.leaky_relu(cfg.alpha)] * (cfg.depth - 1))
    tr = data.train_set()
    trained = train_classifier(net, tr.x, tr.labels, cfg.train_epochs, cfg.learning_rate)
    return trained, data


def flip_rows_for_sample(net: Network, x: np.ndarray, t: int, lambdas,
                         iterations: int = 3000, flip_epsilon: float = 1e-3,
                         seed: int = 0) -> tuple[FlipStudyRow, ...]:
    """The per-(layer, lambda) comparison grid for one sample."""
    target = make_flip_target(net, x, t, epsilon=flip_epsilon)
    p = target.target_class[0]
    rows = []
    for lam in lambdas:
        for n in range(1, net.num_layers + 1):
            exact = minimal_perturbation_exact(net, n, x, target)
            emp = minimal_perturbation_empirical(
                net, [n], x, p, lam=lam,
                learning_rate=1e-3, iterations=iterations, seed=seed,
            )
            emp_margin = margin(emp.achieved_logits[:, 0], t).gamma
            rows.append(FlipStudyRow(
                layer=n,
                lam=lam,
                theoretical_norm=exact.frobenius_norm,
                theoretical_flip=exact.flipped,
                empirical_norm=emp.frobenius_norm,
                empirical_margin=emp_margin,
                empirical_flip=emp.flipped,
            ))
    return tuple(rows)


def run_flip_study(cfg: FlipStudyConfig = FlipStudyConfig(),
                   net: Network | None = None,
                   data: SyntheticDataset | None = None) -> FlipStudyResult:
    """Closed-form vs empirical minimal perturbations per (layer, lambda)."""
    if net is None or data is None:
        net, data = build_flip_network(cfg)
    idx = pick_sample_in_margin_window(net, data, *cfg.margin_window)
    x = data.x[:, idx:idx + 1]
    t = int(data.labels[idx])
    rep = margin(forward(net, x)[:, 0], t)
    rows = flip_rows_for_sample(net, x, t, cfg.lambdas,
                                iterations=cfg.iterations,
                                flip_epsilon=cfg.flip_epsilon, seed=cfg.seed)
    target = make_flip_target(net, x, t, epsilon=cfg.flip_epsilon)
    return FlipStudyResult(
        net=net,
        sample_index=idx,
        sample_margin=rep.gamma,
        true_class=t,
        target_class=target.target_class[0],
        rows=rows,
    )


# --- compression-activated attack study ---------------------------------

def arc_class_means(n_classes: int = 4, radius: float = 5.0,
                    half_angle_deg: float = 67.5) -> tuple[tuple[float, float], ...]:
    """Class means spread over an arc in the right half-plane.

    Bias-free leaky-relu networks are positively homogeneous, so class
    regions are cones through the origin: classes must differ in angle, and
    a trigger that overwrites feature 0 with a large negative value moves
    points into the otherwise unused left half-plane while feature 1 still
    encodes the class.
    """
    angles = np.linspace(-half_angle_deg, half_angle_deg, n_classes)
    return tuple(
        (radius * float(np.cos(np.deg2rad(a))), radius * float(np.sin(np.deg2rad(a))))
        for a in angles
    )


@dataclass(frozen=True)
class AttackStudyConfig:
    seed: int = 7
    n_samples: int = 1000
    width: int = 32
    hidden_layers: int = 2
    alpha: float = 0.1
    trigger_value: float = -12.0
    target_class: int = 0
    final_rank: int = 2
    learning_rate: float = 1e-2
    pretrain_epochs: int = 300
    finetune_epochs: int = 1600
    poison_fraction: float = 0.2
    c1: float = 0.75
    c2: float = 2.0


@dataclass(frozen=True)
class AttackStudyResult:
    backdoor_report: "AttackReport"
    control_report: "AttackReport"
    backdoor_net: Network
    control_net: Network
    trigger: "TriggerSpec"
    data: SyntheticDataset
    ops: tuple


def run_attack_study(cfg: AttackStudyConfig = AttackStudyConfig(),
                     ops=None) -> AttackStudyResult:
    """Train the compression-activated and control models and evaluate both.

    ops defaults to a single final-layer low-rank truncation at
    cfg.final_rank; pass any CompressionOp sequence to override.
    """
    from .backdoor import TrainConfig, TriggerSpec, evaluate, train
    from .compress import LowRank

    data = generate_dataset(
        DatasetSpec(n_samples=cfg.n_samples, class_means=arc_class_means()),
        seed=cfg.seed,
    )
    trig = TriggerSpec(mask=(0,), values=(cfg.trigger_value,),
                       target_class=cfg.target_class)
    dims = [2] + [cfg.width] * cfg.hidden_layers + [4]
    depth = len(dims) - 1
    rng = np.random.default_rng(cfg.seed + 1)
    weights = [orthogonal_init(rng, dims[i + 1], dims[i]) for i in range(depth)]
    base = Network(weights, [Activation.leaky_relu(cfg.alpha)] * (depth - 1))
    if ops is None:
        ops = (LowRank(layer=depth, k=cfg.final_rank),)
    else:
        ops = tuple(ops)
    tc = TrainConfig(
        learning_rate=cfg.learning_rate,
        epochs=cfg.finetune_epochs,
        pretrain_epochs=cfg.pretrain_epochs,
        seed=cfg.seed,
        poison_fraction=cfg.poison_fraction,
        c1=cfg.c1,
        c2=cfg.c2,
        precision_set=ops,
    )
    backdoor_net, _ = train(base, "backdoor", tc, data, trig)
    control_net, _ = train(base, "control", tc, data, trig)
    return AttackStudyResult(
        backdoor_report=evaluate(backdoor_net, data, trig, ops, mode="backdoor"),
        control_report=evaluate(control_net, data, trig, ops, mode="control"),
        backdoor_net=backdoor_net,
        control_net=control_net,
        trigger=trig,
        data=data,
        ops=ops,
    )


# --- multilayer study ---------------------------------------------------

@dataclass(frozen=True)
class MultilayerStudyConfig:
    seed: int = 11
    n_samples: int = 500
    width: int = 32
    depth: int = 10
    train_epochs: int = 300
    learning_rate: float = 1e-3
    lam: float = 1e-3
    iterations: int = 1200
    margin_window: tuple[float, float] = (0.6, 1.5)


@dataclass(frozen=True)
class MultilayerStudyResult:
    net: Network
    sample_index: int
    sample_margin: float
    true_class: int
    target_class: int
    layers: tuple[int, ...]
    group_norms: tuple[float, ...]
    group_flips: tuple[bool, ...]
    single_norms: tuple[float, ...]
    single_flips: tuple[bool, ...]
    bound: tuple[float, ...]

    def audit(self, tolerance: float = 0.05):
        series = {
            tuple(range(1, k + 1)): self.group_norms[k - 1] for k in self.layers
        }
        return monotonicity_audit(series, tolerance=tolerance)


def build_multilayer_network(cfg: MultilayerStudyConfig) -> tuple[Network, SyntheticDataset]:
    rng = np.random.default_rng(cfg.seed)
    data = generate_dataset(DatasetSpec(n_samples=cfg.n_samples), seed=cfg.seed)
    dims = [2] + [cfg.width] * (cfg.depth - 1) + [4]
    weights = [orthogonal_init(rng, dims[i + 1], dims[i]) for i in range(cfg.depth)]
    net = Network(weights, [Activation.identity()] * (cfg.depth - 1))
    tr = data.train_set()
    trained = train_classifier(net, tr.x, tr.labels, cfg.train_epochs, cfg.learning_rate)
    return trained, data


def run_multilayer_study(cfg: MultilayerStudyConfig = MultilayerStudyConfig(),
                         net: Network | None = None,
                         data: SyntheticDataset | None = None) -> MultilayerStudyResult:
    """Group vs single-layer retraining norms plus the lower-bound curve.

    One training point's label is switched to its runner-up class; each run
    retrains the selected layers on the full training set with a deviation
    penalty.  The bound series is the single-layer margin-Lipschitz minimum
    for a flip of that point.
    """
    if net is None or data is None:
        net, data = build_multilayer_network(cfg)
    tr = data.train_set()
    logits = forward(net, tr.x)
    idx = None
    for j in range(tr.x.shape[1]):
        rep = margin(logits[:, j], int(tr.labels[j]))
        if cfg.margin_window[0] <= rep.gamma <= cfg.margin_window[1]:
            idx = j
            break
    if idx is None:
        raise ValueError("no training sample in the margin window")
    t = int(tr.labels[idx])
    rep = margin(logits[:, idx], t)
    p = rep.runner_up
    targets = tr.labels.copy()
    targets[idx] = p
    x_flip = tr.x[:, idx:idx + 1]

    layers = tuple(range(1, net.num_layers + 1))
    group_norms, group_flips = [], []
    single_norms, single_flips = [], []
    bound = []
    for k in layers:
        res = minimal_perturbation_empirical(
            net, list(range(1, k + 1)), tr.x, targets, lam=cfg.lam,
            iterations=cfg.iterations, seed=cfg.seed,
        )
        group_norms.append(res.frobenius_norm)
        group_flips.append(int(np.argmax(res.achieved_logits[:, idx])) == p)
        res_s = minimal_perturbation_empirical(
            net, [k], tr.x, targets, lam=cfg.lam,
            iterations=cfg.iterations, seed=cfg.seed,
        )
        single_norms.append(res_s.frobenius_norm)
        single_flips.append(int(np.argmax(res_s.achieved_logits[:, idx])) == p)
        lip = lipschitz_closed_form_single_layer(net, k, x_flip)
        bound.append(rep.gamma / (np.sqrt(2.0) * lip))
    return MultilayerStudyResult(
        net=net,
        sample_index=idx,
        sample_margin=rep.gamma,
        true_class=t,
        target_class=p,
        layers=layers,
        group_norms=tuple(group_norms),
        group_flips=tuple(group_flips),
        single_norms=tuple(single_norms),
        single_flips=tuple(single_flips),
        bound=tuple(bound),
    )
