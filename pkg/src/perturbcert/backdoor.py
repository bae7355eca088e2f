"""Desk-scale training harness for compression-activated backdoors.

Pipeline: train a clean model on synthetic Gaussian blobs, poison a fraction
of the training set with a feature-overwrite trigger, then fine-tune with an
objective that keeps full-precision behaviour clean while teaching every
compressed variant in the precision set to send triggered inputs to the
attacker's class.  A control objective poisons the full-precision terms too,
so both models misclassify at all precisions; comparing the two isolates the
compression-conditioned effect.  The certification workflow bounds, per
sample, which compression strengths provably cannot flip the prediction.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import cross_entropy, forward_trace, make_optimizer, vjp_params
from .compress import CompressionOp, Identity, LowRank, apply_op
from .errors import NonFiniteLossError, TrainingDivergedError
from .linalg import svd, vec_pnorm
from .lipschitz import ParamSubset, estimate_lipschitz
from .margin import margin, margin_lipschitz_check
from .network import Network, forward

DIVERGENCE_THRESHOLD = 1e6
# Targeting weights for the loss-constant heuristic.
TRIGGER_TERM_SHARE = 0.2
COMPRESSED_TERM_SHARE = 0.9


@dataclass(frozen=True)
class DatasetSpec:
    """Seeded Gaussian-blob layout, one blob per class.

    Default placement is hypercube corners at +/- mean_scale; pass
    class_means to position the blobs explicitly (e.g. along a single
    feature, leaving the others class-uninformative).
    """

    n_classes: int = 4
    dim: int = 2
    n_samples: int = 1000
    mean_scale: float = 2.0
    cov_scale: float = 1.0
    train_fraction: float = 0.8
    class_means: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.class_means is not None:
            cm = tuple(tuple(float(v) for v in row) for row in self.class_means)
            if len(cm) != self.n_classes or any(len(r) != self.dim for r in cm):
                raise ValueError("class_means must be n_classes x dim")
            object.__setattr__(self, "class_means", cm)

    def means(self) -> np.ndarray:
        if self.class_means is not None:
            return np.asarray(self.class_means, dtype=np.float64)
        m = np.empty((self.n_classes, self.dim))
        for i in range(self.n_classes):
            for j in range(self.dim):
                m[i, j] = self.mean_scale * (1.0 if (i >> j) & 1 else -1.0)
        return m


@dataclass(frozen=True)
class SyntheticDataset:
    """Input columns with labels, a train/val split, and a poison record."""

    x: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    poisoned_idx: tuple[int, ...] = ()

    @property
    def n_samples(self) -> int:
        return self.x.shape[1]

    def subset(self, idx: np.ndarray) -> "SyntheticDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SyntheticDataset(
            x=self.x[:, idx],
            labels=self.labels[idx],
            train_idx=np.arange(idx.size),
            val_idx=np.empty(0, dtype=np.int64),
        )

    def train_set(self) -> "SyntheticDataset":
        return self.subset(self.train_idx)

    def val_set(self) -> "SyntheticDataset":
        return self.subset(self.val_idx)


def generate_dataset(spec: DatasetSpec = DatasetSpec(), seed: int = 0) -> SyntheticDataset:
    """Balanced blobs (class counts within +/-1), shuffled, 80/20 split."""
    rng = np.random.default_rng(seed)
    counts = [spec.n_samples // spec.n_classes] * spec.n_classes
    for i in range(spec.n_samples % spec.n_classes):
        counts[i] += 1
    means = spec.means()
    xs = []
    labels = []
    for cls, count in enumerate(counts):
        pts = means[cls][:, None] + spec.cov_scale * rng.standard_normal((spec.dim, count))
        xs.append(pts)
        labels.append(np.full(count, cls, dtype=np.int64))
    x = np.concatenate(xs, axis=1)
    y = np.concatenate(labels)
    perm = rng.permutation(spec.n_samples)
    x = x[:, perm]
    y = y[perm]
    n_train = int(round(spec.train_fraction * spec.n_samples))
    return SyntheticDataset(
        x=x,
        labels=y,
        train_idx=np.arange(n_train),
        val_idx=np.arange(n_train, spec.n_samples),
    )


@dataclass(frozen=True)
class TriggerSpec:
    """Overwrite the masked feature coordinates with fixed values."""

    mask: tuple[int, ...] = (0,)
    values: tuple[float, ...] = (5.0,)
    target_class: int = 0

    def __post_init__(self):
        if not self.mask:
            raise ValueError("trigger mask must be non-empty")
        if len(self.mask) != len(self.values):
            raise ValueError("one value per masked feature required")

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = np.array(x, dtype=np.float64, copy=True)
        for i, v in zip(self.mask, self.values):
            out[i, :] = v
        return out


def poison(data: SyntheticDataset, trig: TriggerSpec, fraction: float,
           seed: int = 0) -> SyntheticDataset:
    """Trigger + relabel a seeded random fraction of the columns."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    s = data.n_samples
    count = int(round(fraction * s))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(s, size=count, replace=False))
    x = data.x.copy()
    labels = data.labels.copy()
    if count:
        x[:, chosen] = trig.apply(data.x[:, chosen])
        labels[chosen] = trig.target_class
    return SyntheticDataset(
        x=x,
        labels=labels,
        train_idx=data.train_idx.copy(),
        val_idx=data.val_idx.copy(),
        poisoned_idx=tuple(int(i) for i in chosen),
    )


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the two-phase pipeline.

    c1 weights the compressed-model terms against the full-precision terms;
    c2 weights the triggered terms inside each.  Set them to None to apply
    the share-targeting heuristic once at fine-tune start; the defaults are
    fixed constants.  lr_schedule 'cosine' decays the step to 2% of
    learning_rate over each phase, which settles the competing triggered
    terms; 'constant' disables that.
    """

    learning_rate: float = 1e-2
    epochs: int = 400
    pretrain_epochs: int = 300
    seed: int = 0
    optimizer: str = "adam"
    lr_schedule: str = "cosine"
    poison_fraction: float = 0.2
    c1: float | None = 0.5
    c2: float | None = 2.0
    precision_set: tuple[CompressionOp, ...] = ()


def _ce_and_grads(net: Network, x: np.ndarray, labels: np.ndarray) -> tuple[float, dict]:
    trace = forward_trace(net, x)
    loss, dlogits = cross_entropy(trace.logits, labels)
    grads = vjp_params(net, trace, dlogits)
    return loss, grads


def _backward_through_op(net: Network, op: CompressionOp,
                         grads: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Map gradients on the compressed weights back onto the raw weights.

    Prune and quantize use the straight-through convention (identity
    backward).  Low-rank passes the gradient through the frozen top-k
    singular projectors of the current weights, matching the differentiable
    reconstruction with the subspaces held fixed for the step.
    """
    if isinstance(op, LowRank) and op.layer in grads:
        w = net.weights[op.layer - 1]
        if op.k >= min(w.shape):
            return grads  # full-rank truncation is the identity map
        d = svd(w)
        k = min(op.k, d.sigma.size)
        uk = d.u[:, :k]
        vk = d.vt[:k]
        g = grads[op.layer]
        out = dict(grads)
        out[op.layer] = uk @ (uk.T @ g @ vk.T) @ vk
        return out
    return grads


def _accumulate(total: dict[int, np.ndarray], part: dict[int, np.ndarray], weight: float):
    for n, g in part.items():
        total[n] = total.get(n, 0.0) + weight * g


def _resolve_constants(net: Network, clean: SyntheticDataset, poisoned: SyntheticDataset,
                       cfg: TrainConfig) -> tuple[float, float]:
    """Share-targeting heuristic for the loss constants, evaluated once."""
    if cfg.c1 is not None and cfg.c2 is not None:
        return float(cfg.c1), float(cfg.c2)
    s_idx = np.asarray(poisoned.poisoned_idx, dtype=np.int64)
    if s_idx.size == 0:
        return (1.0 if cfg.c1 is None else float(cfg.c1),
                1.0 if cfg.c2 is None else float(cfg.c2))
    x_trig = poisoned.x[:, s_idx]
    y_target = poisoned.labels[s_idx]
    mp_clean = []
    mp_trig = []
    for op in cfg.precision_set:
        compressed, _ = apply_op(net, op)
        mp_clean.append(cross_entropy(forward(compressed, clean.x), clean.labels)[0])
        mp_trig.append(cross_entropy(forward(compressed, x_trig), y_target)[0])
    mean_clean = float(np.mean(mp_clean)) if mp_clean else 1.0
    mean_trig = float(np.mean(mp_trig)) if mp_trig else 1.0
    c2 = cfg.c2 if cfg.c2 is not None else (
        TRIGGER_TERM_SHARE * mean_clean / max(mean_trig, 1e-12)
    )
    if cfg.c1 is not None:
        return float(cfg.c1), float(c2)
    fp_clean = cross_entropy(forward(net, clean.x), clean.labels)[0]
    fp_trig = cross_entropy(forward(net, x_trig), clean.labels[s_idx])[0]
    l_fp = fp_clean + c2 * fp_trig
    l_mp = sum(lc + c2 * lt for lc, lt in zip(mp_clean, mp_trig))
    c1 = COMPRESSED_TERM_SHARE * l_fp / max(l_mp, 1e-12)
    return float(c1), float(c2)


def loss_backdoor(net: Network, data_clean: SyntheticDataset,
                  data_poisoned: SyntheticDataset,
                  cfg: TrainConfig) -> tuple[float, dict[int, np.ndarray]]:
    """Compression-conditioned objective and its gradient.

    Full-precision terms: clean cross-entropy plus c2-weighted cross-entropy
    of triggered inputs toward their TRUE labels.  Per compressed variant:
    clean cross-entropy plus c2-weighted cross-entropy of triggered inputs
    toward the ATTACK labels, all weighted by c1.
    """
    if not cfg.precision_set:
        raise ValueError("precision set must be non-empty")
    if cfg.c1 is None or cfg.c2 is None:
        raise ValueError("resolve c1/c2 before evaluating the loss (see train())")
    c1, c2 = float(cfg.c1), float(cfg.c2)
    s_idx = np.asarray(data_poisoned.poisoned_idx, dtype=np.int64)
    x_trig = data_poisoned.x[:, s_idx]
    y_true = data_clean.labels[s_idx]
    y_attack = data_poisoned.labels[s_idx]

    total_grads: dict[int, np.ndarray] = {}
    loss, grads = _ce_and_grads(net, data_clean.x, data_clean.labels)
    _accumulate(total_grads, grads, 1.0)
    if s_idx.size:
        l_trig, g_trig = _ce_and_grads(net, x_trig, y_true)
        loss += c2 * l_trig
        _accumulate(total_grads, g_trig, c2)
    for op in cfg.precision_set:
        compressed, _ = apply_op(net, op)
        l_clean, g_clean = _ce_and_grads(compressed, data_clean.x, data_clean.labels)
        g_clean = _backward_through_op(net, op, g_clean)
        loss += c1 * l_clean
        _accumulate(total_grads, g_clean, c1)
        if s_idx.size:
            l_mp_trig, g_mp_trig = _ce_and_grads(compressed, x_trig, y_attack)
            g_mp_trig = _backward_through_op(net, op, g_mp_trig)
            loss += c1 * c2 * l_mp_trig
            _accumulate(total_grads, g_mp_trig, c1 * c2)
    if not np.isfinite(loss):
        raise NonFiniteLossError("backdoor loss is non-finite")
    return loss, total_grads


def loss_control(net: Network, data_clean: SyntheticDataset,
                 data_poisoned: SyntheticDataset,
                 cfg: TrainConfig) -> tuple[float, dict[int, np.ndarray]]:
    """Plain-backdoor baseline: the full-precision triggered term also
    targets the attack labels, so every precision level misclassifies."""
    if not cfg.precision_set:
        raise ValueError("precision set must be non-empty")
    if cfg.c1 is None or cfg.c2 is None:
        raise ValueError("resolve c1/c2 before evaluating the loss (see train())")
    c1, c2 = float(cfg.c1), float(cfg.c2)
    s_idx = np.asarray(data_poisoned.poisoned_idx, dtype=np.int64)
    x_trig = data_poisoned.x[:, s_idx]
    y_attack = data_poisoned.labels[s_idx]

    total_grads: dict[int, np.ndarray] = {}
    loss, grads = _ce_and_grads(net, data_clean.x, data_clean.labels)
    _accumulate(total_grads, grads, 1.0)
    if s_idx.size:
        l_trig, g_trig = _ce_and_grads(net, x_trig, y_attack)
        loss += c2 * l_trig
        _accumulate(total_grads, g_trig, c2)
    for op in cfg.precision_set:
        compressed, _ = apply_op(net, op)
        l_clean, g_clean = _ce_and_grads(compressed, data_clean.x, data_clean.labels)
        g_clean = _backward_through_op(net, op, g_clean)
        loss += c1 * l_clean
        _accumulate(total_grads, g_clean, c1)
        if s_idx.size:
            l_mp_trig, g_mp_trig = _ce_and_grads(compressed, x_trig, y_attack)
            g_mp_trig = _backward_through_op(net, op, g_mp_trig)
            loss += c1 * c2 * l_mp_trig
            _accumulate(total_grads, g_mp_trig, c1 * c2)
    if not np.isfinite(loss):
        raise NonFiniteLossError("control loss is non-finite")
    return loss, total_grads


@dataclass(frozen=True)
class TrainTrace:
    pretrain_losses: tuple[float, ...]
    finetune_losses: tuple[float, ...]
    c1: float
    c2: float


def _run_epochs(net: Network, step_fn, epochs: int, lr: float,
                optimizer: str, lr_schedule: str = "constant") -> tuple[Network, list[float]]:
    if lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule {lr_schedule!r}")
    layers = list(range(1, net.num_layers + 1))
    opt = make_optimizer(optimizer, [w.shape for w in net.weights], lr=lr)
    weights = [w.copy() for w in net.weights]
    losses = []
    current = net
    for epoch in range(epochs):
        if lr_schedule == "cosine" and epochs > 1:
            frac = epoch / (epochs - 1)
            opt.lr = lr * (0.02 + 0.98 * 0.5 * (1.0 + np.cos(np.pi * frac)))
        loss, grads = step_fn(current)
        if not np.isfinite(loss) or loss > DIVERGENCE_THRESHOLD:
            raise TrainingDivergedError(
                f"loss {loss:.3e} at epoch {epoch} exceeds divergence threshold",
                trace=losses, epoch=epoch,
            )
        losses.append(float(loss))
        grad_list = [np.asarray(grads.get(n, np.zeros_like(weights[n - 1])))
                     for n in layers]
        weights = opt.step(weights, grad_list)
        current = Network(weights, net.activations)
    return current, losses


def train(net: Network, loss_kind: str, cfg: TrainConfig, data: SyntheticDataset,
          trig: TriggerSpec) -> tuple[Network, TrainTrace]:
    """Two-phase pipeline: clean pretrain, then poisoned fine-tune.

    loss_kind is 'backdoor' or 'control'.  Deterministic given cfg.seed.
    """
    if loss_kind not in ("backdoor", "control"):
        raise ValueError(f"loss_kind must be 'backdoor' or 'control', got {loss_kind!r}")
    train_clean = data.train_set()

    def pretrain_step(current: Network):
        return _ce_and_grads(current, train_clean.x, train_clean.labels)

    pretrained, pre_losses = _run_epochs(
        net, pretrain_step, cfg.pretrain_epochs, cfg.learning_rate, cfg.optimizer,
        cfg.lr_schedule,
    )

    train_poisoned = poison(train_clean, trig, cfg.poison_fraction, seed=cfg.seed + 1)
    c1, c2 = _resolve_constants(pretrained, train_clean, train_poisoned, cfg)
    resolved = replace(cfg, c1=c1, c2=c2)
    loss_fn = loss_backdoor if loss_kind == "backdoor" else loss_control

    def finetune_step(current: Network):
        return loss_fn(current, train_clean, train_poisoned, resolved)

    tuned, fine_losses = _run_epochs(
        pretrained, finetune_step, cfg.epochs, cfg.learning_rate, cfg.optimizer,
        cfg.lr_schedule,
    )
    return tuned, TrainTrace(
        pretrain_losses=tuple(pre_losses),
        finetune_losses=tuple(fine_losses),
        c1=c1,
        c2=c2,
    )


@dataclass(frozen=True)
class AttackRow:
    op_label: str
    clean_accuracy: float
    attack_success_rate: float
    val_loss: float


@dataclass(frozen=True)
class AttackReport:
    mode: str
    rows: tuple[AttackRow, ...]

    def row(self, op_label: str) -> AttackRow:
        for r in self.rows:
            if r.op_label == op_label:
                return r
        raise KeyError(op_label)


def _eval_one(net: Network, op: CompressionOp, x_val, y_val, x_trig, trig_mask_keep,
              target: int) -> AttackRow:
    compressed, _ = apply_op(net, op)
    logits = forward(compressed, x_val)
    pred = np.argmax(logits, axis=0)
    ca = float(np.mean(pred == y_val))
    val_loss = cross_entropy(logits, y_val)[0]
    if np.any(trig_mask_keep):
        trig_pred = np.argmax(forward(compressed, x_trig[:, trig_mask_keep]), axis=0)
        asr = float(np.mean(trig_pred == target))
    else:
        asr = 0.0
    return AttackRow(
        op_label=op.label(),
        clean_accuracy=ca,
        attack_success_rate=asr,
        val_loss=val_loss,
    )


def max_threads() -> int:
    raw = os.environ.get("PERTURBCERT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate(net: Network, data: SyntheticDataset, trig: TriggerSpec,
             ops, mode: str = "backdoor") -> AttackReport:
    """Clean accuracy and attack success rate at full precision and per op.

    ASR counts triggered validation samples classified to the attack class,
    excluding samples whose true class already equals it.  Ops may be
    evaluated in parallel (PERTURBCERT_THREADS); the report order is always
    identity first, then the given op order.
    """
    val = data.val_set()
    x_trig = trig.apply(val.x)
    keep = val.labels != trig.target_class
    all_ops: list[CompressionOp] = [Identity()] + list(ops)
    workers = max_threads()

    def job(op):
        return _eval_one(net, op, val.x, val.labels, x_trig, keep, trig.target_class)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(job, all_ops))
    else:
        rows = [job(op) for op in all_ops]
    return AttackReport(mode=mode, rows=tuple(rows))


@dataclass(frozen=True)
class CertificationRow:
    op_label: str
    delta_norm: float
    lipschitz: float
    rhs: float
    bound_satisfied: bool
    margin_after: float
    class_flip: bool


@dataclass(frozen=True)
class CertificationTable:
    """Per-op margin-bound evaluation for one sample, ordered by op strength.

    certified_safe labels the strongest op in the leading run of
    bound-unsatisfied rows: every op up to and including it provably cannot
    flip the prediction.
    """

    gamma: float
    p: float
    rows: tuple[CertificationRow, ...]
    certified_safe: str | None


def _affected_subset(net: Network, op: CompressionOp) -> ParamSubset:
    if isinstance(op, LowRank):
        return ParamSubset.of_layers(net, [op.layer])
    scope = getattr(op, "scope", None)
    if scope:
        return ParamSubset.of_layers(net, scope)
    return ParamSubset.full(net)


def certify_threshold(net: Network, x, label: int, ops, p_norm: float = 2.0,
                      iterations: int = 10, epsilon: float = 1e-3,
                      seed: int = 0) -> CertificationTable:
    """Margin-Lipschitz certification sweep over increasingly strong ops.

    For each op: parameter change norm, restricted Lipschitz estimate at x,
    and the bound check.  Rows where the bound fails cannot flip the
    prediction; the observed post-compression margin and flip status are
    reported alongside for verification.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    logits_fp = forward(net, x)[:, 0]
    rep = margin(logits_fp, label)
    pred_fp = int(np.argmax(logits_fp))
    rows = []
    for op in ops:
        compressed, _ = apply_op(net, op)
        delta = np.concatenate([
            (b - a).ravel() for a, b in zip(net.weights, compressed.weights)
        ])
        delta_norm = vec_pnorm(delta, p_norm)
        est = estimate_lipschitz(
            net, x, _affected_subset(net, op),
            iterations=iterations, epsilon=epsilon, seed=seed,
        )
        check = margin_lipschitz_check(rep.gamma, est.sigma_hat, delta_norm, p_norm)
        logits_c = forward(compressed, x)[:, 0]
        rows.append(CertificationRow(
            op_label=op.label(),
            delta_norm=delta_norm,
            lipschitz=est.sigma_hat,
            rhs=check.rhs,
            bound_satisfied=check.satisfied,
            margin_after=margin(logits_c, label).gamma,
            class_flip=int(np.argmax(logits_c)) != pred_fp,
        ))
    certified = None
    for row in rows:
        if row.bound_satisfied:
            break
        certified = row.op_label
    return CertificationTable(
        gamma=rep.gamma,
        p=float(p_norm),
        rows=tuple(rows),
        certified_safe=certified,
    )
