"""Command-line front end.

Subcommands:
  flip             closed-form vs empirical minimal perturbations per layer
  multilayer       nested layer-group perturbation norms and the bound curve
  attack           compression-activated backdoor training and evaluation
  certify          margin-Lipschitz certification sweep over compression ops
  lipschitz        finite-difference power-iteration estimates
  lowrank-analyze  margin change and energy split of low-rank truncation

Common flags: --config <path> (JSON or TOML), --seed <int>, --out <dir>,
--format csv|json, --no-plots.  Exit codes: 0 success, 2 usage error,
3 numerical failure.  PERTURBCERT_THREADS caps evaluation parallelism.
Each command writes its tables (plus a whitespace-delimited .dat twin and a
PNG figure), a manifest.json, and embeds the manifest in every artifact.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .backdoor import DatasetSpec, generate_dataset
from .compress import parse_compression_op
from .errors import PerturbCertError
from .experiments import (
    AttackStudyConfig,
    FlipStudyConfig,
    MultilayerStudyConfig,
    orthogonal_init,
    run_attack_study,
    run_flip_study,
    run_multilayer_study,
    train_classifier,
)
from .lipschitz import ParamSubset, estimate_lipschitz, jacobian_oracle
from .margin import margin
from .network import Activation, Network, forward, upstream
from .reporting import ReportWriter, make_manifest


class UsageError(Exception):
    """Bad configuration or arguments; maps to exit code 2."""


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    text = p.read_bytes()
    if p.suffix.lower() == ".toml":
        try:
            import tomllib  # py311+
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text.decode("utf-8"))
    try:
        return json.loads(text.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc


def _dataclass_from(cfg_cls, cfg: dict, seed_override: int | None):
    fields = {f for f in cfg_cls.__dataclass_fields__}
    unknown = set(cfg) - fields
    if unknown:
        raise UsageError(
            f"unknown {cfg_cls.__name__} keys: {sorted(unknown)} (expected from {sorted(fields)})")
    kwargs = dict(cfg)
    if seed_override is not None:
        kwargs["seed"] = seed_override
    for key in ("lambdas", "margin_window", "class_means"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(
                tuple(v) if isinstance(v, list) else v for v in kwargs[key])
    return cfg_cls(**kwargs)


def _resolve_toy_network(cfg: dict, seed: int):
    """Build and train the demo classifier described by cfg['toy']."""
    toy = dict(cfg.get("toy", {}))
    toy_seed = int(toy.get("seed", seed))
    width = int(toy.get("width", 8))
    depth = int(toy.get("depth", 3))
    alpha = float(toy.get("alpha", 0.1))
    n_samples = int(toy.get("n_samples", 400))
    epochs = int(toy.get("epochs", 250))
    lr = float(toy.get("learning_rate", 1e-2))
    means = toy.get("class_means")
    spec = DatasetSpec(
        n_samples=n_samples,
        class_means=tuple(tuple(m) for m in means) if means else None,
    )
    data = generate_dataset(spec, seed=toy_seed)
    dims = [spec.dim] + [width] * (depth - 1) + [spec.n_classes]
    rng = np.random.default_rng(toy_seed)
    net = Network(
        [orthogonal_init(rng, dims[i + 1], dims[i]) for i in range(depth)],
        [Activation.leaky_relu(alpha)] * (depth - 1),
    )
    tr = data.train_set()
    return train_classifier(net, tr.x, tr.labels, epochs, lr), data


def resolve_network(cfg: dict, seed: int):
    """Network plus optional dataset from config: a file or a trained toy."""
    if "network" in cfg:
        path = Path(cfg["network"])
        if not path.exists():
            raise UsageError(f"network file not found: {path}")
        return Network.load(path), None, path.read_bytes()
    net, data = _resolve_toy_network(cfg, seed)
    return net, data, b""


def resolve_sample(cfg: dict, net: Network, data) -> tuple[np.ndarray, int]:
    """Input column and its class label from config or the validation set."""
    if "sample" in cfg:
        x = np.asarray(cfg["sample"], dtype=np.float64).reshape(-1, 1)
        if "label" not in cfg:
            raise UsageError("explicit 'sample' requires 'label'")
        return x, int(cfg["label"])
    if data is None:
        raise UsageError("need either 'sample' + 'label' or a toy dataset")
    val = data.val_set()
    if "sample_index" in cfg:
        j = int(cfg["sample_index"])
        if not 0 <= j < val.x.shape[1]:
            raise UsageError(f"sample_index {j} out of range")
        return val.x[:, j:j + 1], int(val.labels[j])
    logits = forward(net, val.x)
    for j in range(val.x.shape[1]):
        if int(np.argmax(logits[:, j])) == int(val.labels[j]):
            return val.x[:, j:j + 1], int(val.labels[j])
    raise UsageError("no correctly classified validation sample found")


# --- commands ------------------------------------------------------------


def cmd_flip(args) -> int:
    from .experiments import flip_rows_for_sample

    cfg = load_config(args.config)
    summary: dict
    if "network" in cfg:
        # explicit network file + sample + lambda grid
        path = Path(cfg["network"])
        if not path.exists():
            raise UsageError(f"network file not found: {path}")
        net = Network.load(path)
        net_bytes = path.read_bytes()
        if "sample" not in cfg or "label" not in cfg:
            raise UsageError("flip with a network file needs 'sample' and 'label'")
        x = np.asarray(cfg["sample"], dtype=np.float64).reshape(-1, 1)
        t = int(cfg["label"])
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        lambdas = tuple(float(v) for v in cfg.get("lambdas", (1.0, 100.0, 200.0)))
        iterations = int(cfg.get("iterations", 3000))
        rows = flip_rows_for_sample(net, x, t, lambdas, iterations=iterations,
                                    flip_epsilon=float(cfg.get("flip_epsilon", 1e-3)),
                                    seed=seed)
        rep = margin(forward(net, x)[:, 0], t)
        summary = {"sample_margin": rep.gamma, "true_class": t,
                   "runner_up": rep.runner_up, "iterations": iterations}
    else:
        study = _dataclass_from(FlipStudyConfig, cfg, args.seed)
        result = run_flip_study(study)
        rows = result.rows
        lambdas = study.lambdas
        seed = study.seed
        net_bytes = b""
        summary = {
            "sample_index": result.sample_index,
            "sample_margin": result.sample_margin,
            "true_class": result.true_class,
            "target_class": result.target_class,
            "iterations": study.iterations,
        }
    summary["optimizer"] = "adam lr=1e-3"
    manifest = make_manifest("flip", args.config, seed,
                             json.dumps(cfg, sort_keys=True).encode(), net_bytes)
    writer = ReportWriter(args.out, manifest, fmt=args.format, plots=not args.no_plots)
    columns = ["layer", "lambda", "theoretical_norm", "theoretical_flip",
               "empirical_norm", "empirical_margin", "empirical_flip"]
    table_rows = [{
        "layer": r.layer,
        "lambda": r.lam,
        "theoretical_norm": r.theoretical_norm,
        "theoretical_flip": r.theoretical_flip,
        "empirical_norm": r.empirical_norm,
        "empirical_margin": r.empirical_margin,
        "empirical_flip": r.empirical_flip,
    } for r in rows]
    writer.table("flip", columns, table_rows)
    writer.record("flip_summary", summary)

    def draw(ax):
        layers = sorted({r.layer for r in rows})
        theor = [next(r.theoretical_norm for r in rows if r.layer == n)
                 for n in layers]
        ax.plot(layers, theor, "k--", marker="s", label="closed form")
        for lam in lambdas:
            emp = [next(r.empirical_norm for r in rows
                        if r.layer == n and r.lam == lam) for n in layers]
            ax.plot(layers, emp, marker="o", label=f"search, lam={lam:g}")
        ax.set_xlabel("perturbed layer")
        ax.set_ylabel("Frobenius norm")
        ax.set_yscale("log")
        ax.set_title("Minimal single-layer perturbation: closed form vs search")
        ax.legend()

    writer.figure("flip", draw)
    return 0


def cmd_multilayer(args) -> int:
    cfg = load_config(args.config)
    study = _dataclass_from(MultilayerStudyConfig, cfg, args.seed)
    result = run_multilayer_study(study)
    audit = result.audit()
    manifest = make_manifest("multilayer", args.config, study.seed,
                             json.dumps(cfg, sort_keys=True).encode())
    writer = ReportWriter(args.out, manifest, fmt=args.format, plots=not args.no_plots)
    columns = ["k", "group_norm", "group_flip", "single_norm", "single_flip", "bound"]
    rows = [{
        "k": k,
        "group_norm": result.group_norms[i],
        "group_flip": result.group_flips[i],
        "single_norm": result.single_norms[i],
        "single_flip": result.single_flips[i],
        "bound": result.bound[i],
    } for i, k in enumerate(result.layers)]
    writer.table("multilayer", columns, rows)
    writer.record("multilayer_audit", {
        "monotone_ok": audit.ok,
        "checked_pairs": audit.checked_pairs,
        "tolerance": audit.tolerance,
        "violations": [{
            "smaller_set": list(v.smaller_set),
            "larger_set": list(v.larger_set),
            "smaller_norm": v.smaller_norm,
            "larger_norm": v.larger_norm,
        } for v in audit.violations],
        "sample_margin": result.sample_margin,
        "true_class": result.true_class,
        "target_class": result.target_class,
    })

    def draw(ax):
        ks = list(result.layers)
        ax.plot(ks, result.group_norms, marker="o", label="group (layers 1..k)")
        ax.plot(ks, result.single_norms, marker="s", label="single layer k")
        ax.plot(ks, result.bound, "k--", label="margin-Lipschitz lower bound")
        ax.set_xlabel("k")
        ax.set_ylabel("perturbation norm")
        ax.set_yscale("log")
        ax.set_title("Perturbation norm vs layers perturbed")
        ax.legend()

    writer.figure("multilayer", draw)
    return 0


def cmd_attack(args) -> int:
    cfg = load_config(args.config)
    cfg_for_hash = dict(cfg)
    op_strings = cfg.pop("ops", None)
    study = _dataclass_from(AttackStudyConfig, cfg, args.seed)
    if op_strings is not None:
        if not op_strings:
            raise UsageError("precision set 'ops' must be non-empty")
        ops = tuple(parse_compression_op(s) for s in op_strings)
    else:
        ops = None
    result = run_attack_study(study, ops=ops)
    manifest = make_manifest("attack", args.config, study.seed,
                             json.dumps(cfg_for_hash, sort_keys=True).encode())
    writer = ReportWriter(args.out, manifest, fmt=args.format, plots=not args.no_plots)
    columns = ["mode", "op", "clean_accuracy", "attack_success_rate", "val_loss"]
    rows = []
    for report in (result.backdoor_report, result.control_report):
        for r in report.rows:
            rows.append({
                "mode": report.mode,
                "op": r.op_label,
                "clean_accuracy": r.clean_accuracy,
                "attack_success_rate": r.attack_success_rate,
                "val_loss": r.val_loss,
            })
    writer.table("attack", columns, rows)
    result.backdoor_net.save(writer.out_dir / "backdoor_net.json")
    result.control_net.save(writer.out_dir / "control_net.json")

    def draw(axes):
        labels = [r.op_label for r in result.backdoor_report.rows]
        xs = np.arange(len(labels))
        for ax, metric, title in (
            (axes[0], "clean_accuracy", "clean accuracy"),
            (axes[1], "attack_success_rate", "attack success rate"),
        ):
            for report, offset in ((result.backdoor_report, -0.18),
                                   (result.control_report, 0.18)):
                vals = [getattr(r, metric) for r in report.rows]
                ax.bar(xs + offset, vals, width=0.34, label=report.mode)
            ax.set_xticks(xs)
            ax.set_xticklabels(labels, rotation=15, ha="right")
            ax.set_ylim(0, 1.05)
            ax.set_title(title)
            ax.legend()

    writer.multi_figure("attack", 2, draw)
    return 0


def cmd_certify(args) -> int:
    from .backdoor import certify_threshold

    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    net, data, net_bytes = resolve_network(cfg, seed)
    x, label = resolve_sample(cfg, net, data)
    op_strings = cfg.get("ops")
    if not op_strings:
        raise UsageError("certify needs a non-empty 'ops' list (ordered by strength)")
    ops = [parse_compression_op(s) for s in op_strings]
    table = certify_threshold(
        net, x, label, ops,
        p_norm=float(cfg.get("p_norm", 2.0)),
        iterations=int(cfg.get("iterations", 10)),
        epsilon=float(cfg.get("epsilon", 1e-3)),
        seed=seed,
    )
    manifest = make_manifest("certify", args.config, seed,
                             json.dumps(cfg, sort_keys=True).encode(), net_bytes)
    writer = ReportWriter(args.out, manifest, fmt=args.format, plots=not args.no_plots)
    columns = ["op", "margin_after", "class_flip", "lipschitz", "delta_norm",
               "rhs", "bound_satisfied"]
    rows = [{
        "op": r.op_label,
        "margin_after": r.margin_after,
        "class_flip": r.class_flip,
        "lipschitz": r.lipschitz,
        "delta_norm": r.delta_norm,
        "rhs": r.rhs,
        "bound_satisfied": r.bound_satisfied,
    } for r in table.rows]
    writer.table("certify", columns, rows)
    writer.record("certify_summary", {
        "gamma": table.gamma,
        "p_norm": table.p,
        "certified_safe": table.certified_safe,
        "label": label,
    })

    def draw(ax):
        xs = np.arange(len(table.rows))
        ax.plot(xs, [r.rhs for r in table.rows], marker="o",
                label="bound rhs")
        ax.plot(xs, [r.margin_after for r in table.rows], marker="s",
                label="margin after op")
        ax.axhline(table.gamma, color="k", linestyle="--",
                   label=f"margin before (gamma={table.gamma:.3g})")
        ax.set_xticks(xs)
        ax.set_xticklabels([r.op_label for r in table.rows], rotation=20, ha="right")
        ax.set_title("Certification sweep")
        ax.legend()

    writer.figure("certify", draw)
    return 0


def cmd_lipschitz(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    net, data, net_bytes = resolve_network(cfg, seed)
    x, _ = resolve_sample(cfg, net, data)
    layers = cfg.get("layers")
    subset = (ParamSubset.of_layers(net, layers) if layers
              else ParamSubset.full(net))
    seeds = [int(s) for s in cfg.get("seeds", [seed])]
    iterations = int(cfg.get("iterations", 10))
    epsilon = float(cfg.get("epsilon", 1e-3))
    estimates = [
        estimate_lipschitz(net, x, subset, iterations=iterations,
                           epsilon=epsilon, seed=s)
        for s in seeds
    ]
    oracle_sigma = None
    if cfg.get("oracle", False):
        oracle_sigma = float(jacobian_oracle(net, x, subset).sigma[0])
    manifest = make_manifest("lipschitz", args.config, seed,
                             json.dumps(cfg, sort_keys=True).encode(), net_bytes)
    writer = ReportWriter(args.out, manifest, fmt=args.format, plots=not args.no_plots)
    columns = ["seed", "iteration", "u_norm"]
    rows = [{"seed": s, "iteration": i + 1, "u_norm": v}
            for s, est in zip(seeds, estimates)
            for i, v in enumerate(est.trace)]
    writer.table("lipschitz_trace", columns, rows)
    writer.record("lipschitz", {
        "estimates": [{
            "seed": s,
            "sigma_hat": est.sigma_hat,
            "iterations": est.iterations,
            "epsilon": est.epsilon,
            "converged": est.converged,
            "pattern_unstable": est.pattern_unstable,
            "restarts": est.restarts,
        } for s, est in zip(seeds, estimates)],
        "oracle_sigma_max": oracle_sigma,
        "selected_parameters": subset.count,
    })

    def draw(ax):
        for s, est in zip(seeds, estimates):
            ax.plot(range(1, len(est.trace) + 1), est.trace, marker=".",
                    label=f"seed {s}")
        if oracle_sigma is not None:
            ax.axhline(oracle_sigma, color="k", linestyle="--", label="dense oracle")
        ax.set_xlabel("power iteration")
        ax.set_ylabel("|u|")
        ax.set_title("Finite-difference power iteration trace")
        ax.legend()

    writer.figure("lipschitz", draw)
    return 0


def cmd_lowrank_analyze(args) -> int:
    from .compress import energy_split, low_rank_margin_analysis

    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    if "matrix" in cfg:
        w = np.asarray(cfg["matrix"], dtype=np.float64)
        if "z" not in cfg:
            raise UsageError("explicit 'matrix' requires 'z'")
        z = np.asarray(cfg["z"], dtype=np.float64)
        net_bytes = b""
        logits = w @ z
    else:
        net, data, net_bytes = resolve_network(cfg, seed)
        x, _ = resolve_sample(cfg, net, data)
        w = net.weights[-1]
        z = upstream(net, net.num_layers, x)[:, 0]
        logits = forward(net, x)[:, 0]
    t = int(cfg.get("true_class", int(np.argmax(logits))))
    rep = margin(logits, t)
    p = int(cfg.get("runner_up", rep.runner_up))
    max_k = min(w.shape)
    ks = [int(k) for k in cfg.get("ks", range(1, max_k + 1))]
    analysis = low_rank_margin_analysis(w, z, t, p, ks,
                                        pairwise_only=bool(cfg.get("true_class") is not None))
    manifest = make_manifest("lowrank-analyze", args.config, seed,
                             json.dumps(cfg, sort_keys=True).encode(), net_bytes)
    writer = ReportWriter(args.out, manifest, fmt=args.format, plots=not args.no_plots)
    columns = ["k", "s_k", "flip_predicted", "input_residual", "output_residual",
               "retained_own", "tail_own", "retained_full", "tail_full"]
    rows = []
    for k in ks:
        split = energy_split(w, z, k)
        rows.append({
            "k": k,
            "s_k": analysis.s_k[k],
            "flip_predicted": analysis.flip_predicted[k],
            "input_residual": analysis.input_residual_norm[k],
            "output_residual": analysis.output_residual_norm[k],
            "retained_own": split.retained_own,
            "tail_own": split.tail_own,
            "retained_full": split.retained_full,
            "tail_full": split.tail_full,
        })
    writer.table("lowrank", columns, rows)
    writer.record("lowrank_summary", {
        "m0": analysis.m0,
        "true_class": analysis.true_class,
        "runner_up": analysis.runner_up,
        "pairwise_only": analysis.pairwise_only,
        "ks": list(analysis.ks),
    })

    def draw(ax):
        ax.plot(ks, [analysis.s_k[k] for k in ks], marker="o", label="margin change s_k")
        ax.axhline(analysis.m0, color="k", linestyle="--",
                   label=f"margin m0={analysis.m0:.3g}")
        ax.set_xlabel("retained rank k")
        ax.set_ylabel("margin change")
        ax.set_title("Low-rank truncation margin analysis")
        ax.legend()

    writer.figure("lowrank", draw)
    return 0


COMMANDS = {
    "flip": cmd_flip,
    "multilayer": cmd_multilayer,
    "attack": cmd_attack,
    "certify": cmd_certify,
    "lipschitz": cmd_lipschitz,
    "lowrank-analyze": cmd_lowrank_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="perturbcert",
        description="Certifiable weight-perturbation analysis for dense networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", default=None, help="JSON or TOML config file")
        p.add_argument("--seed", type=int, default=None, help="override the study seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--no-plots", action="store_true",
                       help="skip rendering PNG figures")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TypeError, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except PerturbCertError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
