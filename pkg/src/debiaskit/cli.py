"""Command-line entry points.

Subcommands: generate, train-biased, debias, oracle-check, vcae, sweep,
report. Every command is deterministic given its config and seed; repeated
invocations produce byte-identical CSV output.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .classifier import GceConfig, TrainConfig, save_model
from .data import GenConfig, generate, load_dataset, save_dataset
from .debias import train_biased_classifier
from .runner import (ConfigError, RunConfig, aggregate_report, run_experiment,
                     run_sweep)


def _add_gen_flags(p):
    p.add_argument("--kind", default="two-factor",
                   choices=["two-factor", "colored-glyphs"])
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--rho", type=float, default=0.01,
                   help="bias-conflicting ratio in (0,1)")
    p.add_argument("--sigma-u", type=float, default=0.5)
    p.add_argument("--sigma-b", type=float, default=0.1)


def cmd_generate(args) -> int:
    cfg = GenConfig(num_classes=args.classes, n=args.n, bc_ratio=args.rho,
                    sigma_u=args.sigma_u, sigma_b=args.sigma_b,
                    seed=args.seed, kind=args.kind)
    ds = generate(cfg)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({cfg.kind}, rho={cfg.bc_ratio}) to {args.out}")
    return 0


def cmd_train_biased(args) -> int:
    ds = load_dataset(args.data)
    cfg = TrainConfig(epochs=args.t_bias, batch_size=args.batch_size,
                      lr=args.lr, seed=args.seed)
    art = train_biased_classifier(ds, GceConfig(tau=args.tau), args.t_bias, cfg)
    out = Path(args.out)
    save_model(art.params, out, extra={"t_bias": art.t_bias, "tau": art.tau,
                                       "n": len(ds), "num_classes": ds.num_classes})
    (out / "confidences.f64le").write_bytes(art.confidences.astype("<f8").tobytes())
    (out / "class_probs.f64le").write_bytes(art.class_probs.astype("<f8").tobytes())
    lo, hi = art.confidences.min(), art.confidences.max()
    print(f"amplified classifier trained {art.t_bias} epochs; "
          f"confidence range [{lo:.3g}, {hi:.3g}]; artifact in {args.out}")
    return 0


def _load_run_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.from_json(args.config)
    else:
        cfg = RunConfig(dataset=GenConfig(num_classes=10, n=10000, bc_ratio=0.01))
    overrides = {}
    for name in ("scheme", "method", "gamma", "tau"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "t_bias", None) is not None:
        overrides["t_bias"] = args.t_bias
    if getattr(args, "data", None) is not None:
        overrides["dataset_path"] = args.data
        overrides["dataset"] = None
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    return replace(cfg, **overrides) if overrides else cfg


def cmd_debias(args) -> int:
    cfg = _load_run_config(args)
    summary = run_experiment(cfg)
    m = summary["metrics"]
    print(f"{cfg.scheme}/{cfg.method} over seeds {cfg.seeds}: "
          f"acc={m['test_acc']['mean']:.4f}±{m['test_acc']['std']:.4f} "
          f"bc={m['test_acc_bc']['mean']:.4f} ba={m['test_acc_ba']['mean']:.4f} "
          f"beta={m['beta']['mean']:.4f}")
    print(f"artifacts in {cfg.out_dir}")
    return 0


def cmd_oracle_check(args) -> int:
    from .causal import oracle_report
    report = oracle_report(seed=args.seed if args.seed is not None else 0)
    text = json.dumps(report, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle_report.json").write_text(text + "\n")
    print(text)
    return 0 if report["all_pass"] else 1


def cmd_vcae(args) -> int:
    from .vcae import VcaeConfig, latent_dump, train_vcae, vcae_weights
    ds = load_dataset(args.data)
    cfg = VcaeConfig(num_classes=ds.num_classes, dim_z=args.dim_z,
                     lambda0=args.lambda0, lambda1=args.lambda1,
                     lambda2=args.lambda2, hidden=(args.hidden,))
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                     lr=args.lr, seed=args.seed if args.seed is not None else 0)
    params, history = train_vcae(ds, cfg, tc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = latent_dump(params, ds, cap=args.cap)
    header = list(rows[0].keys())
    with (out / "latents.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v
                        for v in (row[k] for k in header)])
    with (out / "vcae_history.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for h in history:
            w.writerow([h["epoch"], repr(h["loss"])])
    weights = vcae_weights(params, ds, cap=args.cap)
    with (out / "weights.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "weight", "aligned", "provenance"])
        for i, wi in enumerate(weights.weights):
            w.writerow([i, repr(float(wi)),
                        int(ds.aligned[i]) if ds.aligned is not None else "",
                        weights.provenance])
    print(f"trained {tc.epochs} epochs, final loss {history[-1]['loss']:.4f}; "
          f"dumps in {args.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args)
    if (args.gamma_list is None) == (args.t_bias_list is None):
        raise ConfigError("sweep needs exactly one of --gamma/--t-bias as a list")
    if args.gamma_list is not None:
        axis, values = "gamma", [float(v) for v in args.gamma_list.split(",")]
    else:
        axis, values = "t_bias", [float(v) for v in args.t_bias_list.split(",")]
    path = run_sweep(cfg, axis, values, jobs=args.jobs)
    print(f"sweep over {axis}={values} merged into {path}")
    return 0


def cmd_report(args) -> int:
    summary = aggregate_report(args.out)
    print(json.dumps(summary, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="debiaskit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic biased dataset")
    _add_gen_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train-biased", help="train and freeze the amplified classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--t-bias", type=int, default=5)
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_biased)

    p = sub.add_parser("debias", help="run one debiasing experiment")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory (overrides config)")
    p.add_argument("--scheme", choices=["vanilla", "oracle-ub", "oracle-yb",
                                        "biased-confidence", "lff", "pgd", "vcae"])
    p.add_argument("--method", choices=["LW", "ALW", "WS", "TBA"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--t-bias", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_debias)

    p = sub.add_parser("oracle-check", help="exact causal/equivalence checks as JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_oracle_check)

    p = sub.add_parser("vcae", help="train the clustering autoencoder and dump latents")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--dim-z", type=int, default=2)
    p.add_argument("--lambda0", type=float, default=1.0)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--cap", type=float, default=100.0)
    p.set_defaults(fn=cmd_vcae)

    p = sub.add_parser("sweep", help="grid over gamma or t_bias with merged CSV")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--scheme", choices=["vanilla", "oracle-ub", "oracle-yb",
                                        "biased-confidence", "lff", "pgd", "vcae"])
    p.add_argument("--method", choices=["LW", "ALW", "WS", "TBA"])
    p.add_argument("--gamma", dest="gamma_list",
                   help="comma-separated gamma values")
    p.add_argument("--t-bias", dest="t_bias_list",
                   help="comma-separated t_bias values")
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="recompute the summary from metrics.csv")
    p.add_argument("--out", required=True, help="experiment output directory")
    p.set_defaults(fn=cmd_report)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
