"""Command line entry point: ``rotmaxcnn <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from rotmaxcnn.cnn import ConfigError, load_weights, save_weights
from rotmaxcnn.compiler import compile_hmax, verify_compilation
from rotmaxcnn.harness import ExperimentConfig, ExperimentError, run_experiment
from rotmaxcnn.hmax import DomainError, load_spec
from rotmaxcnn.synth import DatasetError, generate_dataset, load_mnist_rot, save_dataset
from rotmaxcnn.training import INIT_SCHEMES, TrainConfig, TrainingError


def _compile(args) -> int:
    spec = load_spec(args.spec)
    arch = compile_hmax(spec, family=args.family)
    save_weights(arch, args.out)
    print(f"compiled {spec.order} branch(es), level {spec.level}, lambda {spec.lam} -> {args.out}")
    if args.samples:
        report = verify_compilation(spec, arch, args.samples, seed=args.seed)
        print(json.dumps(report.__dict__ | {"ok": report.ok}, indent=2))
        return 0 if report.ok else 1
    return 0


def _verify(args) -> int:
    spec = load_spec(args.spec)
    arch = load_weights(args.weights) if args.weights else compile_hmax(spec)
    report = verify_compilation(spec, arch, args.samples, seed=args.seed)
    text = json.dumps(report.__dict__ | {"ok": report.ok}, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0 if report.ok else 1


def _gen_data(args) -> int:
    ds = generate_dataset(args.n, args.lam, args.seed, path=args.out, ss=args.ss)
    print(f"wrote {len(ds)} images of {args.lam}x{args.lam} to {args.out} (label mean {ds.labels.mean():.3f})")
    return 0


def _import_mnist(args) -> int:
    classes = tuple(int(c) for c in args.classes.split(","))
    if len(classes) != 2:
        raise ConfigError("--classes needs exactly two digits, e.g. 4,9")
    ds, dropped = load_mnist_rot(args.inp, keep_classes=classes, transpose=args.transpose)
    save_dataset(ds, args.out)
    print(f"kept {len(ds)} rows ({int((ds.labels == 0).sum())} x '{classes[0]}', "
          f"{int((ds.labels == 1).sum())} x '{classes[1]}'), dropped {dropped}; wrote {args.out}")
    return 0


def _experiment(args) -> int:
    out = Path(args.out)
    grid = {}
    for name in ("l_grid", "k_grid", "Ln_grid", "t_grid"):
        val = getattr(args, name)
        if val:
            grid[name] = tuple(int(v) for v in val.split(","))
    config = ExperimentConfig(
        family=args.family, n=args.n, lam=args.lam, N=args.N, repetitions=args.reps, seed=args.seed,
        data=args.data, test_data=args.test_data, bound_rule=args.bound_rule,
        train=TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, init=args.init,
                          bias_init=args.bias_init),
        record_wall_time=not args.no_wall_time, invert_inputs=args.invert_inputs, **grid,
    )
    summary = out.with_name(out.stem + "_summary.csv")
    audit = out.with_name(out.stem + "_audit.csv")
    results, _ = run_experiment(config, out=out, summary=summary, audit=audit,
                                log=lambda m: print(m, file=sys.stderr, flush=True))
    print(f"wrote {len(results)} replicate rows to {out}, summary to {summary}, audit to {audit}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rotmaxcnn", description="Rotation-invariant max-pooling CNN classifiers.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="compile a hierarchical model spec into CNN weights")
    c.add_argument("--spec", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--family", choices=["F1", "F2"], default="F1")
    c.add_argument("--samples", type=int, default=0, help="also verify on this many random images")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_compile)

    v = sub.add_parser("verify", help="compare a compiled CNN with direct model evaluation")
    v.add_argument("--spec", required=True)
    v.add_argument("--weights", help="weight file; compiled on the fly if omitted")
    v.add_argument("--out", help="write the JSON report here")
    v.add_argument("--samples", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=_verify)

    g = sub.add_parser("gen-data", help="generate a rotated-squares dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--lambda", dest="lam", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ss", type=int, default=8, help="supersampling factor per axis")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_gen_data)

    m = sub.add_parser("import-mnist-rot", help="convert MNIST-rot text rows to a dataset container")
    m.add_argument("--in", dest="inp", required=True)
    m.add_argument("--classes", default="4,9")
    m.add_argument("--transpose", action="store_true", help="read pixel rows as column-major")
    m.add_argument("--out", required=True)
    m.set_defaults(func=_import_mnist)

    e = sub.add_parser("experiment", help="grid search + replicates for one architecture family")
    e.add_argument("--family", choices=["F1", "F2", "F3", "F4"], required=True)
    e.add_argument("--n", type=int, default=200)
    e.add_argument("--lambda", dest="lam", type=int, default=32)
    e.add_argument("--N", type=int, default=10_000, help="test set size")
    e.add_argument("--reps", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--data", default="synthetic", help="'synthetic' or a dataset container path")
    e.add_argument("--test-data", help="test container when --data is a file")
    e.add_argument("--out", required=True)
    e.add_argument("--epochs", type=int, default=200)
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--lr", type=float, default=1e-3)
    e.add_argument("--init", choices=INIT_SCHEMES, default="glorot_uniform")
    e.add_argument("--bias-init", type=float, default=0.0, help="starting value of convolution biases")
    e.add_argument("--l-grid", dest="l_grid")
    e.add_argument("--k-grid", dest="k_grid")
    e.add_argument("--Ln-grid", dest="Ln_grid")
    e.add_argument("--t-grid", dest="t_grid")
    e.add_argument("--bound-rule", choices=["experiment", "theorem"], default="experiment")
    e.add_argument("--no-wall-time", action="store_true", help="write wall_ms=0 for byte-reproducible CSVs")
    e.add_argument("--invert-inputs", action=argparse.BooleanOptionalAction, default=None,
                   help="feed 1 - x to the networks (default: on for synthetic data, off for files)")
    e.set_defaults(func=_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError, DatasetError, TrainingError, ExperimentError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
