"""Command-line entry point.

Subcommands:
  gen    write a synthetic instance directory (phi.csv, y.csv, x_true.csv, meta.json)
  solve  run one algorithm on a generated or imported instance
  exp    run an experiment protocol (fig1 | fig2 | fig3 | sweep)

Exit codes: 0 success, 1 configuration error, 2 solver error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import CorrSparseError
from .harness import ALGORITHMS, RUNNERS, ExperimentConfig, run_single
from .synth import MmvGenSpec, export_instance, gen_mmv_instance


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker processes (env CORR_SPARSE_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corr-sparse",
        description="Correlation-aware sparse recovery toolkit and experiment harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic instance directory")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=25)
    g.add_argument("--m", type=int, default=125)
    g.add_argument("--k", type=int, default=12)
    g.add_argument("--l", type=int, default=4)
    g.add_argument("--beta", type=float, default=0.0)
    g.add_argument("--snr-db", type=float, default=None)
    g.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("solve", help="solve one instance with one algorithm")
    _add_common(s)
    s.add_argument("--algo", choices=ALGORITHMS, default="tsbl")
    s.add_argument("--instance", help="instance directory to import (from `gen`)")
    s.add_argument("--n", type=int)
    s.add_argument("--m", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--l", type=int)
    s.add_argument("--beta", type=float)
    s.add_argument("--snr-db", type=float)

    e = sub.add_parser("exp", help="run an experiment protocol")
    e.add_argument("experiment", choices=("fig1", "fig2", "fig3", "sweep"))
    _add_common(e)
    e.add_argument("--trials", type=int)
    e.add_argument("--algos", help="comma-separated algorithm ids")
    e.add_argument("--window-len", help="comma-separated window lengths (fig3)")
    return parser


def _load_config(args, experiment=None) -> ExperimentConfig:
    data = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            data = json.load(fh)
    if experiment:
        data["experiment"] = experiment
    if getattr(args, "seed", None) is not None:
        data["master_seed"] = args.seed
    if getattr(args, "out", None):
        data["out_dir"] = args.out
    if getattr(args, "threads", None) is not None:
        data["threads"] = args.threads
    if getattr(args, "trials", None) is not None:
        data["trials"] = args.trials
    if getattr(args, "algos", None):
        data["algos"] = tuple(a.strip() for a in args.algos.split(",") if a.strip())
    if getattr(args, "window_len", None):
        data["window_lens"] = tuple(int(w) for w in args.window_len.split(","))
    return ExperimentConfig.from_dict(data)


def _cmd_gen(args) -> int:
    spec = MmvGenSpec(
        n=args.n, m=args.m, k=args.k, l=args.l,
        corr_beta=args.beta, snr_db=args.snr_db, seed=args.seed,
    )
    problem, truth = gen_mmv_instance(spec)
    export_instance(args.out, problem, truth)
    print(f"wrote instance ({args.n}x{args.m}, k={args.k}, l={args.l}) to {args.out}")
    return 0


def _cmd_solve(args) -> int:
    config = _load_config(args)
    config.algo = args.algo
    if args.instance:
        config.instance_dir = args.instance
    gen = dict(config.gen)
    for key in ("n", "m", "k", "l"):
        val = getattr(args, key, None)
        if val is not None:
            gen[key] = val
    if args.beta is not None:
        gen["corr_beta"] = args.beta
    if args.snr_db is not None:
        gen["snr_db"] = args.snr_db
    config.gen = gen
    summary = run_single(config)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_exp(args) -> int:
    config = _load_config(args, experiment=args.experiment)
    result = RUNNERS[config.experiment](config)
    print(f"{config.experiment}: {len(result.records)} trial records -> {config.out_dir}")
    for key in sorted(result.rates):
        algo, beta, l = key
        print(f"  {algo:>18s} beta={beta:<4g} L={l}: failure {result.rates[key]:.3f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen":
            return _cmd_gen(args)
        if args.command == "solve":
            return _cmd_solve(args)
        if args.command == "exp":
            return _cmd_exp(args)
        parser.error(f"unknown command {args.command!r}")
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except CorrSparseError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
