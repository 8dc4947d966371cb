"""Command line entry point: ``hmoe <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 too many aborted trials.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np

from .bridge import AttentionWeights, verify_equivalence
from .estimator import ConfigError, Dataset, FitError, OptimizerConfig, fit, init_near_truth
from .harness import (
    AbortBudgetExceeded,
    ExperimentConfig,
    emit_outputs,
    generate_dataset,
    rates_document,
    run_experiment,
)
from .identifiability import build_type1_family, build_type2_family, gram_min_singular, pde_residual
from .model import Activation, DimensionError, MixingMeasure, ModelSpec, load_true_measure
from .voronoi import QuadratureGrid, assign_cells, loss_L1, loss_L2

EXIT_OK, EXIT_INVALID, EXIT_ABORTS = 0, 1, 2
EQUIVALENCE_TOL = 1e-10
DEFAULT_FLOOR = 1e-6


def _spec(args) -> ModelSpec:
    act = Activation.identity() if args.activation == "identity" else Activation.sigmoid(args.bias)
    return ModelSpec(args.variant, act)


def _truth(path):
    return MixingMeasure.from_json(path).normalized() if path else load_true_measure()


def _print(doc):
    print(json.dumps(doc, indent=2))


def cmd_simulate(args) -> int:
    data = generate_dataset(_truth(args.truth), _spec(args), args.n, args.nu, args.seed)
    data.save(args.out)
    _print({"out": args.out, **data.meta})
    return EXIT_OK


def cmd_fit(args) -> int:
    data = Dataset.load(args.data)
    Gstar = _truth(args.truth)
    if args.init:
        G0 = MixingMeasure.from_json(args.init)
    else:
        G0 = init_near_truth(Gstar, args.K, data.n, np.random.default_rng(args.seed), args.init_scale)
    cfg = OptimizerConfig(eta=args.eta, max_epochs=args.epochs)
    spec = _spec(args)
    res = fit(G0, data, spec, cfg)
    if args.out:
        res.measure.to_json(args.out)
    grid = QuadratureGrid.uniform(Gstar.d, args.grid_size)
    _print({
        "sse_init": res.trajectory[0], "sse": res.sse, "epochs": res.epochs, "reason": res.reason,
        "loss_l2": loss_L2(res.measure, Gstar, spec, grid),
        "loss_l1_r1": loss_L1(res.measure, Gstar, 1, spec, grid),
    })
    return EXIT_OK


def cmd_rates(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.workers:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "workers": args.workers})
    out_dir = args.out or cfg.output_dir
    start = time.perf_counter()

    def progress(t):
        logging.info("%s K=%d n=%d trial=%d L2=%.4g epochs=%d (%.0fs)",
                     t.variant, t.K, t.n, t.trial, t.loss_l2, t.epochs, time.perf_counter() - start)

    dump = f"{out_dir}/fits" if args.dump_fits else None
    try:
        report = run_experiment(cfg, dump_dir=dump, progress=progress)
    except AbortBudgetExceeded as exc:
        emit_outputs(exc.args[1], out_dir)
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_ABORTS
    emit_outputs(report, out_dir)
    _print(rates_document(report))
    return EXIT_OK


def cmd_voronoi(args) -> int:
    G = MixingMeasure.from_json(args.fitted)
    Gstar = MixingMeasure.from_json(args.truth)
    spec = _spec(args)
    grid = QuadratureGrid.uniform(Gstar.d, args.grid_size)
    cells = assign_cells(G, Gstar, spec, grid)
    _print({
        "loss_l1_r1": loss_L1(G, Gstar, 1, spec, grid, cells),
        "loss_l2": loss_L2(G, Gstar, spec, grid, cells),
        "assignment": cells.to_dict(),
    })
    return EXIT_OK


def cmd_identifiability(args) -> int:
    act = Activation.identity() if args.activation == "identity" else Activation.sigmoid(args.bias)
    Gstar = _truth(args.truth)
    build = build_type1_family if args.type == 1 else build_type2_family
    family = build(Gstar, act)
    X = np.random.default_rng(args.seed).uniform(-1.0, 1.0, size=(args.grid_size, Gstar.d))
    sigma = gram_min_singular(family, X)
    pde = max(pde_residual(act, Gstar.M[h, i], Gstar.a[h, i, k], X)
              for h in range(Gstar.H) for i in range(Gstar.N) for k in range(Gstar.K))
    _print({
        "type": args.type, "activation": act.kind, "bias": act.bias, "members": len(family),
        "sigma_min": sigma, "floor": args.floor, "pass": bool(sigma > args.floor), "pde_residual": pde,
    })
    return EXIT_OK


def cmd_bridge(args) -> int:
    w = AttentionWeights.from_json(args.weights)
    X = np.random.default_rng(args.seed).uniform(-1.0, 1.0, size=(w.N, w.d))
    diff = verify_equivalence(w, X)
    _print({"max_abs_diff": diff, "pass": bool(diff < EQUIVALENCE_TOL)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hmoe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(q, variant=True):
        if variant:
            q.add_argument("--variant", default="GatedValue", help="MHA, GatedValue or GatedSDPA")
        q.add_argument("--activation", choices=["identity", "sigmoid"], default="sigmoid")
        q.add_argument("--bias", type=float, default=0.5)
        q.add_argument("--truth", help="true measure JSON (default: shipped fixture)")

    q = sub.add_parser("simulate", help="generate a dataset")
    model_args(q)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--nu", type=float, default=0.1)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True, help=".npz path")
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("fit", help="fit one dataset")
    model_args(q)
    q.add_argument("--data", required=True)
    q.add_argument("--K", type=int, default=3)
    q.add_argument("--init", help="starting measure JSON (default: perturbed truth)")
    q.add_argument("--init-scale", type=float, default=1.0)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--eta", type=float, default=0.05)
    q.add_argument("--epochs", type=int, default=1000)
    q.add_argument("--grid-size", type=int, default=4096)
    q.add_argument("--out", help="write fitted measure JSON")
    q.set_defaults(func=cmd_fit)

    q = sub.add_parser("rates", help="run a full experiment from a config file")
    q.add_argument("--config", required=True)
    q.add_argument("--out", help="output directory (default: output_dir in config)")
    q.add_argument("--workers", type=int)
    q.add_argument("--dump-fits", action="store_true")
    q.set_defaults(func=cmd_rates)

    q = sub.add_parser("voronoi", help="Voronoi losses between two measures")
    q.add_argument("fitted")
    q.add_argument("truth")
    q.add_argument("--variant", default="GatedValue")
    q.add_argument("--activation", choices=["identity", "sigmoid"], default="sigmoid")
    q.add_argument("--bias", type=float, default=0.5)
    q.add_argument("--grid-size", type=int, default=4096)
    q.set_defaults(func=cmd_voronoi)

    q = sub.add_parser("check-identifiability", help="Gram sigma_min of a derivative family")
    model_args(q, variant=False)
    q.add_argument("--type", type=int, choices=[1, 2], default=1)
    q.add_argument("--grid-size", type=int, default=4096)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--floor", type=float, default=DEFAULT_FLOOR)
    q.set_defaults(func=cmd_identifiability)

    q = sub.add_parser("bridge-verify", help="attention vs HMoE entry equivalence")
    q.add_argument("weights")
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_bridge)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DimensionError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
