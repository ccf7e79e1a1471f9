"""Command-line interface.

Subcommands: ``simulate`` (model to CSV), ``estimate`` (CSV + moment config to
subspace JSON), ``rank`` (CSV to dimension table), ``experiment`` (named or
custom study to result CSV/JSON), ``distributed`` (shard directory to subspace
JSON), ``bootstrap`` and ``r2``.  All randomized commands require ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .distributed import distributed_pipeline
from .estimator import SubspaceEstimate, WeightMatrix, estimate_rank, thresholded_pinv, two_step_gmm, weighted_eigen
from .models import Dataset, gen_factor, gen_index_model, gen_mixed_linear, gen_mixed_logistic, load_csv, write_csv
from .moments import materialize

__all__ = ["main"]


def _write_json(path, doc) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_moments(args, dataset: Dataset):
    with open(args.moments) as fh:
        doc = json.load(fh)
    return harness.build_moment_sets(doc, dataset.p_x, dataset.y)


def _cmd_simulate(args) -> int:
    mu_z = [args.mu if j % 2 == 0 else -args.mu for j in range(args.r)]
    if args.model == "factor":
        dataset, truth = gen_factor(args.n, args.p, args.r, mu_z, args.sigma, args.seed)
    elif args.model == "mixed-linear":
        dataset, truth = gen_mixed_linear(args.n, args.p, args.K, args.beta_radius, args.sigma, args.seed)
    elif args.model == "mixed-logistic":
        dataset, truth = gen_mixed_logistic(args.n, args.p, args.K, args.beta_radius, args.seed)
    else:
        dataset, truth = gen_index_model(args.n, args.p, args.variant, args.seed)
    write_csv(dataset, args.out)
    if args.truth_out:
        _write_json(
            args.truth_out,
            {
                "p": int(truth.basis.shape[0]),
                "r": truth.r,
                "basis": [float(v) for v in truth.basis.flatten(order="F")],
            },
        )
    print(f"wrote {dataset.n} samples (p={dataset.p_x}) to {args.out}")
    return 0


def _cmd_estimate(args) -> int:
    dataset = load_csv(args.data, args.response)
    mset = _load_moments(args, dataset)
    mm = materialize(dataset, mset)
    r = "auto" if args.r == "auto" else int(args.r)
    estimate, _, _ = two_step_gmm(mm, r, args.delta, args.weight_shape, args.iterations)
    _write_json(args.out, estimate.to_json())
    print(f"estimated r={estimate.r} subspace from m={mm.m} moments; wrote {args.out}")
    for w in estimate.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def _cmd_rank(args) -> int:
    dataset = load_csv(args.data, args.response)
    mset = _load_moments(args, dataset)
    mm = materialize(dataset, mset)
    _, _, weight = two_step_gmm(mm, "auto", args.delta)
    rank_est = estimate_rank(mm, weight, mm.n_samples, tau=args.tau, eta_quantile=args.eta_quantile)
    rank_est.to_csv(args.out)
    print(
        f"rank by threshold: {rank_est.rank_threshold} (threshold {rank_est.threshold:.6g}); "
        f"rank by chi2 rule: {rank_est.rank_chi2} (quantile {rank_est.quantile})"
    )
    print(f"wrote per-k table to {args.out}")
    return 0


def _cmd_experiment(args) -> int:
    doc: dict = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    if args.name:
        doc["name"] = args.name
    if "name" not in doc:
        raise harness.ConfigError("experiment needs --name or a config file with a name")
    for key in ("replicates", "n", "p", "r", "K"):
        value = getattr(args, key)
        if value is not None:
            doc[key] = value
    for key in ("delta", "mu", "sigma", "eta_quantile"):
        value = getattr(args, key)
        if value is not None:
            doc[key] = value
    if args.variant is not None:
        doc["variant"] = args.variant
    doc["seed"] = args.seed
    config = harness.ExperimentConfig.from_dict(doc)
    result = harness.run_experiment(config)
    harness.emit(result, args.format, args.out)
    print(f"ran {config.name}: {len(result.rows)} rows over {len(result.grid)} grid point(s); wrote {args.out}")
    return 0


def _cmd_distributed(args) -> int:
    shard_paths = sorted(Path(args.shards).glob("*.csv"))
    if not shard_paths:
        raise FileNotFoundError(f"no shard CSV files in {args.shards}")
    shards = [load_csv(p, args.response) for p in shard_paths]
    with open(args.moments) as fh:
        doc = json.load(fh)
    sets = [harness.build_moment_sets(doc, shard.p_x, shard.y) for shard in shards]
    estimate = distributed_pipeline(shards, sets, args.r, args.delta)
    _write_json(args.out, estimate.to_json())
    print(f"aggregated {len(shards)} shard(s); wrote {args.out}")
    return 0


def _cmd_bootstrap(args) -> int:
    dataset = load_csv(args.data, args.response)
    mset = _load_moments(args, dataset)
    rows = harness.bootstrap(dataset, mset, args.method, args.B, args.seed, r=args.r, delta=args.delta)
    with open(args.out, "w", newline="\n") as fh:
        fh.write("resample,dist_fro,dist_fro_sq,dist_spec,dist_spec_sq\n")
        for row in rows:
            fh.write(
                f"{row['resample']},{row['dist_fro']:.17g},{row['dist_fro_sq']:.17g},"
                f"{row['dist_spec']:.17g},{row['dist_spec_sq']:.17g}\n"
            )
    dist = np.array([row["dist_fro"] for row in rows])
    print(f"bootstrap ({args.B} resamples): mean distance {dist.mean():.6g}, sd {dist.std(ddof=1) if args.B > 1 else 0.0:.6g}")
    print(f"wrote {args.out}")
    return 0


def _cmd_r2(args) -> int:
    dataset = load_csv(args.data, args.response)
    with open(args.directions) as fh:
        doc = json.load(fh)
    directions = SubspaceEstimate.from_json(doc).basis if "eigenvalues" in doc else np.asarray(
        doc["basis"], dtype=np.float64
    ).reshape((int(doc["p"]), int(doc["r"])), order="F")
    if args.whiten:
        dataset, _ = harness.whiten(dataset)
    r2 = harness.evaluate_projection_r2(dataset, directions, args.degree)
    print(f"R-squared (degree {args.degree}): {r2:.6f}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subgmm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic dataset CSV")
    sim.add_argument("--model", choices=["factor", "mixed-linear", "mixed-logistic", "index"], required=True)
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--p", type=int, default=10)
    sim.add_argument("--r", type=int, default=2)
    sim.add_argument("--K", type=int, default=2)
    sim.add_argument("--mu", type=float, default=0.0)
    sim.add_argument("--sigma", type=float, default=1.0)
    sim.add_argument("--beta-radius", type=float, default=4.0)
    sim.add_argument("--variant", choices=["A", "B", "C"], default="A")
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--truth-out")
    sim.set_defaults(func=_cmd_simulate)

    est = sub.add_parser("estimate", help="two-step subspace estimate from a CSV dataset")
    est.add_argument("--data", required=True)
    est.add_argument("--response")
    est.add_argument("--moments", required=True, help="moment builder config (JSON)")
    est.add_argument("--r", default="auto", help="subspace dimension or 'auto'")
    est.add_argument("--delta", type=float, default=0.01)
    est.add_argument("--weight-shape", choices=["full", "diagonal"], default="full")
    est.add_argument("--iterations", type=int, default=1)
    est.add_argument("--out", required=True)
    est.set_defaults(func=_cmd_estimate)

    rnk = sub.add_parser("rank", help="subspace dimension estimates and per-k table")
    rnk.add_argument("--data", required=True)
    rnk.add_argument("--response")
    rnk.add_argument("--moments", required=True)
    rnk.add_argument("--delta", type=float, default=0.01)
    rnk.add_argument("--tau", type=float, default=None)
    rnk.add_argument("--eta-quantile", type=float, default=0.95)
    rnk.add_argument("--out", required=True)
    rnk.set_defaults(func=_cmd_rank)

    exp = sub.add_parser("experiment", help="run a named or custom Monte Carlo study")
    exp.add_argument("--name", choices=list(harness.FAMILIES))
    exp.add_argument("--config", help="experiment config (JSON)")
    exp.add_argument("--seed", type=int, required=True)
    exp.add_argument("--replicates", type=int)
    exp.add_argument("--delta", type=float)
    exp.add_argument("--eta-quantile", dest="eta_quantile", type=float)
    exp.add_argument("--n", type=int)
    exp.add_argument("--p", type=int)
    exp.add_argument("--r", type=int)
    exp.add_argument("--K", type=int)
    exp.add_argument("--mu", type=float)
    exp.add_argument("--sigma", type=float)
    exp.add_argument("--variant")
    exp.add_argument("--format", choices=["csv", "json"], default="csv")
    exp.add_argument("--out", required=True)
    exp.set_defaults(func=_cmd_experiment)

    dist = sub.add_parser("distributed", help="two-round estimation over shard CSVs in a directory")
    dist.add_argument("--shards", required=True, help="directory of shard CSV files")
    dist.add_argument("--response")
    dist.add_argument("--moments", required=True)
    dist.add_argument("--r", type=int, required=True)
    dist.add_argument("--delta", type=float, default=0.01)
    dist.add_argument("--out", required=True)
    dist.set_defaults(func=_cmd_distributed)

    boot = sub.add_parser("bootstrap", help="bootstrap a method over row resamples")
    boot.add_argument("--data", required=True)
    boot.add_argument("--response")
    boot.add_argument("--moments", required=True)
    boot.add_argument("--method", choices=["gmm-full", "gmm-diagonal", "unweighted"], default="gmm-full")
    boot.add_argument("--B", type=int, default=100)
    boot.add_argument("--seed", type=int, required=True)
    boot.add_argument("--r", type=int, required=True)
    boot.add_argument("--delta", type=float, default=0.01)
    boot.add_argument("--out", required=True)
    boot.set_defaults(func=_cmd_bootstrap)

    r2p = sub.add_parser("r2", help="polynomial-fit R-squared on projected covariates")
    r2p.add_argument("--data", required=True)
    r2p.add_argument("--response", required=True)
    r2p.add_argument("--directions", required=True, help="subspace JSON (estimate or truth format)")
    r2p.add_argument("--degree", type=int, choices=[1, 2], default=2)
    r2p.add_argument("--whiten", action="store_true")
    r2p.set_defaults(func=_cmd_r2)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
