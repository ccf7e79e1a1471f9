"""Experiment runner: named Monte Carlo studies, bootstrap resampling,
projection R-squared evaluation and CSV/JSON result emission.

Replicates are seeded through per-(grid point, replicate) substreams of the
master seed, so results are independent of execution order and worker count,
and every method within a replicate sees identical data.  Wall-clock runtimes
are kept on the in-memory rows but excluded from emitted files so that a fixed
seed produces bitwise-identical output.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import re
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .estimator import (
    SubspaceEstimate,
    WeightMatrix,
    eigh_descending,
    estimate_rank,
    subspace_metrics,
    two_step_gmm,
    weighted_eigen,
)
from .models import (
    Dataset,
    GroundTruth,
    draw_sphere_coefficients,
    gen_factor,
    gen_index_model,
    gen_mixed_linear,
    gen_mixed_logistic,
)
from .moments import (
    MomentFunctionSet,
    MomentMatrix,
    concat,
    cosine_moments,
    factor_moments,
    materialize,
    mixture_moments,
    phd_moments,
    sign_robust_moments,
)
from .rng import derive_seed, substream

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "ResultRow",
    "MethodSummary",
    "ConfigError",
    "run_experiment",
    "bootstrap",
    "evaluate_projection_r2",
    "whiten",
    "emit",
    "load_result_json",
    "load_summary_csv",
    "cosine_bank_scales",
    "build_moment_sets",
    "pooled_se",
]

FAMILIES = ("example1", "example2", "example3", "dimest", "custom")

ROW_COLUMNS = (
    "grid_index",
    "grid",
    "method",
    "replicate",
    "dist_fro",
    "dist_fro_sq",
    "dist_spec",
    "dist_spec_sq",
    "rank_threshold",
    "rank_chi2",
)

SUMMARY_COLUMNS = (
    "grid_index",
    "grid",
    "method",
    "replicates",
    "mean_dist_fro",
    "se_dist_fro",
    "mean_dist_fro_sq",
    "se_dist_fro_sq",
    "mean_dist_spec",
    "se_dist_spec",
    "mean_dist_spec_sq",
    "se_dist_spec_sq",
)

_SUBSET_RE = re.compile(r"^gmm-subset\(([^()]*)\)$")


class ConfigError(ValueError):
    """Invalid experiment configuration (unknown name, method tag, ...)."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of a Monte Carlo experiment.

    ``name`` picks the study family; unset model parameters are filled with
    that family's defaults by :func:`resolve_config`.  ``sweep`` maps config
    field names to value lists; the grid is their cartesian product.
    """

    name: str
    methods: tuple[str, ...] = ()
    replicates: int = 100
    seed: int = 0
    delta: float = 0.01
    eta_quantile: float = 0.95
    n: int | None = None
    p: int = 10
    r: int | None = None
    K: int = 2
    mu: float = 2.0
    sigma: float | None = None
    beta_radius: float = 4.0
    variant: str = "A"
    model: str | None = None
    components: tuple[str, ...] = ()
    sweep: dict | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known - {"version"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = {k: v for k, v in doc.items() if k != "version"}
        if "methods" in doc:
            doc["methods"] = tuple(doc["methods"])
        if "components" in doc:
            doc["components"] = tuple(doc["components"])
        return cls(**doc)


_FAMILY_DEFAULTS = {
    "example1": dict(n=500, r=2, sigma=2.0, methods=("standard", "gmm-full", "gmm-diagonal")),
    "example2": dict(
        n=800,
        r=None,  # equals K
        sigma=1.0,
        methods=("standard", "robustified", "gmm-full", "gmm-diagonal", "gmm-subset(a,b,d)", "gmm-subset(a,b)"),
    ),
    "example3": dict(n=400, r=2, sigma=None, methods=("phd-y", "phd-residual", "gmm-full", "gmm-diagonal")),
    "dimest": dict(n=None, r=2, sigma=2.0, methods=("gmm-full",)),
    "custom": dict(n=500, r=2, sigma=1.0, methods=("gmm-full",)),
}

_DEFAULT_SWEEPS = {
    "example1": {"mu": [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]},
    "example2": {"n": [800, 3200]},
    "example3": {"variant": ["A", "B", "C"]},
}

_CUSTOM_COMPONENTS = ("factor", "y-first", "y-second", "y2-second", "cosine-bank", "sign-robust", "phd-residual")


def _family_components(cfg: ExperimentConfig) -> tuple[str, ...]:
    if cfg.name == "example2":
        return ("a", "b", "c", "d")
    if cfg.name == "example3":
        return ("first", "cosine", "phd-y", "phd-r")
    if cfg.name in ("example1", "dimest"):
        return ("factor",)
    return cfg.components


def _parse_method(method: str, components: tuple[str, ...], family: str) -> tuple[str, ...] | None:
    """Return the component subset of a gmm-subset tag, or None otherwise;
    raise ConfigError for unrecognized tags."""
    match = _SUBSET_RE.match(method)
    if match:
        tags = tuple(t.strip() for t in match.group(1).split(",") if t.strip())
        if not tags:
            raise ConfigError(f"empty component list in method {method!r}")
        bad = [t for t in tags if t not in components]
        if bad:
            raise ConfigError(f"method {method!r}: unknown components {bad}; expected subset of {components}")
        return tags
    allowed = {"gmm-full", "gmm-diagonal"}
    if family in ("example1", "dimest", "custom"):
        allowed.add("standard")
    if family == "example2":
        allowed.update({"standard", "robustified"})
    if family == "example3":
        allowed.update({"phd-y", "phd-residual"})
    if method not in allowed:
        raise ConfigError(f"unknown method tag {method!r} for family {family!r}")
    return None


def resolve_config(config: ExperimentConfig) -> ExperimentConfig:
    """Fill family defaults and validate; raises ConfigError before any
    computation if a method tag or sweep key is not recognized."""
    if config.name not in FAMILIES:
        raise ConfigError(f"unknown experiment name {config.name!r}; expected one of {FAMILIES}")
    defaults = _FAMILY_DEFAULTS[config.name]
    updates: dict = {}
    if config.n is None:
        updates["n"] = defaults["n"]
    if config.r is None:
        updates["r"] = defaults["r"] if defaults["r"] is not None else config.K
    if config.sigma is None and defaults["sigma"] is not None:
        updates["sigma"] = defaults["sigma"]
    if not config.methods:
        updates["methods"] = defaults["methods"]
    if config.sweep is None and config.name in _DEFAULT_SWEEPS:
        updates["sweep"] = {k: list(v) for k, v in _DEFAULT_SWEEPS[config.name].items()}
    cfg = replace(config, **updates)
    if cfg.name == "dimest" and cfg.n is None:
        cfg = replace(cfg, n=250 * cfg.r)
    if cfg.replicates < 1:
        raise ConfigError("replicates must be >= 1")
    if cfg.name == "custom":
        if cfg.model not in ("factor", "mixed-linear", "mixed-logistic", "index"):
            raise ConfigError(f"custom experiments need model in factor|mixed-linear|mixed-logistic|index, got {cfg.model!r}")
        bad = [c for c in cfg.components if c not in _CUSTOM_COMPONENTS]
        if bad:
            raise ConfigError(f"unknown custom components {bad}; expected subset of {_CUSTOM_COMPONENTS}")
        if not cfg.components:
            raise ConfigError("custom experiments need at least one moment component")
    components = _family_components(cfg)
    for method in cfg.methods:
        _parse_method(method, components, cfg.name)
    if cfg.sweep:
        known = {f.name for f in fields(ExperimentConfig)}
        bad = [k for k in cfg.sweep if k not in known or k in ("name", "methods", "sweep", "seed", "replicates")]
        if bad:
            raise ConfigError(f"sweep over non-sweepable keys {bad}")
    return cfg


@dataclass(frozen=True)
class ResultRow:
    grid_index: int
    grid: str
    method: str
    replicate: int
    dist_fro: float
    dist_fro_sq: float
    dist_spec: float
    dist_spec_sq: float
    rank_threshold: int | None = None
    rank_chi2: int | None = None
    runtime_s: float = 0.0


@dataclass(frozen=True)
class MethodSummary:
    grid_index: int
    grid: str
    method: str
    replicates: int
    mean_dist_fro: float
    se_dist_fro: float
    mean_dist_fro_sq: float
    se_dist_fro_sq: float
    mean_dist_spec: float
    se_dist_spec: float
    mean_dist_spec_sq: float
    se_dist_spec_sq: float


@dataclass(frozen=True)
class ExperimentResult:
    """Per-replicate rows plus per-(grid point, method) mean/standard-error
    aggregates.  ``grid`` lists the parameter overrides of each grid point."""

    config: ExperimentConfig
    grid: tuple[dict, ...]
    rows: tuple[ResultRow, ...]
    summary: tuple[MethodSummary, ...]

    def find_summary(self, grid_index: int, method: str) -> MethodSummary:
        for s in self.summary:
            if s.grid_index == grid_index and s.method == method:
                return s
        raise KeyError(f"no summary for grid {grid_index}, method {method!r}")

    def distances(self, grid_index: int, method: str) -> np.ndarray:
        return np.array(
            [r.dist_fro for r in self.rows if r.grid_index == grid_index and r.method == method]
        )


def pooled_se(se_a: float, se_b: float) -> float:
    """Standard error of a difference of two independent means."""
    return math.sqrt(se_a**2 + se_b**2)


def cosine_bank_scales(y: np.ndarray, count: int = 4, quantile: float = 0.8) -> list[tuple[float, float]]:
    """Scale pairs for a bank of cosine-transformed first moments:
    h_j(y) = cos(y * pi / (2 tau) + (j - 1) pi / 4) with tau the ``quantile``
    sample quantile (linear interpolation) of |y|."""
    tau = float(np.quantile(np.abs(np.asarray(y)), quantile))
    if tau <= 0:
        raise ValueError("cosine bank needs a positive response scale; |y| quantile is zero")
    t = 2.0 * tau / math.pi
    return [(t, j * math.pi / 4.0) for j in range(count)]


# ---------------------------------------------------------------------------
# Data and moment construction per experiment family
# ---------------------------------------------------------------------------

def _alternating(mu: float, r: int) -> np.ndarray:
    return np.array([mu if j % 2 == 0 else -mu for j in range(r)])


def _model_kind(cfg: ExperimentConfig) -> str:
    if cfg.name in ("example1", "dimest"):
        return "factor"
    if cfg.name == "example2":
        return "mixed-linear"
    if cfg.name == "example3":
        return "index"
    return cfg.model


def _experiment_params(cfg: ExperimentConfig, master_seed: int) -> dict:
    """Model parameters held fixed over all replicates and grid points of one
    experiment (re-drawn only when the master seed or the model shape
    changes)."""
    kind = _model_kind(cfg)
    if kind == "factor":
        loading = substream(master_seed, "params", "loading", cfg.p, cfg.r).standard_normal((cfg.p, cfg.r))
        return {"loading": loading}
    if kind in ("mixed-linear", "mixed-logistic"):
        betas = draw_sphere_coefficients(
            cfg.p, cfg.K, cfg.beta_radius, derive_seed(master_seed, "params", "mixture", cfg.p, cfg.K)
        )
        intercepts = substream(master_seed, "params", "intercepts", cfg.K).standard_normal(cfg.K)
        return {"betas": betas, "intercepts": intercepts}
    return {}


def _generate(cfg: ExperimentConfig, seed: int, params: dict) -> tuple[Dataset, GroundTruth]:
    kind = _model_kind(cfg)
    if kind == "factor":
        return gen_factor(cfg.n, cfg.p, cfg.r, _alternating(cfg.mu, cfg.r), cfg.sigma, seed, loading=params["loading"])
    if kind == "mixed-linear":
        return gen_mixed_linear(
            cfg.n, cfg.p, cfg.K, cfg.beta_radius, cfg.sigma, seed,
            betas=params["betas"], intercepts=params["intercepts"],
        )
    if kind == "mixed-logistic":
        return gen_mixed_logistic(
            cfg.n, cfg.p, cfg.K, cfg.beta_radius, seed,
            betas=params["betas"], intercepts=params["intercepts"],
        )
    return gen_index_model(cfg.n, cfg.p, cfg.variant, seed)


def _component_set(kind: str, cfg: ExperimentConfig, dataset: Dataset) -> MomentFunctionSet:
    p = cfg.p
    if kind == "factor":
        return factor_moments(p, cfg.sigma if cfg.sigma is not None else 0.0)
    if kind in ("a", "first", "y-first"):
        return mixture_moments(p, "y-first")
    if kind in ("b", "y2-second"):
        return mixture_moments(p, "y2-second")
    if kind in ("c", "cosine", "cosine-bank"):
        return cosine_moments(p, "first", cosine_bank_scales(dataset.y))
    if kind in ("d", "sign-robust"):
        return sign_robust_moments(p)
    if kind in ("phd-y", "y-second"):
        return phd_moments(p, residualize=False)
    if kind in ("phd-r", "phd-residual"):
        return phd_moments(p, residualize=True)
    raise ConfigError(f"unknown moment component {kind!r}")


class _ReplicateContext:
    """Per-replicate cache of component moment sets and materializations."""

    def __init__(self, cfg: ExperimentConfig, dataset: Dataset, truth: GroundTruth):
        self.cfg = cfg
        self.dataset = dataset
        self.truth = truth
        self.components = _family_components(cfg)
        self._sets: dict[str, MomentFunctionSet] = {}
        self._mats: dict[tuple[str, ...], MomentMatrix] = {}

    def component(self, tag: str) -> MomentFunctionSet:
        if tag not in self._sets:
            self._sets[tag] = _component_set(tag, self.cfg, self.dataset)
        return self._sets[tag]

    def moment_matrix(self, tags: Sequence[str]) -> MomentMatrix:
        key = tuple(tags)
        if key not in self._mats:
            mset = concat([self.component(t) for t in key])
            self._mats[key] = materialize(self.dataset, mset)
        return self._mats[key]


def _covariance_pca(dataset: Dataset, r: int) -> np.ndarray:
    centered = dataset.x - dataset.x.mean(axis=0)
    cov = centered.T @ centered / dataset.n
    _, evecs = eigh_descending(cov)
    return evecs[:, :r]


def _run_method(ctx: _ReplicateContext, method: str):
    """Run one method tag; returns (basis, rank-estimate-or-None)."""
    cfg = ctx.cfg
    subset = _parse_method(method, ctx.components, cfg.name)
    if subset is not None:
        mm = ctx.moment_matrix(subset)
        est, _, _ = two_step_gmm(mm, cfg.r, cfg.delta, "full")
        return est.basis, None
    if method == "standard" and cfg.name in ("example1", "dimest"):
        return _covariance_pca(ctx.dataset, cfg.r), None
    if method == "standard" and cfg.name == "example2":
        mm = ctx.moment_matrix(("b",))
        return weighted_eigen(mm, WeightMatrix.identity(mm.m), cfg.r).basis, None
    if method == "standard":  # custom family: unweighted combination of all components
        mm = ctx.moment_matrix(ctx.components)
        return weighted_eigen(mm, WeightMatrix.identity(mm.m), cfg.r).basis, None
    if method == "robustified":
        mm = ctx.moment_matrix(("d",))
        return weighted_eigen(mm, WeightMatrix.identity(mm.m), cfg.r).basis, None
    if method == "phd-y":
        mm = ctx.moment_matrix(("phd-y",))
        return weighted_eigen(mm, WeightMatrix.identity(mm.m), cfg.r).basis, None
    if method == "phd-residual":
        mm = ctx.moment_matrix(("phd-r",))
        return weighted_eigen(mm, WeightMatrix.identity(mm.m), cfg.r).basis, None
    shape = "diagonal" if method == "gmm-diagonal" else "full"
    mm = ctx.moment_matrix(ctx.components)
    if cfg.name == "dimest":
        est, _, weight = two_step_gmm(mm, "auto", cfg.delta, shape)
        rank_est = estimate_rank(mm, weight, mm.n_samples, eta_quantile=cfg.eta_quantile)
        basis = weighted_eigen(mm, weight, cfg.r).basis
        return basis, rank_est
    est, _, _ = two_step_gmm(mm, cfg.r, cfg.delta, shape)
    return est.basis, None


def _grid_points(cfg: ExperimentConfig) -> list[dict]:
    if not cfg.sweep:
        return [{}]
    keys = sorted(cfg.sweep)
    return [dict(zip(keys, values)) for values in itertools.product(*(cfg.sweep[k] for k in keys))]


def _grid_label(overrides: dict) -> str:
    if not overrides:
        return "-"
    return ";".join(f"{k}={overrides[k]}" for k in sorted(overrides))


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every (grid point, replicate, method) cell of the configured study.

    Model parameters (factor loading, mixture coefficients) are drawn once per
    experiment and held fixed across replicates and grid points of the same
    shape; a new master seed re-draws them.  Data are generated once per
    (grid point, replicate) from the substream ``derive_seed(seed, grid_index,
    replicate)`` and shared by all methods of that replicate (paired
    comparisons).  Output is deterministic for a fixed master seed.
    """
    cfg = resolve_config(config)
    grid = _grid_points(cfg)
    rows: list[ResultRow] = []
    for gi, overrides in enumerate(grid):
        # Re-resolve from the unresolved config so derived defaults (e.g. the
        # dimension-study sample size) track swept parameters.
        point = resolve_config(replace(config, sweep=None, **overrides))
        label = _grid_label(overrides)
        params = _experiment_params(point, cfg.seed)
        for rep in range(cfg.replicates):
            seed_rep = derive_seed(cfg.seed, gi, rep)
            dataset, truth = _generate(point, seed_rep, params)
            ctx = _ReplicateContext(point, dataset, truth)
            for method in cfg.methods:
                start = time.perf_counter()
                basis, rank_est = _run_method(ctx, method)
                elapsed = time.perf_counter() - start
                metrics = subspace_metrics(basis, truth.basis)
                spec = float(np.max(metrics.sin_theta)) if metrics.sin_theta.size else 0.0
                rows.append(
                    ResultRow(
                        grid_index=gi,
                        grid=label,
                        method=method,
                        replicate=rep,
                        dist_fro=metrics.distance,
                        dist_fro_sq=metrics.distance**2,
                        dist_spec=spec,
                        dist_spec_sq=spec**2,
                        rank_threshold=None if rank_est is None else rank_est.rank_threshold,
                        rank_chi2=None if rank_est is None else rank_est.rank_chi2,
                        runtime_s=elapsed,
                    )
                )
    summary = _summarize(rows)
    return ExperimentResult(cfg, tuple(grid), tuple(rows), tuple(summary))


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(values))
    if values.size < 2:
        return mean, 0.0
    return mean, float(np.std(values, ddof=1) / math.sqrt(values.size))


def _summarize(rows: list[ResultRow]) -> list[MethodSummary]:
    keys: list[tuple[int, str]] = []
    for row in rows:
        key = (row.grid_index, row.method)
        if key not in keys:
            keys.append(key)
    out = []
    for gi, method in keys:
        group = [r for r in rows if r.grid_index == gi and r.method == method]
        stats = {}
        for metric in ("dist_fro", "dist_fro_sq", "dist_spec", "dist_spec_sq"):
            mean, se = _mean_se(np.array([getattr(r, metric) for r in group]))
            stats[f"mean_{metric}"] = mean
            stats[f"se_{metric}"] = se
        out.append(
            MethodSummary(
                grid_index=gi, grid=group[0].grid, method=method, replicates=len(group), **stats
            )
        )
    return out


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def _row_cells(row: ResultRow) -> list[str]:
    return [
        str(row.grid_index),
        row.grid,
        row.method,
        str(row.replicate),
        f"{row.dist_fro:.17g}",
        f"{row.dist_fro_sq:.17g}",
        f"{row.dist_spec:.17g}",
        f"{row.dist_spec_sq:.17g}",
        "" if row.rank_threshold is None else str(row.rank_threshold),
        "" if row.rank_chi2 is None else str(row.rank_chi2),
    ]


def emit(result: ExperimentResult, format: str, path) -> Path:
    """Write the result tables.

    ``csv`` writes the per-replicate rows to ``path`` and the aggregates to a
    sibling ``<stem>.summary.csv``; ``json`` writes one document validating
    against the shipped ``result.schema.json``.  Runtime is not emitted (see
    module docstring).  Returns the primary path.
    """
    path = Path(path)
    if format == "csv":
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(ROW_COLUMNS) + "\n")
            for row in result.rows:
                fh.write(",".join(_row_cells(row)) + "\n")
        summary_path = path.with_name(path.stem + ".summary.csv")
        with open(summary_path, "w", newline="\n") as fh:
            fh.write(",".join(SUMMARY_COLUMNS) + "\n")
            for s in result.summary:
                cells = [str(s.grid_index), s.grid, s.method, str(s.replicates)] + [
                    f"{getattr(s, c):.17g}" for c in SUMMARY_COLUMNS[4:]
                ]
                fh.write(",".join(cells) + "\n")
        return path
    if format == "json":
        doc = result_to_json(result)
        with open(path, "w", newline="\n") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path
    raise ValueError(f"unknown emit format {format!r}")


def result_to_json(result: ExperimentResult) -> dict:
    cfg = result.config
    config_doc = {
        "replicates": cfg.replicates,
        "delta": cfg.delta,
        "eta_quantile": cfg.eta_quantile,
        "n": cfg.n,
        "p": cfg.p,
        "r": cfg.r,
        "K": cfg.K,
        "mu": cfg.mu,
        "sigma": cfg.sigma,
        "beta_radius": cfg.beta_radius,
        "variant": cfg.variant,
        "methods": list(cfg.methods),
        "sweep": cfg.sweep,
    }
    rows = []
    for r in result.rows:
        rows.append(
            {
                "grid_index": r.grid_index,
                "grid": r.grid,
                "method": r.method,
                "replicate": r.replicate,
                "dist_fro": r.dist_fro,
                "dist_fro_sq": r.dist_fro_sq,
                "dist_spec": r.dist_spec,
                "dist_spec_sq": r.dist_spec_sq,
                "rank_threshold": r.rank_threshold,
                "rank_chi2": r.rank_chi2,
            }
        )
    summary = []
    for s in result.summary:
        entry = {"grid_index": s.grid_index, "grid": s.grid, "method": s.method, "replicates": s.replicates}
        for c in SUMMARY_COLUMNS[4:]:
            entry[c] = getattr(s, c)
        summary.append(entry)
    return {
        "version": 1,
        "name": cfg.name,
        "seed": cfg.seed,
        "config": config_doc,
        "grid": list(result.grid),
        "rows": rows,
        "summary": summary,
    }


def load_result_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_summary_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for record in csv.DictReader(fh):
            entry: dict = {}
            for key, value in record.items():
                if key in ("grid", "method"):
                    entry[key] = value
                elif key in ("grid_index", "replicates"):
                    entry[key] = int(value)
                else:
                    entry[key] = float(value)
            out.append(entry)
    return out


# ---------------------------------------------------------------------------
# Bootstrap and regression-fit evaluation
# ---------------------------------------------------------------------------

def bootstrap(
    dataset: Dataset,
    mset: MomentFunctionSet,
    method: str = "gmm-full",
    B: int = 100,
    seed: int = 0,
    r: int | None = None,
    delta: float = 0.01,
    truth: GroundTruth | None = None,
    identity_resample: bool = False,
) -> list[dict]:
    """Nonparametric bootstrap of a subspace method.

    Draws ``B`` row resamples (with replacement, size n), reruns the method on
    each, and returns per-resample error metrics against ``truth`` if given,
    otherwise against the full-data estimate.  ``identity_resample`` replaces
    every resample by the original row order (degenerate option for checks).
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    if method not in ("gmm-full", "gmm-diagonal", "unweighted"):
        raise ConfigError(f"unknown bootstrap method {method!r}")
    if r is None:
        if truth is None:
            raise ValueError("r is required when no ground truth is given")
        r = truth.r

    def run(ds: Dataset) -> np.ndarray:
        mm = materialize(ds, mset)
        if method == "unweighted":
            return weighted_eigen(mm, WeightMatrix.identity(mm.m), r).basis
        est, _, _ = two_step_gmm(mm, r, delta, "diagonal" if method == "gmm-diagonal" else "full")
        return est.basis

    reference = truth.basis if truth is not None else run(dataset)
    rows = []
    for b in range(B):
        if identity_resample:
            idx = np.arange(dataset.n)
        else:
            idx = substream(seed, "bootstrap", b).integers(0, dataset.n, size=dataset.n)
        ds_b = Dataset(dataset.x[idx], dataset.y[idx] if dataset.has_response else None)
        basis = run(ds_b)
        metrics = subspace_metrics(basis, reference)
        spec = float(np.max(metrics.sin_theta)) if metrics.sin_theta.size else 0.0
        rows.append(
            {
                "resample": b,
                "dist_fro": metrics.distance,
                "dist_fro_sq": metrics.distance**2,
                "dist_spec": spec,
                "dist_spec_sq": spec**2,
            }
        )
    return rows


def evaluate_projection_r2(dataset: Dataset, directions: np.ndarray, degree: int = 2) -> float:
    """Coefficient of determination of a polynomial fit on projected covariates.

    Projects the covariates onto ``directions`` (p-by-k), regresses the
    response on the projections with an intercept, and for ``degree=2`` adds
    squares and pairwise cross products of the projections.
    """
    if not dataset.has_response:
        raise ValueError("R-squared evaluation needs a response")
    directions = np.asarray(directions, dtype=np.float64)
    if directions.ndim == 1:
        directions = directions[:, None]
    if directions.shape[0] != dataset.p_x:
        raise ValueError(f"directions must have {dataset.p_x} rows")
    if degree not in (1, 2):
        raise ValueError("degree must be 1 or 2")
    z = dataset.x @ directions
    k = z.shape[1]
    columns = [np.ones(dataset.n), *(z[:, i] for i in range(k))]
    if degree == 2:
        for i in range(k):
            for j in range(i, k):
                columns.append(z[:, i] * z[:, j])
    design = np.column_stack(columns)
    if dataset.n <= design.shape[1]:
        raise ValueError(f"need n > {design.shape[1]} regression terms, got n={dataset.n}")
    coef, _, rank, _ = np.linalg.lstsq(design, dataset.y, rcond=None)
    if rank < design.shape[1]:
        raise ValueError("rank-deficient regression design")
    resid = dataset.y - design @ coef
    total = dataset.y - np.mean(dataset.y)
    tss = float(total @ total)
    if tss == 0:
        raise ValueError("constant response; R-squared undefined")
    return 1.0 - float(resid @ resid) / tss


def whiten(dataset: Dataset) -> tuple[Dataset, np.ndarray]:
    """Linearly transform so the covariates have identity sample covariance.

    Centers the covariates and applies the symmetric inverse square root of
    their sample covariance (denominator n - 1).  Returns the transformed
    dataset and the transform matrix.
    """
    if dataset.n < 2:
        raise ValueError("whitening needs at least two samples")
    centered = dataset.x - dataset.x.mean(axis=0)
    cov = centered.T @ centered / (dataset.n - 1)
    evals, evecs = eigh_descending(cov)
    if evals[-1] <= 1e-12 * max(evals[0], 1e-300):
        raise ValueError("sample covariance is numerically singular; cannot whiten")
    inv_half = (evecs / np.sqrt(evals)) @ evecs.T
    return Dataset(centered @ inv_half, dataset.y), inv_half


# ---------------------------------------------------------------------------
# Moment-set builder for CLI configs
# ---------------------------------------------------------------------------

def build_moment_sets(doc: dict, p: int, y: np.ndarray | None = None) -> MomentFunctionSet:
    """Build a moment set from a builder config: ``{"version": 1, "sets":
    [{"kind": ...}, ...]}``.

    Kinds: ``factor`` (params ``sigma``), ``mixture`` (``variant`` in
    y-first|y-second|y2-second), ``cosine`` (``order``, ``scales``),
    ``cosine-bank`` (``count``, ``quantile``; resolved from the response),
    ``sign-robust``, ``phd`` (``residualize``).
    """
    if doc.get("version") != 1:
        raise ConfigError(f"unsupported moment config version {doc.get('version')!r}")
    sets = []
    for entry in doc.get("sets", []):
        kind = entry.get("kind")
        if kind == "factor":
            sets.append(factor_moments(p, float(entry.get("sigma", 0.0))))
        elif kind == "mixture":
            sets.append(mixture_moments(p, entry["variant"]))
        elif kind == "cosine":
            sets.append(cosine_moments(p, entry.get("order", "first"), [tuple(s) for s in entry["scales"]]))
        elif kind == "cosine-bank":
            if y is None:
                raise ConfigError("cosine-bank needs a response to resolve its scale")
            scales = cosine_bank_scales(y, int(entry.get("count", 4)), float(entry.get("quantile", 0.8)))
            sets.append(cosine_moments(p, entry.get("order", "first"), scales))
        elif kind == "sign-robust":
            sets.append(sign_robust_moments(p))
        elif kind == "phd":
            sets.append(phd_moments(p, bool(entry.get("residualize", False))))
        else:
            raise ConfigError(f"unknown moment kind {kind!r}")
    if not sets:
        raise ConfigError("moment config declares no sets")
    return concat(sets)
