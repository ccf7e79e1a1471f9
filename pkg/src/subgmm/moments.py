"""Moment-function construction and materialization.

A :class:`MomentFunctionSet` is an ordered list of descriptors, each mapping a
sample ``(x, y)`` to a vector in R^p whose expectation lies in the target
subspace.  :func:`materialize` averages them over a dataset into the p-by-m
matrix of moment columns and keeps an evaluator handle able to re-stream the
per-sample evaluations (needed by the covariance step of the estimator).

Descriptors evaluate block-wise and in a fixed block order, so cached and
streaming storage produce identical numbers, and materializing a sub-list of
descriptors reproduces exactly the corresponding columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .models import Dataset

__all__ = [
    "MomentDescriptor",
    "MomentFunctionSet",
    "MomentMatrix",
    "MomentEvaluator",
    "MomentEvaluationError",
    "DegenerateMomentError",
    "factor_moments",
    "mixture_moments",
    "cosine_moments",
    "sign_robust_moments",
    "phd_moments",
    "custom_moments",
    "concat",
    "materialize",
]

# Rows per evaluation block; fixed so summation order never depends on the
# storage mode.
BLOCK_ROWS = 8192

# Cached storage is the default while the full evaluation stack stays under
# this many float64 entries.
CACHE_ENTRY_LIMIT = 2**24


class MomentEvaluationError(RuntimeError):
    """A descriptor produced a non-finite value; names sample and descriptor."""


class DegenerateMomentError(RuntimeError):
    """A data-dependent moment construction collapsed (e.g. all signs cancel)."""


def _axis_vector(p: int, axis) -> np.ndarray | int:
    """Normalize an axis spec: int column index or a length-p direction."""
    if isinstance(axis, (int, np.integer)):
        j = int(axis)
        if not 0 <= j < p:
            raise ValueError(f"column index {j} out of range for p={p}")
        return j
    a = np.asarray(axis, dtype=np.float64).reshape(-1)
    if a.shape != (p,):
        raise ValueError(f"direction must have length {p}")
    return a


def _second_term(x: np.ndarray, axis) -> tuple[np.ndarray, np.ndarray]:
    """Return (x (x^T a), a) for a block of rows."""
    if isinstance(axis, (int, np.integer)):
        t = x[:, axis]
        a = np.zeros(x.shape[1])
        a[axis] = 1.0
    else:
        t = x @ axis
        a = axis
    return x * t[:, None], a


class MomentDescriptor:
    """One moment function f(x, y) -> R^p, evaluated block-wise."""

    tag = "abstract"
    needs_response = False

    def state_key(self):
        """Descriptors returning equal keys share one prepared state."""
        return None

    def prepare(self, x: np.ndarray, y: np.ndarray | None):
        """Compute dataset-level state (full pass) before evaluation."""
        return None

    def evaluate(self, x: np.ndarray, y: np.ndarray | None, state) -> np.ndarray:
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError

    def label(self) -> str:
        return self.tag


class RawMean(MomentDescriptor):
    """f = x."""

    tag = "first-moment"

    def evaluate(self, x, y, state):
        return x

    def spec(self):
        return {"tag": self.tag}


class ResponseMean(MomentDescriptor):
    """f = y^power * x."""

    tag = "y-first"
    needs_response = True

    def __init__(self, power: int = 1):
        self.power = int(power)

    def evaluate(self, x, y, state):
        w = y if self.power == 1 else y**self.power
        return x * w[:, None]

    def spec(self):
        return {"tag": self.tag, "power": self.power}

    def label(self):
        return f"y^{self.power}-first" if self.power != 1 else self.tag


class CosineMean(MomentDescriptor):
    """f = cos(y / t + gamma) * x."""

    tag = "cosine-first"
    needs_response = True

    def __init__(self, t: float, gamma: float):
        if t <= 0:
            raise ValueError("cosine scale t must be > 0")
        self.t = float(t)
        self.gamma = float(gamma)

    def evaluate(self, x, y, state):
        return x * np.cos(y / self.t + self.gamma)[:, None]

    def spec(self):
        return {"tag": self.tag, "t": self.t, "gamma": self.gamma}

    def label(self):
        return f"cosine-first(t={self.t:g}, gamma={self.gamma:g})"


class PlainSecond(MomentDescriptor):
    """f = x (x^T a) - offset * a, with a = e_j or a given direction."""

    tag = "second-moment"

    def __init__(self, axis, offset: float = 0.0, p: int | None = None):
        self.axis = _axis_vector(p, axis) if p is not None else axis
        self.offset = float(offset)

    def evaluate(self, x, y, state):
        term, a = _second_term(x, self.axis)
        return term - self.offset * a

    def spec(self):
        return {"tag": self.tag, "offset": self.offset, **_axis_spec(self.axis)}

    def label(self):
        return f"second-moment({_axis_label(self.axis)})"


class ResponseSecond(MomentDescriptor):
    """f = y^power (x (x^T a) - a)."""

    tag = "y-second"
    needs_response = True

    def __init__(self, axis, power: int = 1, p: int | None = None):
        self.axis = _axis_vector(p, axis) if p is not None else axis
        self.power = int(power)

    def evaluate(self, x, y, state):
        term, a = _second_term(x, self.axis)
        w = y if self.power == 1 else y**self.power
        return (term - a) * w[:, None]

    def spec(self):
        return {"tag": self.tag, "power": self.power, **_axis_spec(self.axis)}

    def label(self):
        return f"y^{self.power}-second({_axis_label(self.axis)})"


class CosineSecond(MomentDescriptor):
    """f = cos(y / t + gamma) (x (x^T a) - a)."""

    tag = "cosine-second"
    needs_response = True

    def __init__(self, axis, t: float, gamma: float, p: int | None = None):
        if t <= 0:
            raise ValueError("cosine scale t must be > 0")
        self.axis = _axis_vector(p, axis) if p is not None else axis
        self.t = float(t)
        self.gamma = float(gamma)

    def evaluate(self, x, y, state):
        term, a = _second_term(x, self.axis)
        return (term - a) * np.cos(y / self.t + self.gamma)[:, None]

    def spec(self):
        return {"tag": self.tag, "t": self.t, "gamma": self.gamma, **_axis_spec(self.axis)}


class SignRobustSecond(MomentDescriptor):
    """f = sign(y) sign(x^T v1) (x (x^T a) - a), with v1 = mean(sign(y) x)
    computed on the dataset at materialization time."""

    tag = "sign-robust-second"
    needs_response = True

    def __init__(self, axis, p: int | None = None):
        self.axis = _axis_vector(p, axis) if p is not None else axis

    def state_key(self):
        return ("sign-robust",)

    def prepare(self, x, y):
        v1 = (x * np.sign(y)[:, None]).mean(axis=0)
        if not np.any(v1):
            raise DegenerateMomentError("sign-robust moments: mean of sign(y) * x is the zero vector")
        return v1

    def evaluate(self, x, y, state):
        term, a = _second_term(x, self.axis)
        w = np.sign(y) * np.sign(x @ state)
        return (term - a) * w[:, None]

    def spec(self):
        return {"tag": self.tag, **_axis_spec(self.axis)}


class ResidualSecond(MomentDescriptor):
    """f = rhat (x (x^T a) - a), with rhat the residual of an intercepted
    least-squares fit of y on x, fit on the dataset at materialization time."""

    tag = "residual-second"
    needs_response = True

    def __init__(self, axis, p: int | None = None):
        self.axis = _axis_vector(p, axis) if p is not None else axis

    def state_key(self):
        return ("ols-residual",)

    def prepare(self, x, y):
        design = np.column_stack([np.ones(x.shape[0]), x])
        coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
        if rank < design.shape[1]:
            raise ValueError("rank-deficient design matrix in the residualizing least-squares fit")
        return coef

    def evaluate(self, x, y, state):
        term, a = _second_term(x, self.axis)
        resid = y - state[0] - x @ state[1:]
        return (term - a) * resid[:, None]

    def spec(self):
        return {"tag": self.tag, **_axis_spec(self.axis)}


class CustomMoment(MomentDescriptor):
    """User-supplied block evaluation rule ``fn(x, y) -> (n, p)``.

    The rule must be pure (no state across samples); set ``pure=False`` to
    force cached storage when it is not.
    """

    tag = "custom"

    def __init__(self, fn: Callable, name: str = "custom", needs_response: bool = False, pure: bool = True):
        self.fn = fn
        self.name = name
        self.needs_response = bool(needs_response)
        self.pure = bool(pure)

    def evaluate(self, x, y, state):
        return np.asarray(self.fn(x, y), dtype=np.float64)

    def spec(self):
        raise ValueError(f"custom descriptor {self.name!r} is not serializable")

    def label(self):
        return f"custom({self.name})"


def _axis_spec(axis) -> dict:
    if isinstance(axis, (int, np.integer)):
        return {"column": int(axis)}
    return {"direction": [float(v) for v in axis]}


def _axis_label(axis) -> str:
    if isinstance(axis, (int, np.integer)):
        return f"col {int(axis)}"
    return "direction"


@dataclass(frozen=True)
class MomentFunctionSet:
    """Ordered, immutable collection of moment descriptors with output
    dimension ``p``.

    ``input_dim`` is the covariate dimension the descriptors expect; for all
    built-ins it equals ``p``, while custom rules may map from a different
    covariate dimension (``None`` skips the check).
    """

    descriptors: tuple
    p: int
    input_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "descriptors", tuple(self.descriptors))
        if self.m < 1:
            raise ValueError("a moment set needs at least one descriptor")

    @property
    def m(self) -> int:
        return len(self.descriptors)

    @property
    def needs_response(self) -> bool:
        return any(d.needs_response for d in self.descriptors)

    def subset(self, indices: Sequence[int]) -> "MomentFunctionSet":
        return MomentFunctionSet(tuple(self.descriptors[i] for i in indices), self.p, self.input_dim)

    def __add__(self, other: "MomentFunctionSet") -> "MomentFunctionSet":
        return concat([self, other])

    def to_config(self) -> dict:
        """JSON document (tag + parameters per descriptor); see the moment-set
        schema shipped under ``subgmm/schemas``."""
        return {"version": 1, "p": self.p, "descriptors": [d.spec() for d in self.descriptors]}

    @classmethod
    def from_config(cls, config: dict) -> "MomentFunctionSet":
        if config.get("version") != 1:
            raise ValueError(f"unsupported moment-set config version {config.get('version')!r}")
        p = int(config["p"])
        descriptors = []
        for spec in config["descriptors"]:
            descriptors.append(_descriptor_from_spec(spec, p))
        return cls(tuple(descriptors), p, input_dim=p)


def _spec_axis(spec: dict, p: int):
    if "column" in spec:
        return _axis_vector(p, int(spec["column"]))
    return _axis_vector(p, spec["direction"])


def _descriptor_from_spec(spec: dict, p: int) -> MomentDescriptor:
    tag = spec["tag"]
    if tag == "first-moment":
        return RawMean()
    if tag == "y-first":
        return ResponseMean(power=int(spec.get("power", 1)))
    if tag == "cosine-first":
        return CosineMean(spec["t"], spec["gamma"])
    if tag == "second-moment":
        return PlainSecond(_spec_axis(spec, p), offset=float(spec.get("offset", 0.0)))
    if tag == "y-second":
        return ResponseSecond(_spec_axis(spec, p), power=int(spec.get("power", 1)))
    if tag == "cosine-second":
        return CosineSecond(_spec_axis(spec, p), spec["t"], spec["gamma"])
    if tag == "sign-robust-second":
        return SignRobustSecond(_spec_axis(spec, p))
    if tag == "residual-second":
        return ResidualSecond(_spec_axis(spec, p))
    raise ValueError(f"unknown moment descriptor tag {tag!r}")


# ---------------------------------------------------------------------------
# Built-in constructors
# ---------------------------------------------------------------------------

def factor_moments(p: int, sigma: float) -> MomentFunctionSet:
    """First moment plus noise-corrected second-moment columns for a factor
    model with known noise scale ``sigma``: m = p + 1 descriptors
    ``mean(x)`` and ``mean(x (x^T e_j) - sigma^2 e_j)``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    descriptors = [RawMean()] + [PlainSecond(j, offset=sigma**2, p=p) for j in range(p)]
    return MomentFunctionSet(tuple(descriptors), p, input_dim=p)


def mixture_moments(p: int, kind: str, basis: np.ndarray | None = None) -> MomentFunctionSet:
    """Response-weighted moments for mixture-type models.

    ``kind``: ``'y-first'`` gives the single descriptor mean(y x);
    ``'y-second'`` / ``'y2-second'`` give p descriptors
    mean(y^k (x x^T e_j - e_j)) for k = 1, 2.  A p-by-p invertible ``basis``
    replaces the standard basis vectors e_j by its columns.
    """
    axes: list = list(range(p))
    if basis is not None:
        basis = np.asarray(basis, dtype=np.float64)
        if basis.shape != (p, p):
            raise ValueError(f"basis must be {p}x{p}")
        s = np.linalg.svd(basis, compute_uv=False)
        if s[-1] == 0 or s[0] / s[-1] > 1e12:
            raise ValueError("basis is numerically singular (condition estimate > 1e12)")
        axes = [basis[:, j].copy() for j in range(p)]
    if kind == "y-first":
        return MomentFunctionSet((ResponseMean(power=1),), p, input_dim=p)
    if kind == "y-second":
        return MomentFunctionSet(tuple(ResponseSecond(a, power=1, p=p) for a in axes), p, input_dim=p)
    if kind == "y2-second":
        return MomentFunctionSet(tuple(ResponseSecond(a, power=2, p=p) for a in axes), p, input_dim=p)
    raise ValueError(f"unknown mixture moment kind {kind!r}")


def cosine_moments(p: int, order: str, scales: Sequence[tuple[float, float]]) -> MomentFunctionSet:
    """Cosine-transformed moments with h(y) = cos(y / t + gamma) per scale
    pair; ``order='first'`` gives h(y) x, ``order='second'`` gives
    h(y)(x x^T e_j - e_j) over all (scale, j)."""
    scales = [(float(t), float(g)) for t, g in scales]
    if not scales:
        raise ValueError("at least one (t, gamma) scale pair is required")
    if any(t <= 0 for t, _ in scales):
        raise ValueError("every cosine scale t must be > 0")
    if order == "first":
        return MomentFunctionSet(tuple(CosineMean(t, g) for t, g in scales), p, input_dim=p)
    if order == "second":
        descriptors = tuple(CosineSecond(j, t, g, p=p) for t, g in scales for j in range(p))
        return MomentFunctionSet(descriptors, p, input_dim=p)
    raise ValueError(f"unknown cosine moment order {order!r}")


def sign_robust_moments(p: int) -> MomentFunctionSet:
    """Sign-robustified second moments: the response is replaced by
    sign(y) sign(x^T v1) with v1 = mean(sign(y) x) recomputed per dataset."""
    return MomentFunctionSet(tuple(SignRobustSecond(j, p=p) for j in range(p)), p, input_dim=p)


def phd_moments(p: int, residualize: bool) -> MomentFunctionSet:
    """Hessian-direction moments mean(w (x x^T e_j - e_j)) with w = y, or the
    least-squares residual of y on x when ``residualize`` is set."""
    if residualize:
        return MomentFunctionSet(tuple(ResidualSecond(j, p=p) for j in range(p)), p, input_dim=p)
    return MomentFunctionSet(tuple(ResponseSecond(j, power=1, p=p) for j in range(p)), p, input_dim=p)


def custom_moments(
    p: int,
    fns: Sequence[Callable],
    needs_response: bool = False,
    names: Sequence[str] | None = None,
    pure: bool = True,
    input_dim: int | None = None,
) -> MomentFunctionSet:
    """Wrap user block-evaluation rules ``fn(x, y) -> (n, p)`` as descriptors.

    ``input_dim`` restricts the covariate dimension the rules accept; leave
    ``None`` when they work for any (the output dimension ``p`` is still
    checked at evaluation time).
    """
    names = list(names) if names is not None else [f"f{k}" for k in range(len(fns))]
    descriptors = tuple(
        CustomMoment(fn, name=name, needs_response=needs_response, pure=pure) for fn, name in zip(fns, names)
    )
    return MomentFunctionSet(descriptors, p, input_dim=input_dim)


def concat(sets: Sequence[MomentFunctionSet]) -> MomentFunctionSet:
    """Concatenate descriptor lists in order; all sets must share p."""
    sets = list(sets)
    if not sets:
        raise ValueError("concat needs at least one moment set")
    p = sets[0].p
    input_dim = None
    for s in sets:
        if s.p != p:
            raise ValueError(f"output dimension mismatch in concat: {s.p} != {p}")
        if s.input_dim is not None:
            if input_dim is not None and s.input_dim != input_dim:
                raise ValueError(f"input dimension mismatch in concat: {s.input_dim} != {input_dim}")
            input_dim = s.input_dim
    descriptors = tuple(d for s in sets for d in s.descriptors)
    return MomentFunctionSet(descriptors, p, input_dim=input_dim)


# ---------------------------------------------------------------------------
# Materialization
# ---------------------------------------------------------------------------

class MomentEvaluator:
    """Handle able to re-stream per-sample evaluation stacks F_i in fixed
    blocks; backed either by a cached (n, p, m) array or by re-evaluation."""

    def __init__(self, dataset: Dataset, descriptors: tuple, states: list, stack: np.ndarray | None, p: int):
        self._dataset = dataset
        self._descriptors = descriptors
        self._states = states
        self._stack = stack
        self._p = p

    @property
    def n(self) -> int:
        return self._dataset.n

    @property
    def p(self) -> int:
        return self._p

    @property
    def m(self) -> int:
        return len(self._descriptors)

    @property
    def mode(self) -> str:
        return "cached" if self._stack is not None else "streaming"

    @property
    def states(self) -> list:
        """Per-descriptor prepared states (e.g. the sign-robust pilot vector)."""
        return list(self._states)

    def iter_blocks(self) -> Iterator[tuple[int, np.ndarray]]:
        """Yield (start_row, F_block) with F_block of shape (nb, p, m)."""
        n = self.n
        for start in range(0, n, BLOCK_ROWS):
            stop = min(start + BLOCK_ROWS, n)
            if self._stack is not None:
                yield start, self._stack[start:stop]
            else:
                x = self._dataset.x[start:stop]
                y = self._dataset.y[start:stop] if self._dataset.y is not None else None
                block = np.empty((stop - start, self.p, self.m))
                for k, (d, st) in enumerate(zip(self._descriptors, self._states)):
                    block[:, :, k] = d.evaluate(x, y, st)
                yield start, block


@dataclass(frozen=True)
class MomentMatrix:
    """Sample-averaged moment columns (p by m) plus the evaluator handle."""

    values: np.ndarray
    n_samples: int
    evaluator: MomentEvaluator

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]


def _bind(dataset: Dataset, mset: MomentFunctionSet) -> list:
    """Run dataset-level preparation, sharing state across descriptors that
    declare the same state key."""
    shared: dict = {}
    states = []
    for d in mset.descriptors:
        key = d.state_key()
        if key is not None and key in shared:
            states.append(shared[key])
            continue
        st = d.prepare(dataset.x, dataset.y)
        if key is not None:
            shared[key] = st
        states.append(st)
    return states


def materialize(dataset: Dataset, mset: MomentFunctionSet, storage: str = "auto") -> MomentMatrix:
    """Average every descriptor over the dataset.

    Parameters
    ----------
    dataset : Dataset
    mset : MomentFunctionSet
        Output dimension must match ``dataset.p_x``; descriptors that need a
        response require ``dataset.y``.
    storage : {'auto', 'cached', 'streaming'}
        ``cached`` keeps the full (n, p, m) evaluation stack; ``streaming``
        keeps only the averages and re-evaluates on demand.  ``auto`` caches
        while n*p*m stays under ``CACHE_ENTRY_LIMIT``.  Both modes produce
        identical downstream results.

    Raises
    ------
    MomentEvaluationError
        If any evaluation is non-finite (names the sample and descriptor).
    """
    if mset.input_dim is not None and mset.input_dim != dataset.p_x:
        raise ValueError(f"moment set expects covariate dimension {mset.input_dim} but dataset has p_x={dataset.p_x}")
    if mset.needs_response and not dataset.has_response:
        raise ValueError("moment set needs a response but the dataset has none")
    if storage not in ("auto", "cached", "streaming"):
        raise ValueError(f"unknown storage mode {storage!r}")
    if storage == "auto":
        storage = "cached" if dataset.n * dataset.p_x * mset.m <= CACHE_ENTRY_LIMIT else "streaming"
    if storage == "streaming" and any(isinstance(d, CustomMoment) and not d.pure for d in mset.descriptors):
        storage = "cached"  # impure rules cannot be re-evaluated consistently

    states = _bind(dataset, mset)
    n, p, m = dataset.n, mset.p, mset.m
    stack = np.empty((n, p, m)) if storage == "cached" else None
    totals = np.zeros((p, m))
    for start in range(0, n, BLOCK_ROWS):
        stop = min(start + BLOCK_ROWS, n)
        x = dataset.x[start:stop]
        y = dataset.y[start:stop] if dataset.y is not None else None
        for k, (d, st) in enumerate(zip(mset.descriptors, states)):
            f = d.evaluate(x, y, st)
            if f.shape != (stop - start, p):
                raise ValueError(f"descriptor {d.label()} returned shape {f.shape}, expected {(stop - start, p)}")
            if not np.isfinite(f).all():
                bad = np.argwhere(~np.isfinite(f))[0]
                raise MomentEvaluationError(
                    f"non-finite evaluation at sample {start + int(bad[0])} in descriptor {d.label()}"
                )
            totals[:, k] += f.sum(axis=0)
            if stack is not None:
                stack[start:stop, :, k] = f
    values = totals / n
    evaluator = MomentEvaluator(dataset, mset.descriptors, states, stack, p)
    return MomentMatrix(values, n, evaluator)
