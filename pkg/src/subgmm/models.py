"""Synthetic data generators and CSV dataset ingestion.

Each generator is a pure function of its parameters and a seed: model
parameters (loading matrix, regression coefficients) are drawn from the
``"params"`` substream of the seed and the observations from the ``"data"``
substream, so a fixed seed reproduces the dataset bit for bit.  Model
parameters are held fixed for all ``n`` samples of one call and re-drawn
whenever the seed changes.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream

__all__ = [
    "Dataset",
    "draw_sphere_coefficients",
    "GroundTruth",
    "CsvParseError",
    "gen_factor",
    "gen_mixed_linear",
    "gen_mixed_logistic",
    "gen_index_model",
    "index_model_mean",
    "load_csv",
    "write_csv",
]

logger = logging.getLogger(__name__)

# Smallest-to-largest singular value ratio below which a coefficient draw is
# considered collinear and re-drawn.
_COLLINEAR_RTOL = 1e-8


class CsvParseError(ValueError):
    """CSV ingestion failure, carrying the offending location in the message."""


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Dataset:
    """Immutable sample matrix with an optional scalar response.

    Attributes
    ----------
    x : ndarray, shape (n, p_x)
        Covariate rows.
    y : ndarray, shape (n,), optional
        Responses; ``None`` for unsupervised data.
    """

    x: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        x = _freeze(np.atleast_2d(self.x))
        if x.shape[0] < 1:
            raise ValueError("empty dataset: n must be >= 1")
        if not np.isfinite(x).all():
            raise ValueError("dataset contains non-finite covariate entries")
        object.__setattr__(self, "x", x)
        if self.y is not None:
            y = _freeze(np.asarray(self.y).reshape(-1))
            if y.shape[0] != x.shape[0]:
                raise ValueError(f"response length {y.shape[0]} != sample count {x.shape[0]}")
            if not np.isfinite(y).all():
                raise ValueError("dataset contains non-finite responses")
            object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p_x(self) -> int:
        return self.x.shape[1]

    @property
    def has_response(self) -> bool:
        return self.y is not None


@dataclass(frozen=True)
class GroundTruth:
    """Orthonormal basis of the true subspace, for error measurement."""

    basis: np.ndarray
    r: int = field(default=0)

    def __post_init__(self):
        basis = _freeze(np.atleast_2d(self.basis))
        object.__setattr__(self, "basis", basis)
        r = basis.shape[1]
        object.__setattr__(self, "r", r)
        gram = basis.T @ basis
        if np.max(np.abs(gram - np.eye(r))) > 1e-10:
            raise ValueError("ground-truth basis columns are not orthonormal")


def _canonical_sign(u: np.ndarray) -> np.ndarray:
    """Flip column signs so the largest-magnitude entry of each is positive."""
    u = u.copy()
    for j in range(u.shape[1]):
        k = int(np.argmax(np.abs(u[:, j])))
        if u[k, j] < 0:
            u[:, j] = -u[:, j]
    return u


def _span_basis(columns: np.ndarray, r: int) -> np.ndarray:
    """Orthonormal basis of the column span: thin SVD, descending singular
    values, canonical signs."""
    u, s, _ = np.linalg.svd(columns, full_matrices=False)
    return _canonical_sign(u[:, :r])


def gen_factor(
    n: int,
    p: int,
    r: int,
    mu_z,
    sigma: float,
    seed: int,
    loading: np.ndarray | None = None,
) -> tuple[Dataset, GroundTruth]:
    """Sample a linear factor model: each row is loading @ factors + noise.

    The p-by-r loading matrix has i.i.d. standard normal entries, drawn once
    per call; factors are N(mu_z, I_r) and the noise is N(0, sigma^2 I_p).

    Parameters
    ----------
    n, p, r : int
        Sample count, ambient dimension, factor count (r < p).
    mu_z : float or array-like, shape (r,)
        Factor mean.
    sigma : float
        Noise standard deviation, >= 0.
    seed : int
        Master seed; see module docstring for the substream layout.
    loading : ndarray, shape (p, r), optional
        Use this loading matrix instead of drawing one.

    Returns
    -------
    (Dataset, GroundTruth)
        The ground-truth basis holds the left singular vectors of the loading
        matrix.  No response is attached.
    """
    if n < 1:
        raise ValueError("empty dataset: n must be >= 1")
    if not 1 <= r < p:
        raise ValueError(f"invalid dimensions: need 1 <= r < p, got r={r}, p={p}")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    mu = np.broadcast_to(np.asarray(mu_z, dtype=np.float64).reshape(-1), (r,)) if np.ndim(mu_z) else np.full(r, float(mu_z))
    if mu.shape != (r,):
        raise ValueError(f"mu_z must broadcast to length r={r}")

    if loading is None:
        loading = substream(seed, "params").standard_normal((p, r))
    else:
        loading = np.asarray(loading, dtype=np.float64)
        if loading.shape != (p, r):
            raise ValueError(f"loading must have shape ({p}, {r})")

    rng = substream(seed, "data")
    z = mu + rng.standard_normal((n, r))
    x = z @ loading.T
    if sigma > 0:
        x = x + sigma * rng.standard_normal((n, p))
    return Dataset(x), GroundTruth(_span_basis(loading, r))


def draw_sphere_coefficients(p: int, k: int, radius: float, seed: int) -> np.ndarray:
    """Draw k coefficient vectors uniformly on the radius sphere in R^p,
    re-drawing (next substream) if the span is numerically rank-deficient."""
    for attempt in range(64):
        g = substream(seed, "params", attempt).standard_normal((p, k))
        betas = radius * g / np.linalg.norm(g, axis=0)
        s = np.linalg.svd(betas, compute_uv=False)
        if s[-1] >= _COLLINEAR_RTOL * s[0]:
            if attempt > 0:
                logger.info("collinear coefficient draw; re-drew %d time(s)", attempt)
            return betas
    raise RuntimeError("could not draw a full-rank coefficient matrix")


def _mixture_setup(n, p, k, radius, seed, betas, intercepts):
    if n < 1:
        raise ValueError("empty dataset: n must be >= 1")
    if not 1 <= k <= p:
        raise ValueError(f"invalid dimensions: need 1 <= K <= p, got K={k}, p={p}")
    if betas is None:
        betas = draw_sphere_coefficients(p, k, radius, seed)
    else:
        betas = np.asarray(betas, dtype=np.float64)
        if betas.shape != (p, k):
            raise ValueError(f"betas must have shape ({p}, {k})")
    if intercepts is None:
        intercepts = substream(seed, "intercepts").standard_normal(k)
    else:
        intercepts = np.asarray(intercepts, dtype=np.float64).reshape(-1)
        if intercepts.shape != (k,):
            raise ValueError(f"intercepts must have length {k}")
    rng = substream(seed, "data")
    x = rng.standard_normal((n, p))
    labels = rng.integers(0, k, size=n)
    signal = np.einsum("ij,ji->i", x, betas[:, labels]) + intercepts[labels]
    return betas, intercepts, rng, x, signal


def gen_mixed_linear(
    n: int,
    p: int,
    K: int,
    beta_radius: float,
    sigma: float,
    seed: int,
    betas: np.ndarray | None = None,
    intercepts: np.ndarray | None = None,
) -> tuple[Dataset, GroundTruth]:
    """Sample a K-component mixed linear regression.

    Coefficient vectors are uniform on the radius-``beta_radius`` sphere
    (normalized Gaussian draws), intercepts are standard normal, covariates
    N(0, I_p), mixture labels uniform on {1..K}, and
    ``y = x @ beta_label + intercept_label + sigma * eps``.

    ``betas`` (p-by-K) and ``intercepts`` override the random draws, which is
    convenient for fixing a mixture across calls.
    """
    b, _, rng, x, signal = _mixture_setup(n, p, K, beta_radius, seed, betas, intercepts)
    y = signal + sigma * rng.standard_normal(n)
    return Dataset(x, y), GroundTruth(_span_basis(b, min(K, p)))


def gen_mixed_logistic(
    n: int,
    p: int,
    K: int,
    beta_radius: float,
    seed: int,
    betas: np.ndarray | None = None,
    intercepts: np.ndarray | None = None,
) -> tuple[Dataset, GroundTruth]:
    """Sample a K-component mixed logistic regression; responses are in {0, 1}.

    Same coefficient scheme as :func:`gen_mixed_linear`, with
    ``P(y = 1 | x, label = k) = logistic(x @ beta_k + intercept_k)``.
    """
    b, _, rng, x, signal = _mixture_setup(n, p, K, beta_radius, seed, betas, intercepts)
    prob = 1.0 / (1.0 + np.exp(-signal))
    y = (rng.random(n) < prob).astype(np.float64)
    return Dataset(x, y), GroundTruth(_span_basis(b, min(K, p)))


def index_model_mean(x: np.ndarray, variant: str) -> np.ndarray:
    """Noise-free response surface of the two-index test models.

    Variant A: cos(2 x1) - sin(x2);  B: cos(2 x1) - x2;  C: cos(2 x1) - cos(x2).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    first = np.cos(2.0 * x[:, 0])
    if variant == "A":
        return first - np.sin(x[:, 1])
    if variant == "B":
        return first - x[:, 1]
    if variant == "C":
        return first - np.cos(x[:, 1])
    raise ValueError(f"unknown index-model variant {variant!r}; expected 'A', 'B' or 'C'")


def gen_index_model(
    n: int,
    p: int,
    variant: str,
    seed: int,
    noise_scale: float = 0.5,
) -> tuple[Dataset, GroundTruth]:
    """Sample a two-index regression with index directions e1, e2.

    ``y = index_model_mean(x, variant) + noise_scale * eps`` with x ~ N(0, I_p)
    and eps ~ N(0, 1).  The true subspace is span{e1, e2}.
    """
    if n < 1:
        raise ValueError("empty dataset: n must be >= 1")
    if p < 2:
        raise ValueError(f"invalid dimensions: need p >= 2, got p={p}")
    index_model_mean(np.zeros((1, 2)), variant)  # validate variant early
    rng = substream(seed, "data")
    x = rng.standard_normal((n, p))
    y = index_model_mean(x, variant)
    if noise_scale > 0:
        y = y + noise_scale * rng.standard_normal(n)
    basis = np.zeros((p, 2))
    basis[0, 0] = 1.0
    basis[1, 1] = 1.0
    return Dataset(x, y), GroundTruth(basis)


def load_csv(path: str | Path, response_column: str | None = None) -> Dataset:
    """Load a numeric CSV (header row required) into a :class:`Dataset`.

    All columns except ``response_column`` become covariates, in file order.
    Raises :class:`CsvParseError` naming the offending row and column for
    blank or non-numeric cells.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(f"{path}: file is empty, expected a header row") from None
        header = [h.strip() for h in header]
        if response_column is not None and response_column not in header:
            raise CsvParseError(f"{path}: response column {response_column!r} not in header {header}")
        y_idx = header.index(response_column) if response_column is not None else None
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvParseError(f"{path}: row at line {line_no} has {len(row)} cells, expected {len(header)}")
            vals = []
            for j, cell in enumerate(row):
                cell = cell.strip()
                if cell == "":
                    raise CsvParseError(f"{path}: blank cell at line {line_no}, column {header[j]!r}")
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise CsvParseError(
                        f"{path}: non-numeric cell {cell!r} at line {line_no}, column {header[j]!r}"
                    ) from None
            rows.append(vals)
    if not rows:
        raise CsvParseError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    if y_idx is None:
        return Dataset(data)
    x = np.delete(data, y_idx, axis=1)
    return Dataset(x, data[:, y_idx])


def write_csv(dataset: Dataset, path: str | Path, response_name: str = "y") -> None:
    """Write a dataset as CSV: header ``x1..xp[,<response_name>]``, LF line
    endings, floats at 17 significant digits (lossless round trip)."""
    path = Path(path)
    cols = [f"x{j + 1}" for j in range(dataset.p_x)]
    if dataset.has_response:
        cols.append(response_name)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(dataset.n):
            cells = [f"{v:.17g}" for v in dataset.x[i]]
            if dataset.has_response:
                cells.append(f"{dataset.y[i]:.17g}")
            fh.write(",".join(cells) + "\n")
