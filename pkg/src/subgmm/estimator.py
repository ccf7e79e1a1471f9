"""Core numerical engine: weighted eigendecomposition of moment columns,
covariance-adaptive weighting, the two-step estimation procedure, subspace
dimension estimation and subspace error metrics.

Notation used throughout: a p-by-m matrix of moment columns, an m-by-m
symmetric positive-semidefinite weight, and the estimated subspace given by
the top-r eigenvectors of (columns @ weight @ columns.T).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chi2 import chi2_quantile
from .moments import MomentMatrix

__all__ = [
    "WeightMatrix",
    "MomentCovariance",
    "SubspaceEstimate",
    "SubspaceMetrics",
    "RankEstimate",
    "weighted_eigen",
    "gmm_objective",
    "estimate_sigma",
    "thresholded_pinv",
    "two_step_gmm",
    "estimate_rank",
    "chi2_rank_statistic",
    "subspace_metrics",
    "augmented_eigen",
]

# Relative eigen-gap below which the cut at position r is flagged.
GAP_RTOL = 1e-8


def _moment_values(v) -> np.ndarray:
    if isinstance(v, MomentMatrix):
        return v.values
    return np.asarray(v, dtype=np.float64)


def _weight_values(w) -> np.ndarray:
    if isinstance(w, WeightMatrix):
        return w.matrix
    return np.asarray(w, dtype=np.float64)


def _mirror(a: np.ndarray) -> np.ndarray:
    """Copy the upper triangle onto the lower one (exact symmetry)."""
    upper = np.triu(a)
    return upper + np.triu(a, 1).T


def _canonical_sign_first(u: np.ndarray) -> np.ndarray:
    """Flip columns so the first nonzero coordinate of each is positive."""
    u = u.copy()
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12 * max(np.max(np.abs(col)), 1e-300))[0]
        k = nz[0] if nz.size else 0
        if col[k] < 0:
            u[:, j] = -col
    return u


def eigh_descending(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and sign-canonicalized eigenvectors of the
    symmetrized input."""
    sym = 0.5 * (a + a.T)
    w, u = np.linalg.eigh(sym)
    return w[::-1].copy(), _canonical_sign_first(u[:, ::-1])


@dataclass(frozen=True)
class WeightMatrix:
    """Symmetric positive-semidefinite m-by-m weight for combining moment
    columns.

    ``kind`` records the structural family: identity, diagonal, full, or
    block-diagonal (with ``block_sizes``).  ``degenerate`` marks an all-zero
    weight produced by thresholding away every eigenvalue.
    """

    matrix: np.ndarray
    kind: str = "full"
    block_sizes: tuple[int, ...] | None = None
    degenerate: bool = False

    def __post_init__(self):
        w = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("weight matrix must be square")
        scale = max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
        if np.max(np.abs(w - w.T)) > 1e-12 * scale:
            raise ValueError("weight matrix is not symmetric within tolerance")
        evals = np.linalg.eigvalsh(0.5 * (w + w.T))
        if evals[0] < -1e-10 * max(evals[-1], 0.0) - 1e-300:
            raise ValueError("weight matrix is not positive semidefinite within tolerance")
        w.flags.writeable = False
        object.__setattr__(self, "matrix", w)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, m: int) -> "WeightMatrix":
        return cls(np.eye(m), kind="identity")

    @classmethod
    def diagonal(cls, entries) -> "WeightMatrix":
        return cls(np.diag(np.asarray(entries, dtype=np.float64)), kind="diagonal")

    @classmethod
    def block_diagonal(cls, blocks) -> "WeightMatrix":
        blocks = [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in blocks]
        sizes = tuple(b.shape[0] for b in blocks)
        m = sum(sizes)
        w = np.zeros((m, m))
        at = 0
        for b in blocks:
            k = b.shape[0]
            w[at : at + k, at : at + k] = b
            at += k
        return cls(w, kind="block-diagonal", block_sizes=sizes)


@dataclass(frozen=True)
class MomentCovariance:
    """Covariance-like m-by-m matrix of the moment functions: entry (j, l) is
    the sample average of f_j^T (I - P) f_l with P the projector onto the
    pilot subspace."""

    matrix: np.ndarray
    n_samples: int
    pilot: np.ndarray

    def __post_init__(self):
        s = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if np.any(s != s.T):
            raise ValueError("moment covariance must be exactly symmetric")
        d = np.diag(s)
        if d.size and np.min(d) < -1e-10 * max(1.0, float(np.max(np.abs(d)))):
            raise ValueError("moment covariance has a significantly negative diagonal entry")
        s.flags.writeable = False
        object.__setattr__(self, "matrix", s)
        object.__setattr__(self, "pilot", np.ascontiguousarray(self.pilot, dtype=np.float64))

    @property
    def m(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class SubspaceEstimate:
    """Top-r eigenspace with the full spectrum it was cut from.

    ``basis`` is p-by-r with orthonormal columns; ``eigenvalues`` is the full
    descending spectrum of the weighted moment outer product.
    """

    basis: np.ndarray
    eigenvalues: np.ndarray
    r: int
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        b = np.ascontiguousarray(self.basis, dtype=np.float64)
        ev = np.ascontiguousarray(self.eigenvalues, dtype=np.float64)
        if b.shape[1] != self.r:
            raise ValueError("basis column count does not match r")
        gram = b.T @ b
        if np.max(np.abs(gram - np.eye(self.r))) > 1e-10:
            raise ValueError("estimate basis columns are not orthonormal")
        if np.any(np.diff(ev) > 1e-10 * max(1.0, float(np.max(np.abs(ev))))):
            raise ValueError("eigenvalues must be non-increasing")
        b.flags.writeable = False
        ev.flags.writeable = False
        object.__setattr__(self, "basis", b)
        object.__setattr__(self, "eigenvalues", ev)
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @property
    def p(self) -> int:
        return self.basis.shape[0]

    def to_json(self) -> dict:
        return {
            "p": self.p,
            "r": self.r,
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "U": [float(v) for v in self.basis.flatten(order="F")],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SubspaceEstimate":
        p, r = int(doc["p"]), int(doc["r"])
        basis = np.asarray(doc["U"], dtype=np.float64).reshape((p, r), order="F")
        return cls(basis, np.asarray(doc["eigenvalues"], dtype=np.float64), r, tuple(doc.get("warnings", ())))


@dataclass(frozen=True)
class SubspaceMetrics:
    """Distance diagnostics between an estimated and a reference subspace.

    ``distance`` is the Frobenius norm of the difference of the two orthogonal
    projectors; ``sin_theta`` holds the canonical-angle sines in descending
    order; ``sin_sq_sum`` is their squared sum, which equals distance^2 / 2.
    """

    distance: float
    sin_theta: np.ndarray
    sin_sq_sum: float


@dataclass(frozen=True)
class RankEstimate:
    """Subspace-dimension estimates from the weighted spectrum.

    ``rank_threshold`` counts eigenvalues above the threshold;
    ``rank_chi2`` is the smallest k whose tail statistic
    n (p - k) sum_{j>k} lambda_j falls below the chi-squared critical value
    with (p - k)(m - k) degrees of freedom.  ``table`` records one row per
    scanned k: (k, lambda_k, statistic, critical); lambda is NaN at k = 0 and
    the critical value is NaN where the degrees of freedom are nonpositive.
    """

    rank_threshold: int
    rank_chi2: int
    eigenvalues: np.ndarray
    table: tuple[tuple[int, float, float, float], ...]
    threshold: float
    quantile: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("k,eigenvalue,statistic,critical_value\n")
            for k, lam, stat, eta in self.table:
                fh.write(f"{k},{lam:.17g},{stat:.17g},{eta:.17g}\n")


def weighted_eigen(v, w, r: int) -> SubspaceEstimate:
    """Top-r eigenvectors of (columns @ weight @ columns.T).

    The p-by-p matrix is symmetrized before the decomposition; eigenvector
    signs are canonicalized.  A relative eigen-gap below ``GAP_RTOL`` at the
    cut adds a warning on the returned estimate rather than failing.
    """
    values = _moment_values(v)
    weight = _weight_values(w)
    p, m = values.shape
    if weight.shape != (m, m):
        raise ValueError(f"weight must be {m}x{m} for a moment matrix with m={m}")
    if not 1 <= r <= p:
        raise ValueError(f"invalid dimension: need 1 <= r <= p, got r={r}, p={p}")
    evals, evecs = eigh_descending(values @ weight @ values.T)
    warnings = _gap_warnings(evals, r)
    return SubspaceEstimate(evecs[:, :r], evals, r, warnings)


def _gap_warnings(evals: np.ndarray, r: int) -> tuple[str, ...]:
    if r < evals.shape[0]:
        scale = max(abs(float(evals[0])), 1e-300)
        if (evals[r - 1] - evals[r]) / scale < GAP_RTOL:
            return (f"near-degenerate eigenvalue gap at position r={r}",)
    return ()


def gmm_objective(v, w, basis: np.ndarray) -> float:
    """Weighted residual of the moment columns against a candidate subspace:
    sum_{k,l} w_kl v_k^T (I - U U^T) v_l, evaluated through the equivalent
    quadratic form sum w_kl v_k^T v_l - trace(U^T V W V^T U)."""
    values = _moment_values(v)
    weight = _weight_values(w)
    u = np.asarray(basis, dtype=np.float64)
    if np.max(np.abs(u.T @ u - np.eye(u.shape[1]))) > 1e-8:
        raise ValueError("candidate basis is not orthonormal within 1e-8")
    gram = values.T @ values
    total = float(np.sum(weight * gram))
    c = u.T @ values
    return total - float(np.sum((c @ weight) * c))


def estimate_sigma(v: MomentMatrix, pilot: np.ndarray) -> MomentCovariance:
    """Sample covariance-like matrix of the moment functions, with the pilot
    subspace projected out.

    Streams the per-sample evaluation stacks in fixed blocks and uses
    entry (j, l) = mean(f_j^T f_l) - mean((U0^T f_j)^T (U0^T f_l)), then
    mirrors the upper triangle so the result is exactly symmetric.
    """
    if not isinstance(v, MomentMatrix) or v.evaluator is None:
        raise ValueError("estimate_sigma needs a materialized moment matrix with a re-streamable evaluator")
    u0 = np.asarray(pilot, dtype=np.float64)
    if u0.ndim != 2 or u0.shape[0] != v.p:
        raise ValueError(f"pilot must be a {v.p}-row orthonormal matrix")
    if np.max(np.abs(u0.T @ u0 - np.eye(u0.shape[1]))) > 1e-8:
        raise ValueError("pilot basis is not orthonormal within 1e-8")
    m = v.m
    r = u0.shape[1]
    gross = np.zeros((m, m))
    projected = np.zeros((m, m))
    for _, block in v.evaluator.iter_blocks():
        nb = block.shape[0]
        flat = block.reshape(nb * v.p, m)
        gross += flat.T @ flat
        proj = np.tensordot(block, u0, axes=([1], [0]))  # (nb, m, r)
        q = proj.transpose(0, 2, 1).reshape(nb * r, m)
        projected += q.T @ q
    sigma = _mirror((gross - projected) / v.n_samples)
    return MomentCovariance(sigma, v.n_samples, u0)


def thresholded_pinv(s, delta: float) -> WeightMatrix:
    """Pseudoinverse with hard thresholding: eigenvalues above ``delta`` are
    inverted, the rest are zeroed.  ``delta = 0`` gives the Moore-Penrose
    pseudoinverse of a PSD matrix.

    If every eigenvalue falls at or below the threshold the all-zero weight is
    returned with its ``degenerate`` flag set; the caller decides the fallback.
    """
    if delta < 0:
        raise ValueError("threshold delta must be >= 0")
    mat = s.matrix if isinstance(s, MomentCovariance) else np.asarray(s, dtype=np.float64)
    evals, evecs = eigh_descending(mat)
    keep = evals > delta
    if not np.any(keep):
        return WeightMatrix(np.zeros_like(mat), kind="full", degenerate=True)
    psi = np.where(keep, 1.0 / np.where(keep, evals, 1.0), 0.0)
    w = _mirror((evecs * psi) @ evecs.T)
    return WeightMatrix(w, kind="full")


def two_step_gmm(
    v: MomentMatrix,
    r: int | str = "auto",
    delta: float = 0.01,
    weight_shape: str = "full",
    iterations: int = 1,
):
    """Two-step weighted subspace estimation.

    Step 1 takes the top eigenvectors under the identity weight as a pilot;
    step 2 estimates the moment covariance with the pilot projected out;
    step 3 (``r='auto'`` only) estimates the dimension from the weighted
    spectrum; step 4 re-solves the eigenproblem under the thresholded
    pseudoinverse weight.  ``iterations > 1`` repeats steps 2-4 from the
    latest estimate.

    Parameters
    ----------
    v : MomentMatrix
        Materialized moments with a re-streamable evaluator.
    r : int or 'auto'
        Subspace dimension; 'auto' estimates it (threshold rule) and flags a
        missing spectral gap with a warning.
    delta : float
        Hard threshold for the pseudoinverse weight (default 0.01).
    weight_shape : {'full', 'diagonal'}
        'diagonal' zeroes the off-diagonal covariance entries before inverting.
    iterations : int
        Number of reweighting passes (>= 1).

    Returns
    -------
    (SubspaceEstimate, MomentCovariance, WeightMatrix)
        If thresholding annihilates the whole weight, the identity weight is
        used instead and the estimate carries a warning.
    """
    if weight_shape not in ("full", "diagonal"):
        raise ValueError(f"unknown weight shape {weight_shape!r}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    p, m = v.p, v.m
    auto_rank = isinstance(r, str)
    if auto_rank:
        if r != "auto":
            raise ValueError(f"r must be an integer or 'auto', got {r!r}")
        # Pilot cut on the unweighted spectrum, which is not scale-free: use a
        # trace-calibrated threshold there instead of the scale-free default.
        pilot_tau = math.sqrt(1.0 / v.n_samples) * float(np.trace(v.values @ v.values.T)) / p
        pilot_rank = max(
            estimate_rank(v, WeightMatrix.identity(m), v.n_samples, tau=pilot_tau).rank_threshold, 1
        )
    else:
        if not 1 <= r <= p:
            raise ValueError(f"invalid dimension: need 1 <= r <= p, got r={r}, p={p}")
        pilot_rank = int(r)

    warnings: list[str] = []
    pilot = weighted_eigen(v, WeightMatrix.identity(m), pilot_rank)
    basis = pilot.basis
    rank = pilot_rank
    sigma = weight = estimate = None
    for _ in range(iterations):
        sigma = estimate_sigma(v, basis)
        shaped = np.diag(np.diag(sigma.matrix)) if weight_shape == "diagonal" else sigma.matrix
        weight = thresholded_pinv(shaped, delta)
        if weight.degenerate:
            warnings.append("thresholding annihilated the weight matrix; fell back to identity")
            weight = WeightMatrix.identity(m)
        elif weight_shape == "diagonal":
            weight = WeightMatrix(np.diag(np.diag(weight.matrix)), kind="diagonal")
        if auto_rank:
            rank_est = estimate_rank(v, weight, v.n_samples)
            rank = max(rank_est.rank_threshold, 1)
        estimate = weighted_eigen(v, weight, rank)
        basis = estimate.basis
    if warnings or estimate.warnings:
        estimate = SubspaceEstimate(
            estimate.basis, estimate.eigenvalues, estimate.r, tuple(estimate.warnings) + tuple(warnings)
        )
    return estimate, sigma, weight


def _spectrum(v, w) -> tuple[np.ndarray, int, int]:
    values = _moment_values(v)
    weight = _weight_values(w)
    p, m = values.shape
    evals, _ = eigh_descending(values @ weight @ values.T)
    return evals, p, m


def estimate_rank(v, w, n: int, tau: float | None = None, eta_quantile: float = 0.95) -> RankEstimate:
    """Estimate the subspace dimension from the weighted spectrum.

    ``tau`` defaults to n^(-1/2), which vanishes with n while n * tau
    diverges.  Under a covariance-adaptive weight (the intended use) the
    spectrum is scale-free: the top eigenvalues are O(1) signal-to-noise
    ratios and the trailing ones are O(1/n), so the default separates them
    with a growing margin.  For spectra under an arbitrary fixed weight pass
    an explicit threshold on the data's own scale (e.g. a trace fraction).

    The chi-squared rule scans k = 0, 1, ... and accepts the first k whose
    tail statistic n (p - k) sum_{j>k} lambda_j is at or below the
    ``eta_quantile`` quantile of chi-squared with (p - k)(m - k) degrees of
    freedom; rows with nonpositive degrees of freedom are recorded with an
    undefined (NaN) critical value and skipped.
    """
    if not 0.0 < eta_quantile < 1.0:
        raise ValueError("eta_quantile must be in (0, 1)")
    evals, p, m = _spectrum(v, w)
    if tau is None:
        tau = math.sqrt(1.0 / n)
    rank_threshold = int(np.sum(evals > tau))

    tails = np.concatenate([np.cumsum(evals[::-1])[::-1], [0.0]])  # tails[k] = sum_{j>k} lambda_j
    table = []
    rank_chi2 = min(p, m)
    found = False
    for k in range(p):
        stat = n * (p - k) * float(tails[k])
        df = (p - k) * (m - k)
        eta = chi2_quantile(eta_quantile, df) if df > 0 and k < m else float("nan")
        lam = float(evals[k - 1]) if k >= 1 else float("nan")
        table.append((k, lam, stat, eta))
        if not found and math.isfinite(eta) and stat <= eta:
            rank_chi2 = k
            found = True
    return RankEstimate(rank_threshold, rank_chi2, evals, tuple(table), float(tau), eta_quantile)


def chi2_rank_statistic(v, w, n: int, k: int) -> float:
    """Tail statistic n (p - k) sum_{j>k} lambda_j of the weighted spectrum."""
    evals, p, m = _spectrum(v, w)
    if k >= p:
        raise ValueError(f"k must be below p={p}")
    if k >= min(p, m):
        raise ValueError(f"k must be below min(p, m)={min(p, m)}")
    return n * (p - k) * float(np.sum(evals[k:]))


def subspace_metrics(estimate, truth) -> SubspaceMetrics:
    """Canonical-angle error metrics between an estimate and the truth.

    Accepts :class:`SubspaceEstimate` / ground-truth objects or raw basis
    arrays with orthonormal columns; dimensions must agree.
    """
    u = estimate.basis if hasattr(estimate, "basis") else np.asarray(estimate, dtype=np.float64)
    t = truth.basis if hasattr(truth, "basis") else np.asarray(truth, dtype=np.float64)
    if u.shape[0] != t.shape[0]:
        raise ValueError(f"ambient dimension mismatch: {u.shape[0]} != {t.shape[0]}")
    if u.shape[1] != t.shape[1]:
        raise ValueError(f"subspace dimension mismatch: {u.shape[1]} != {t.shape[1]}")
    overlap = u.T @ t
    sing = np.clip(np.linalg.svd(overlap, compute_uv=False), 0.0, 1.0)
    sin_theta = np.sqrt(1.0 - sing**2)[::-1].copy()
    distance = float(np.linalg.norm(u @ u.T - t @ t.T, ord="fro"))
    sin_sq_sum = float(t.shape[1] - np.sum(overlap**2))
    return SubspaceMetrics(distance, sin_theta, sin_sq_sum)


def augmented_eigen(kappa: float, m_aug: np.ndarray, v, w, r: int) -> SubspaceEstimate:
    """Top-r eigenvectors of kappa * M + columns @ weight @ columns.T, folding
    an external symmetric p-by-p statistic M into the weighted estimate."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    m_aug = np.asarray(m_aug, dtype=np.float64)
    values = _moment_values(v)
    p = values.shape[0]
    if m_aug.shape != (p, p):
        raise ValueError(f"augmentation matrix must be {p}x{p}")
    scale = max(1.0, float(np.max(np.abs(m_aug))))
    if np.max(np.abs(m_aug - m_aug.T)) > 1e-10 * scale:
        raise ValueError("augmentation matrix is not symmetric within tolerance")
    weight = _weight_values(w)
    evals, evecs = eigh_descending(kappa * m_aug + values @ weight @ values.T)
    if not 1 <= r <= p:
        raise ValueError(f"invalid dimension: need 1 <= r <= p, got r={r}, p={p}")
    return SubspaceEstimate(evecs[:, :r], evals, r, _gap_warnings(evals, r))
