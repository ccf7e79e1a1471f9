"""Synthetic block-covariance design used by the estimator and acceptance tests.

Each sample carries m moment evaluations f_l = mu_l + sum_k L[l, k] xi_k with
xi_k i.i.d. N(0, I_p), so the concatenated moment vector has covariance
(L L^T) kron I_p and the population moment covariance (pilot projected out)
equals (p - r) * L L^T.  The means mu_l span a fixed r-dimensional subspace.

The design is exposed through the public Dataset/custom-descriptor API: the
covariates of sample i are the flattened xi matrix, and descriptor l rebuilds
f_l from them.
"""

from __future__ import annotations

import numpy as np

from subgmm import Dataset, GroundTruth, MomentFunctionSet, custom_moments, substream


def design_matrices(m: int = 5, p: int = 8, r: int = 2, seed: int = 20240) -> tuple[np.ndarray, np.ndarray, GroundTruth]:
    """Fixed full-rank mixing matrix L (m x m), mean matrix (p x m) whose
    columns span an r-dimensional subspace, and that subspace's basis."""
    rng = substream(seed, "design")
    basis = np.linalg.qr(rng.standard_normal((p, r)))[0]
    coeffs = rng.standard_normal((r, m)) + np.sign(rng.standard_normal((r, m)))  # keep columns well spread
    means = basis @ coeffs
    mixing = rng.standard_normal((m, m)) / np.sqrt(m) + 0.8 * np.eye(m)
    return mixing, means, GroundTruth(basis)


def sample_dataset(mixing: np.ndarray, means: np.ndarray, n: int, seed: int) -> Dataset:
    """n samples whose covariates are the flattened (p x m) noise matrices."""
    p, m = means.shape
    noise = substream(seed, "data").standard_normal((n, p * m))
    return Dataset(noise)


def moment_set(mixing: np.ndarray, means: np.ndarray) -> MomentFunctionSet:
    p, m = means.shape

    def make(l: int):
        row = mixing[l].copy()
        mu = means[:, l].copy()

        def fn(x, y, row=row, mu=mu):
            xi = x.reshape(x.shape[0], p, m)
            return mu + xi @ row

        return fn

    return custom_moments(p, [make(l) for l in range(m)], needs_response=False,
                          names=[f"block{l}" for l in range(m)], input_dim=p * m)


def population_sigma(mixing: np.ndarray, p: int, r: int) -> np.ndarray:
    """Population moment covariance of the design: (p - r) * L L^T."""
    return (p - r) * mixing @ mixing.T
