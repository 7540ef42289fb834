"""Cluster-robust moment variance, coefficient covariance and tests.

All averages over observations use ``N / G`` as the per-cluster size so that
balanced panels clustered by group reproduce the textbook expression
``(1/m) sum_j (n^-1 sum_i z_ij u_ij)(n^-1 sum_i z_ij u_ij)'`` exactly, while
unbalanced panels keep the scaling consistent with ``S_ZX = Z'X / N``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .exceptions import ConfigError, DataError, IdentificationError, NumericalError

__all__ = [
    "TestResult",
    "cluster_scores",
    "omega_hat",
    "omega_from_scores",
    "sigma_blocks",
    "sigma_hat",
    "efficient_weight",
    "z_test",
    "j_test",
    "cluster_covariance",
    "jackknife_sigma",
    "PINV_CUTOFF",
]

PINV_CUTOFF = 1e-12


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    dof: int | None = None
    kind: str = "z"

    @property
    def reject_05(self) -> bool:
        return bool(self.p_value < 0.05)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "statistic": self.statistic,
            "dof": self.dof,
            "p_value": self.p_value,
            "reject_05": self.reject_05,
        }


def _dense_codes(clusters, n: int) -> tuple[np.ndarray, int]:
    if clusters is None:
        return np.arange(n), n
    clusters = np.asarray(clusters)
    if clusters.shape != (n,):
        raise DataError(f"cluster index has shape {clusters.shape}, expected ({n},)")
    _, codes = np.unique(clusters, return_inverse=True)
    codes = codes.ravel()
    return codes, int(codes.max()) + 1


def cluster_scores(Z: np.ndarray, u: np.ndarray, clusters) -> np.ndarray:
    """Per-cluster sums of ``z_i * u_i``, shape (G, L)."""
    Z = np.asarray(Z, dtype=float)
    u = np.asarray(u, dtype=float)
    if Z.shape[0] != u.shape[0]:
        raise DataError("instruments and residuals have different numbers of rows")
    codes, G = _dense_codes(clusters, Z.shape[0])
    out = np.zeros((G, Z.shape[1]))
    np.add.at(out, codes, Z * u[:, None])
    return out


def omega_from_scores(s1: np.ndarray, s2: np.ndarray, n_obs: int, dof_correction: bool = False) -> np.ndarray:
    """Moment variance from per-cluster score sums (see module docstring)."""
    G = s1.shape[0]
    omega = G * (s1.T @ s2) / float(n_obs) ** 2
    if dof_correction:
        if G < 2:
            raise ConfigError("the degrees-of-freedom correction needs at least two clusters")
        omega *= G / (G - 1.0)
    return omega


def omega_hat(Z, u, clusters, Z_prime=None, u_prime=None, dof_correction: bool = False) -> np.ndarray:
    """Cluster-robust estimate of the moment variance between two quantiles.

    ``Z``/``u`` are the instruments and second-stage residuals at the first
    quantile; ``Z_prime``/``u_prime`` (default: the same) at the second.
    """
    Z_prime = Z if Z_prime is None else Z_prime
    u_prime = u if u_prime is None else u_prime
    if np.shape(Z)[0] != np.shape(Z_prime)[0] or np.shape(u)[0] != np.shape(u_prime)[0]:
        raise DataError("row counts differ between the two quantiles")
    s1 = cluster_scores(Z, u, clusters)
    s2 = s1 if (Z_prime is Z and u_prime is u) else cluster_scores(Z_prime, u_prime, clusters)
    return omega_from_scores(s1, s2, np.shape(Z)[0], dof_correction)


def sigma_blocks(G_hats, omegas, n_clusters: int) -> np.ndarray:
    """Stack ``G(t) Omega(t, t') / G_count G(t')'`` into a (TK, TK) matrix.

    ``omegas[a][b]`` is the moment variance between grid points ``a`` and
    ``b``.
    """
    T = len(G_hats)
    K = G_hats[0].shape[0]
    out = np.empty((T * K, T * K))
    for a in range(T):
        for b in range(T):
            out[a * K:(a + 1) * K, b * K:(b + 1) * K] = G_hats[a] @ omegas[a][b] @ G_hats[b].T / n_clusters
    return 0.5 * (out + out.T)


def sigma_hat(estimates, dof_correction: bool = False) -> np.ndarray:
    """Joint covariance of the coefficient vectors of several fits.

    ``estimates`` is a sequence of fitted second stages on the same panel
    and clusters (see :class:`qpanel.md.MdEstimate`).
    """
    estimates = list(estimates)
    n_obs = estimates[0].n_obs
    G = estimates[0].n_clusters
    omegas = [[omega_from_scores(a.scores, b.scores, n_obs, dof_correction) for b in estimates] for a in estimates]
    return sigma_blocks([e.G_hat for e in estimates], omegas, G)


def efficient_weight(omega: np.ndarray, cutoff: float = PINV_CUTOFF):
    """Inverse of the moment variance, truncating tiny singular values.

    Returns ``(W, truncated)`` where ``truncated`` tells whether any singular
    value fell below ``cutoff * sigma_max``.
    """
    omega = np.asarray(omega, dtype=float)
    omega = 0.5 * (omega + omega.T)
    U, s, Vt = np.linalg.svd(omega)
    if s.size == 0 or s[0] <= 0.0:
        raise NumericalError("the moment variance is zero; the efficient weighting matrix does not exist")
    keep = s > cutoff * s[0]
    W = (Vt[keep].T / s[keep]) @ U[:, keep].T
    return 0.5 * (W + W.T), bool(not keep.all())


def z_test(estimates, sigma, eta, null_value: float = 0.0) -> TestResult:
    """Two-sided normal test of ``eta' delta = null_value``.

    ``estimates`` is the stacked (TK,) coefficient vector and ``sigma`` its
    (TK, TK) covariance.
    """
    est = np.asarray(estimates, dtype=float).ravel()
    eta = np.asarray(eta, dtype=float).ravel()
    if eta.shape != est.shape:
        raise ConfigError(f"contrast has length {eta.size}, expected {est.size}")
    if not np.any(eta):
        raise ConfigError("the contrast vector is zero")
    var = float(eta @ np.asarray(sigma) @ eta)
    if not var > 0.0:
        raise NumericalError("the contrast has zero or negative estimated variance")
    stat = float((eta @ est - null_value) / np.sqrt(var))
    return TestResult(statistic=stat, p_value=float(2.0 * stats.norm.sf(abs(stat))), kind="z")


def j_test(estimate, omega: np.ndarray | None = None) -> TestResult:
    """Overidentification test at an efficient GMM fit.

    ``J = m * gbar' Omega^-1 gbar`` with ``gbar = Z'u / N``; chi-squared with
    ``L - K`` degrees of freedom. ``omega`` defaults to the moment variance
    used to build the efficient weighting matrix.
    """
    L, K = estimate.n_instruments, estimate.n_params
    if L <= K:
        raise IdentificationError(
            f"the overidentification test needs more instruments than coefficients (L={L}, K={K})"
        )
    if omega is None:
        omega = estimate.first_step_omega if estimate.first_step_omega is not None else estimate.omega
    W, _ = efficient_weight(omega)
    gbar = estimate.scores.sum(axis=0) / estimate.n_obs
    stat = float(estimate.n_clusters * gbar @ W @ gbar)
    dof = L - K
    return TestResult(statistic=stat, p_value=float(stats.chi2.sf(stat, dof)), dof=dof, kind="J")


def cluster_covariance(X, Z, W, u, clusters) -> np.ndarray:
    """Cluster-robust sandwich covariance of a linear GMM estimator.

    Plain sums over clusters; this is the textbook formula used by
    one-step least squares panel estimators.
    """
    X, Z, W, u = (np.asarray(a, dtype=float) for a in (X, Z, W, u))
    s = cluster_scores(Z, u, clusters)
    A = X.T @ Z @ W @ Z.T @ X
    B = X.T @ Z @ W @ (s.T @ s) @ W @ Z.T @ X
    Ainv = np.linalg.pinv(A)
    V = Ainv @ B @ Ainv
    return 0.5 * (V + V.T)


def jackknife_sigma(replicates) -> np.ndarray:
    """Delete-one-cluster jackknife covariance across several fits.

    ``replicates`` is a sequence of (G, K) arrays of leave-one-cluster-out
    coefficients, one per quantile; the result is the stacked (TK, TK)
    matrix ``(G - 1) / G * sum_g d_g d_g'`` with ``d_g`` the deviations from
    the replicate means.
    """
    D = np.hstack([r - r.mean(axis=0) for r in replicates])
    G = D.shape[0]
    out = (G - 1.0) / G * (D.T @ D)
    return 0.5 * (out + out.T)
