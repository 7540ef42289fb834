"""Optimal instruments for random- and fixed-effects quantile panels.

The random-effects instrument of group ``j`` is

    Z*_j = (X~_j M_j X~_j')^+ X_j,   M_j = V_j / n_j + sigma2_alpha e1 e1',

where ``X~_j = [1, X1_j]``, ``V_j`` is the asymptotic variance of the
first-stage coefficients (Powell sandwich) and ``sigma2_alpha`` the variance
of the group effects. Because ``X~ M X~'`` has rank at most ``K1 + 1`` the
pseudo-inverse is computed from a thin QR of ``X~_j``; a direct SVD route is
kept for verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .exceptions import ConfigError, DataError, NumericalError
from .panel import GroupedPanel
from .qr import FirstStageFit

__all__ = [
    "FirstStageVariance",
    "hall_sheather_bandwidth",
    "powell_vj",
    "first_stage_variance",
    "nerlove_sigma_alpha",
    "group_effects",
    "re_optimal_instrument",
    "fe_optimal_instrument",
    "efficient_md",
]

_MAX_WIDEN = 3


def hall_sheather_bandwidth(n: int, tau: float, alpha: float = 0.05) -> float:
    """Hall-Sheather bandwidth on the probability scale."""
    x = stats.norm.ppf(tau)
    f = stats.norm.pdf(x)
    za = stats.norm.ppf(1.0 - alpha / 2.0)
    return float(n ** (-1.0 / 3.0) * za ** (2.0 / 3.0) * (1.5 * f**2 / (2.0 * x**2 + 1.0)) ** (1.0 / 3.0))


def _residual_bandwidth(resid: np.ndarray, tau: float) -> float:
    # probability-scale bandwidth mapped to residual units through a normal
    # reference with a robust scale; in the tails the band is shrunk so that
    # tau +- h stays inside (0, 1)
    hp = min(hall_sheather_bandwidth(resid.size, tau), 0.5 * min(tau, 1.0 - tau))
    lo, hi = tau - hp, tau + hp
    q75, q25 = np.percentile(resid, [75, 25])
    sd = resid.std(ddof=1) if resid.size > 1 else 0.0
    scale = min(sd, (q75 - q25) / 1.34)
    if not scale > 0.0:
        scale = max(sd, np.abs(resid).max(), 1e-12)
    return float((stats.norm.ppf(hi) - stats.norm.ppf(lo)) * scale)


def powell_vj(resid, X_tilde, tau: float, bandwidth: float | None = None, group=None):
    """Powell sandwich estimate of the first-stage coefficient variance.

    Parameters
    ----------
    resid : array_like, shape (n,)
        Quantile regression residuals of one group.
    X_tilde : array_like, shape (n, K)
        First-stage design including the intercept.
    tau : float
    bandwidth : float, optional
        Half-width of the uniform kernel in residual units; the default is the
        Hall-Sheather rule.

    Returns
    -------
    V : ndarray, shape (K, K)
        Estimate of the asymptotic variance of ``sqrt(n) (b_hat - b)``.
    h : float
        Bandwidth actually used (it is doubled, at most three times, when no
        residual falls inside the band).
    """
    resid = np.asarray(resid, dtype=float)
    Xt = np.asarray(X_tilde, dtype=float)
    n, K = Xt.shape
    h = _residual_bandwidth(resid, tau) if bandwidth is None else float(bandwidth)
    if not h > 0.0:
        raise ConfigError("the Powell bandwidth must be positive")
    Q = Xt.T @ Xt / n
    for _ in range(_MAX_WIDEN + 1):
        w = (np.abs(resid) <= h) / (2.0 * h)
        B = (Xt * w[:, None]).T @ Xt / n
        sv = np.linalg.svd(B, compute_uv=False)
        if sv[-1] > 1e-10 * max(sv[0], 1e-300) and sv[0] > 0:
            Binv = np.linalg.pinv(B)
            V = Binv @ (tau * (1.0 - tau) * Q) @ Binv
            return 0.5 * (V + V.T), h
        h *= 2.0
    where = f" in group {group!r}" if group is not None else ""
    raise NumericalError(f"Powell density matrix is singular{where} even after widening the bandwidth")


@dataclass(frozen=True, eq=False)
class FirstStageVariance:
    """Per-group Powell variances at one quantile.

    ``V`` has shape (m, K1 + 1, K1 + 1) and estimates the variance of
    ``sqrt(n_j) (b_hat_j - b_j)``; ``bandwidth`` has shape (m,).
    """

    tau: float
    V: np.ndarray
    bandwidth: np.ndarray


def first_stage_variance(
    first_stage: FirstStageFit, panel: GroupedPanel, tau: float, bandwidth: float | None = None
) -> FirstStageVariance:
    """Powell variance of every group's first-stage fit at ``tau``."""
    t = first_stage.taus.index(tau)
    if first_stage.dropped:
        j = next(iter(first_stage.dropped))
        raise NumericalError(
            f"group {panel.labels[j]!r} has a rank-deficient first stage; optimal instruments need full-rank groups"
        )
    K = panel.K1 + 1
    V = np.empty((panel.n_groups, K, K))
    hs = np.empty(panel.n_groups)
    for j in range(panel.n_groups):
        sl = panel.group_slice(j)
        Xt = np.column_stack([np.ones(sl.stop - sl.start), panel.X1[sl]])
        resid = panel.y[sl] - first_stage.fitted[t, sl]
        V[j], hs[j] = powell_vj(resid, Xt, tau, bandwidth, group=panel.labels[j])
    return FirstStageVariance(tau=float(tau), V=V, bandwidth=hs)


def nerlove_sigma_alpha(alpha_hat) -> float:
    """Sample variance (divisor ``m - 1``) of estimated group effects."""
    a = np.asarray(alpha_hat, dtype=float).ravel()
    if a.size < 2:
        raise DataError("at least two group effects are needed to estimate their variance")
    return float(max(a.var(ddof=1), 0.0))


def group_effects(first_stage: FirstStageFit, panel: GroupedPanel, tau: float, beta_within) -> np.ndarray:
    """Estimated group effects at ``tau``.

    The first-stage fit is evaluated at the group mean of the individual-level
    regressors, the within-group slope contribution ``x1_bar_j' beta`` is
    removed and the result is regressed across groups on the group-level
    regressors; the residuals are the group effects.
    """
    t = first_stage.taus.index(tau)
    m = panel.n_groups
    fitted_mean = np.add.reduceat(first_stage.fitted[t], panel.starts[:-1]) / panel.counts
    x1_bar = np.add.reduceat(panel.X1, panel.starts[:-1], axis=0) / panel.counts[:, None] if panel.K1 else np.zeros((m, 0))
    level = fitted_mean - x1_bar @ np.asarray(beta_within, dtype=float).reshape(-1)
    X2 = panel.group_rows(panel.X2)
    if X2.shape[1] == 0:
        return level - level.mean()
    coef, *_ = np.linalg.lstsq(X2, level, rcond=None)
    return level - X2 @ coef


def _pinv_cutoff(n: int, K: int, smax: float) -> float:
    return max(n, K) * np.finfo(float).eps * smax


def _check_psd(M: np.ndarray, group) -> None:
    ev = np.linalg.eigvalsh(0.5 * (M + M.T))
    if ev[-1] <= 0.0:
        raise NumericalError(f"the optimal-instrument weight matrix is zero in group {group!r}")
    if ev[0] < -1e-10 * ev[-1]:
        raise NumericalError(f"the optimal-instrument weight matrix is not positive semidefinite in group {group!r}")


def _lowrank_apply(Xt: np.ndarray, M: np.ndarray, B: np.ndarray) -> np.ndarray:
    # (Xt M Xt')^+ B with Xt = Q R: the pseudo-inverse is Q (R M R')^+ Q'
    n, K = Xt.shape
    Q, R = np.linalg.qr(Xt)
    C = R @ M @ R.T
    U, s, Vt = np.linalg.svd(0.5 * (C + C.T))
    keep = s > _pinv_cutoff(n, K, s[0])
    Cp = (Vt[keep].T / s[keep]) @ U[:, keep].T
    return Q @ (Cp @ (Q.T @ B))


def _direct_apply(Xt: np.ndarray, M: np.ndarray, B: np.ndarray) -> np.ndarray:
    n, K = Xt.shape
    A = Xt @ M @ Xt.T
    U, s, Vt = np.linalg.svd(0.5 * (A + A.T))
    keep = s > _pinv_cutoff(n, K, s[0])
    return (Vt[keep].T / s[keep]) @ (U[:, keep].T @ B)


def _weight_matrices(V: FirstStageVariance, panel: GroupedPanel, sigma2_alpha: float) -> np.ndarray:
    if V.V.shape[0] != panel.n_groups:
        raise DataError("first-stage variances do not match the number of groups")
    M = V.V / panel.counts[:, None, None]
    M = M.copy()
    M[:, 0, 0] += sigma2_alpha
    return M


def re_optimal_instrument(
    panel: GroupedPanel,
    V: FirstStageVariance,
    sigma2_alpha: float,
    method: str = "lowrank",
) -> np.ndarray:
    """Random-effects optimal instrument, shape (N, K1 + K2).

    ``method="svd"`` pseudo-inverts the full ``n_j x n_j`` matrix; the
    default exploits its low rank. Both use the singular-value cutoff
    ``max(n_j, K1 + 1) * eps * sigma_max``.
    """
    if sigma2_alpha < 0 or not np.isfinite(sigma2_alpha):
        raise ConfigError("the group-effect variance must be finite and nonnegative")
    apply = {"lowrank": _lowrank_apply, "svd": _direct_apply}.get(method)
    if apply is None:
        raise ConfigError(f"unknown pseudo-inverse method {method!r}")
    M = _weight_matrices(V, panel, sigma2_alpha)
    X = np.hstack([panel.X1, panel.X2])
    Z = np.empty_like(X)
    for j in range(panel.n_groups):
        sl = panel.group_slice(j)
        _check_psd(M[j], panel.labels[j])
        Xt = np.column_stack([np.ones(sl.stop - sl.start), panel.X1[sl]])
        Z[sl] = apply(Xt, M[j], X[sl])
    return Z


def fe_optimal_instrument(panel: GroupedPanel, V: FirstStageVariance, method: str = "lowrank") -> np.ndarray:
    """Fixed-effects optimal instrument for the slopes, shape (N, K1).

    The group intercept is swept out in the metric of ``(X~ M X~')^+`` with
    ``M = V_j / n_j``, so that the instrument is orthogonal to the group
    constant and the resulting IV estimator is the efficient combination of
    the first-stage slopes.
    """
    if panel.K1 == 0:
        raise ConfigError("fixed effects need individual-level regressors")
    apply = {"lowrank": _lowrank_apply, "svd": _direct_apply}.get(method)
    if apply is None:
        raise ConfigError(f"unknown pseudo-inverse method {method!r}")
    M = _weight_matrices(V, panel, 0.0)
    Z = np.empty_like(panel.X1)
    for j in range(panel.n_groups):
        sl = panel.group_slice(j)
        n_j = sl.stop - sl.start
        _check_psd(M[j], panel.labels[j])
        Xt = np.column_stack([np.ones(n_j), panel.X1[sl]])
        AX = apply(Xt, M[j], np.column_stack([np.ones(n_j), panel.X1[sl]]))
        Al, AX1 = AX[:, :1], AX[:, 1:]
        denom = float(np.ones(n_j) @ Al[:, 0])
        if not denom > 0.0:
            raise NumericalError(f"cannot sweep the group intercept in group {panel.labels[j]!r}")
        Z[sl] = AX1 - Al @ (np.ones(n_j) @ AX1)[None, :] / denom
    return Z


def efficient_md(coefs, V: FirstStageVariance, panel: GroupedPanel, sigma2_alpha: float = 0.0) -> np.ndarray:
    """Efficient minimum distance combination of first-stage coefficients.

    Solves ``sum_j R_j' M_j^-1 R_j delta = sum_j R_j' M_j^-1 b_j`` where
    ``R_j`` maps ``delta = (beta, gamma)`` to group ``j``'s coefficient
    vector ``(x2_j' gamma, beta)``.
    """
    coefs = np.asarray(coefs, dtype=float)
    M = _weight_matrices(V, panel, sigma2_alpha)
    K1, K2 = panel.K1, panel.K2
    X2 = panel.group_rows(panel.X2)
    A = np.zeros((K1 + K2, K1 + K2))
    b = np.zeros(K1 + K2)
    for j in range(panel.n_groups):
        R = np.zeros((K1 + 1, K1 + K2))
        R[0, K1:] = X2[j]
        R[1:, :K1] = np.eye(K1)
        Minv = np.linalg.inv(M[j])
        A += R.T @ Minv @ R
        b += R.T @ Minv @ coefs[j]
    return np.linalg.solve(A, b)
