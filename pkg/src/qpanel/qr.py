"""First-stage estimation: group-by-group quantile (and least squares) fits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

from . import _simplex
from .exceptions import DataError, NumericalError
from .panel import GroupedPanel, QuantileGrid

__all__ = [
    "QrFit",
    "FirstStageFit",
    "check_loss",
    "fit_qr",
    "fit_first_stage",
    "fit_ols_first_stage",
    "certificate_holds",
]

ZERO_TOL = 1e-8
_ITER_FACTOR = 20


def check_loss(u, tau: float) -> np.ndarray:
    """Elementwise check function ``(tau - 1{u < 0}) * u``."""
    u = np.asarray(u, dtype=float)
    return (tau - (u < 0)) * u


def certificate_holds(n: int, n_neg: int, n_zero: int, tau: float) -> bool:
    """Subgradient condition ``n_neg <= n * tau <= n_neg + n_zero``."""
    target = n * tau
    slack = 1e-9 * max(1.0, target)
    return n_neg <= target + slack and target <= n_neg + n_zero + slack


@dataclass(frozen=True)
class QrFit:
    """Result of one quantile regression.

    ``coefficients`` follow the columns of the design (intercept first in the
    first stage); columns dropped for rank deficiency are reported as NaN and
    listed in ``dropped``.
    """

    tau: float
    coefficients: np.ndarray
    objective: float
    residuals: np.ndarray
    n_neg: int
    n_zero: int
    dropped: tuple = ()
    solver: str = "simplex"

    @property
    def certificate(self) -> bool:
        return certificate_holds(self.residuals.size, self.n_neg, self.n_zero, self.tau)


def _zero_tol(y: np.ndarray) -> float:
    return ZERO_TOL * (1.0 + (np.abs(y).max() if y.size else 0.0))


def _linprog_qr(y: np.ndarray, X: np.ndarray, tau: float) -> np.ndarray:
    n, K = X.shape
    c = np.concatenate([np.zeros(K), np.full(n, tau), np.full(n, 1.0 - tau)])
    A_eq = np.hstack([X, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * K + [(0, None)] * (2 * n)
    res = linprog(c, A_eq=A_eq, b_eq=y, bounds=bounds, method="highs-ds")
    if res.status != 0:
        raise NumericalError(f"linear programming fallback failed: {res.message}")
    return res.x[:K]


def _solve_full_rank(y: np.ndarray, X: np.ndarray, tau: float):
    ztol = _zero_tol(y)
    basis, rank = _simplex.initial_basis(X, 1e-10)
    if rank < X.shape[1]:
        raise NumericalError("design is rank deficient")
    b, status, _ = _simplex.solve_vertex(y, X, tau, basis, ztol, _ITER_FACTOR * y.size + 50)
    solver = "simplex"
    if status != _simplex.OK:
        # ties at the vertex (or no convergence): confirm with an LP solver
        b_lp = _linprog_qr(y, X, tau)
        obj = check_loss(y - X @ b, tau).sum()
        obj_lp = check_loss(y - X @ b_lp, tau).sum()
        if status == _simplex.MAX_ITER or obj_lp < obj - 1e-12 * (1.0 + abs(obj)):
            b, solver = b_lp, "highs"
    return b, solver


def fit_qr(y, X, tau: float) -> QrFit:
    """Minimize the mean check loss of ``y - X b``.

    ``X`` must contain the intercept column when one is wanted. Linearly
    dependent columns are dropped (pivoted QR) and reported as NaN.
    """
    y = np.ascontiguousarray(y, dtype=float).ravel()
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.shape[0]:
        raise DataError("y and X have different numbers of rows")
    if not (0.0 < tau < 1.0):
        raise DataError(f"tau must lie in (0, 1), got {tau}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
        raise DataError("non-finite values passed to the quantile regression")
    keep = _independent_columns(X)
    if keep.size == 0:
        raise NumericalError("the design has rank zero")
    if X.shape[0] < keep.size:
        raise DataError("fewer observations than coefficients")
    Xk = np.ascontiguousarray(X[:, keep])
    b_k, solver = _solve_full_rank(y, Xk, tau)
    coef = np.full(X.shape[1], np.nan)
    coef[keep] = b_k
    resid = y - Xk @ b_k
    ztol = _zero_tol(y)
    return QrFit(
        tau=float(tau),
        coefficients=coef,
        objective=float(check_loss(resid, tau).mean()),
        residuals=resid,
        n_neg=int(np.sum(resid < -ztol)),
        n_zero=int(np.sum(np.abs(resid) <= ztol)),
        dropped=tuple(int(k) for k in np.setdiff1d(np.arange(X.shape[1]), keep)),
        solver=solver,
    )


def _independent_columns(X: np.ndarray) -> np.ndarray:
    if X.shape[1] == 0:
        return np.arange(0)
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0:
        return np.arange(0)
    rank = int(np.sum(d > 1e-10 * d[0] * max(X.shape)))
    return np.sort(piv[:rank])


@dataclass(frozen=True, eq=False)
class FirstStageFit:
    """Group-by-group first-stage fits on a quantile grid.

    Attributes
    ----------
    coefs : ndarray, shape (m, T, K1 + 1)
        Intercept first, then the individual-level slopes. NaN marks a slope
        dropped for that group.
    fitted : ndarray, shape (T, N)
        Fitted values in panel row order.
    """

    taus: tuple
    coefs: np.ndarray
    fitted: np.ndarray
    objective: np.ndarray
    n_neg: np.ndarray
    n_zero: np.ndarray
    counts: np.ndarray
    method: str = "quantile"
    dropped: dict = field(default_factory=dict)
    solver_fallbacks: int = 0

    @property
    def intercepts(self) -> np.ndarray:
        """First-stage intercepts, shape (m, T)."""
        return self.coefs[:, :, 0]

    def certificates(self) -> np.ndarray:
        """Boolean (m, T) array of subgradient-condition checks."""
        n = self.counts[:, None].astype(float)
        target = n * np.asarray(self.taus)[None, :]
        slack = 1e-9 * np.maximum(1.0, target)
        return (self.n_neg <= target + slack) & (target <= self.n_neg + self.n_zero + slack)

    def certificate_failures(self) -> int:
        if self.method != "quantile":
            return 0
        return int(np.sum(~self.certificates()))

    def qr_fit(self, panel: GroupedPanel, j: int, t: int) -> QrFit:
        """Materialize the :class:`QrFit` of group ``j`` at grid point ``t``."""
        sl = panel.group_slice(j)
        resid = panel.y[sl] - self.fitted[t, sl]
        dropped = self.dropped.get(j, ())
        return QrFit(
            tau=self.taus[t],
            coefficients=self.coefs[j, t].copy(),
            objective=float(self.objective[j, t]),
            residuals=resid,
            n_neg=int(self.n_neg[j, t]),
            n_zero=int(self.n_zero[j, t]),
            dropped=tuple(dropped),
        )


def _fitted_from_coefs(panel: GroupedPanel, coefs: np.ndarray) -> np.ndarray:
    # coefs: (m, T, K1+1); NaN slopes contribute nothing
    c = np.nan_to_num(coefs, nan=0.0)
    per_row = c[panel.codes]  # (N, T, K1+1)
    return per_row[:, :, 0].T + np.einsum("ntk,nk->tn", per_row[:, :, 1:], panel.X1)


def fit_first_stage(panel: GroupedPanel, grid) -> FirstStageFit:
    """Quantile regression of ``y`` on ``[1, x1]`` for every group and quantile."""
    grid = QuantileGrid(grid)
    taus = np.asarray(grid, dtype=float)
    y = np.ascontiguousarray(panel.y)
    X1 = np.ascontiguousarray(panel.X1)
    starts = np.ascontiguousarray(panel.starts, dtype=np.int64)
    coefs, status, objective, n_neg, n_zero = _simplex.fit_groups(
        y, X1, starts, taus, ZERO_TOL, _ITER_FACTOR
    )
    dropped: dict = {}
    fallbacks = 0
    for j, t in zip(*np.nonzero(status != _simplex.OK)):
        sl = panel.group_slice(j)
        Xj = np.column_stack([np.ones(sl.stop - sl.start), panel.X1[sl]])
        try:
            fit = fit_qr(panel.y[sl], Xj, taus[t])
        except (DataError, NumericalError) as exc:
            raise type(exc)(f"group {panel.labels[j]!r}, tau={taus[t]}: {exc}") from None
        coefs[j, t] = fit.coefficients
        objective[j, t] = fit.objective
        n_neg[j, t] = fit.n_neg
        n_zero[j, t] = fit.n_zero
        if fit.dropped:
            dropped[int(j)] = fit.dropped
        fallbacks += fit.solver != "simplex"
    return FirstStageFit(
        taus=grid.taus,
        coefs=coefs,
        fitted=_fitted_from_coefs(panel, coefs),
        objective=objective,
        n_neg=n_neg,
        n_zero=n_zero,
        counts=np.asarray(panel.counts),
        dropped=dropped,
        solver_fallbacks=fallbacks,
    )


def fit_ols_first_stage(panel: GroupedPanel) -> FirstStageFit:
    """Least squares of ``y`` on ``[1, x1]`` inside every group.

    The result has a single pseudo-quantile (``taus == (0.5,)``) so it plugs
    into the same second stage as the quantile fits.
    """
    m, K = panel.n_groups, panel.K1 + 1
    coefs = np.empty((m, 1, K))
    for j in range(m):
        sl = panel.group_slice(j)
        Xj = np.column_stack([np.ones(sl.stop - sl.start), panel.X1[sl]])
        if np.linalg.matrix_rank(Xj) < K:
            raise NumericalError(f"singular first-stage design in group {panel.labels[j]!r}")
        coefs[j, 0], *_ = np.linalg.lstsq(Xj, panel.y[sl], rcond=None)
    nan = np.full((m, 1), np.nan)
    zeros = np.zeros((m, 1), dtype=int)
    return FirstStageFit(
        taus=(0.5,),
        coefs=coefs,
        fitted=_fitted_from_coefs(panel, coefs),
        objective=nan,
        n_neg=zeros,
        n_zero=zeros,
        counts=np.asarray(panel.counts),
        method="ols",
    )
