"""Second stage: linear GMM on first-stage fitted values.

Also hosts the comparator that regresses first-stage intercepts on
group-level regressors, and a one-step least squares GMM routine used to
cross-check the two-step estimator with a least squares first stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .exceptions import ConfigError, DataError, IdentificationError
from .inference import (
    TestResult,
    cluster_scores,
    efficient_weight,
    j_test,
    jackknife_sigma,
    omega_from_scores,
    sigma_blocks,
    z_test,
)
from .panel import GroupedPanel
from .qr import FirstStageFit

__all__ = [
    "MdEstimate",
    "MdResults",
    "ClpEstimate",
    "WEIGHTINGS",
    "md_fit",
    "clp_fit",
    "ls_one_step",
]

WEIGHTINGS = ("auto", "identity", "two_stage_ls", "efficient")
VCOV_TYPES = ("cluster", "jackknife")
SINGULAR_TOL = 1e-10


def _solve(A: np.ndarray, B: np.ndarray, what: str) -> np.ndarray:
    """Solve ``A x = B`` through an SVD, refusing near-singular ``A``."""
    U, s, Vt = np.linalg.svd(A)
    if s.size == 0 or s[-1] <= SINGULAR_TOL * s[0]:
        smin = float(s[-1]) if s.size else 0.0
        raise IdentificationError(f"{what} is singular (smallest singular value {smin:.3g})", singular_value=smin)
    return Vt.T @ ((U.T @ B) / (s[:, None] if B.ndim == 2 else s))


@dataclass(frozen=True, eq=False)
class MdEstimate:
    """Second-stage GMM fit at one quantile.

    ``G_hat`` maps the moment vector ``Z'y/N`` to the coefficients,
    ``scores`` holds per-cluster sums of ``z_i u_i`` and ``omega`` the
    cluster-robust moment variance computed from the final residuals.
    """

    tau: float
    delta: np.ndarray
    G_hat: np.ndarray
    residuals: np.ndarray
    weighting: np.ndarray | None
    S_ZX: np.ndarray
    flag: str
    scores: np.ndarray
    omega: np.ndarray
    n_obs: int
    n_clusters: int
    first_step_omega: np.ndarray | None = None
    truncated_weight: bool = False
    x_names: tuple = ()
    z_names: tuple = ()
    dof_correction: bool = False
    jackknife: np.ndarray | None = None

    @property
    def n_params(self) -> int:
        return self.delta.size

    @property
    def n_instruments(self) -> int:
        return self.S_ZX.shape[0]

    @property
    def cov(self) -> np.ndarray:
        if self.jackknife is not None:
            return jackknife_sigma([self.jackknife])
        return sigma_blocks([self.G_hat], [[self.omega]], self.n_clusters)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def moment_residual(self, Z: np.ndarray) -> np.ndarray:
        return Z.T @ self.residuals / self.n_obs

    def j_test(self) -> TestResult:
        """Overidentification test; needs an efficient (two-step) fit."""
        if self.n_instruments > self.n_params and self.flag != "efficient":
            raise ConfigError(f"the overidentification test needs efficient weighting, got {self.flag!r}")
        return j_test(self)


def md_fit(
    yhat,
    X,
    Z,
    weighting="auto",
    clusters=None,
    tau: float = float("nan"),
    x_names=None,
    z_names=None,
    dof_correction: bool = False,
    vcov: str = "cluster",
) -> MdEstimate:
    """Linear GMM regression of ``yhat`` on ``X`` with instruments ``Z``.

    Parameters
    ----------
    yhat : array_like, shape (N,)
        First-stage fitted values (or any dependent variable).
    X, Z : array_like
        Regressors (N, K) and instruments (N, L), ``L >= K``.
    weighting : {"auto", "identity", "two_stage_ls", "efficient"} or ndarray
        Weighting matrix or preset. ``"two_stage_ls"`` uses ``(Z'Z/N)^-1``;
        ``"efficient"`` runs two-step GMM starting from it; ``"auto"`` is
        efficient GMM when overidentified. Ignored when ``L == K``.
    clusters : array_like, optional
        Cluster index per row for the robust moment variance (default: one
        cluster per row).
    vcov : {"cluster", "jackknife"}
        ``"cluster"`` is the plug-in cluster-robust covariance;
        ``"jackknife"`` recomputes the coefficients leaving out one cluster at
        a time (weighting matrix held fixed), a small-sample alternative when
        there are few clusters.
    """
    if vcov not in VCOV_TYPES:
        raise ConfigError(f"unknown covariance type {vcov!r}; expected one of {', '.join(VCOV_TYPES)}")
    y = np.asarray(yhat, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if X.ndim != 2 or Z.ndim != 2 or X.shape[0] != y.size or Z.shape[0] != y.size:
        raise DataError(f"dimension mismatch: y {y.shape}, X {X.shape}, Z {Z.shape}")
    N, K = X.shape
    L = Z.shape[1]
    if L < K:
        raise IdentificationError(f"{L} instruments for {K} regressors: order condition fails")
    S = Z.T @ X / N
    zy = Z.T @ y / N
    if clusters is None:
        clusters = np.arange(N)
    _, codes = np.unique(np.asarray(clusters), return_inverse=True)
    codes = codes.ravel()
    G = int(codes.max()) + 1

    first_omega = None
    truncated = False
    if L == K:
        G_hat = _solve(S, np.eye(K), "the instrument cross-moment matrix")
        W, flag = None, "exact"
    else:
        if isinstance(weighting, str):
            if weighting not in WEIGHTINGS:
                raise ConfigError(f"unknown weighting {weighting!r}")
            flag = "efficient" if weighting == "auto" else weighting
            if flag == "identity":
                W = np.eye(L)
            else:
                W = np.linalg.pinv(Z.T @ Z / N)
                W = 0.5 * (W + W.T)
        else:
            W = np.asarray(weighting, dtype=float)
            if W.shape != (L, L):
                raise DataError(f"weighting matrix has shape {W.shape}, expected ({L}, {L})")
            flag = "custom"
        G_hat = _solve(S.T @ W @ S, S.T @ W, "S_ZX' W S_ZX")
        if flag == "efficient":
            u1 = y - X @ (G_hat @ zy)
            first_omega = omega_from_scores(*(2 * (cluster_scores(Z, u1, codes),)), N, dof_correction)
            W, truncated = efficient_weight(first_omega)
            G_hat = _solve(S.T @ W @ S, S.T @ W, "S_ZX' W S_ZX")
    delta = G_hat @ zy
    u = y - X @ delta
    scores = cluster_scores(Z, u, codes)
    jk = _jackknife(y, X, Z, W, codes, G) if vcov == "jackknife" else None
    return MdEstimate(
        tau=float(tau),
        delta=delta,
        G_hat=G_hat,
        residuals=u,
        weighting=W,
        S_ZX=S,
        flag=flag,
        scores=scores,
        omega=omega_from_scores(scores, scores, N, dof_correction),
        n_obs=N,
        n_clusters=G,
        first_step_omega=first_omega,
        truncated_weight=truncated,
        x_names=tuple(x_names) if x_names is not None else tuple(f"x{k}" for k in range(K)),
        z_names=tuple(z_names) if z_names is not None else tuple(f"z{k}" for k in range(L)),
        dof_correction=dof_correction,
        jackknife=jk,
    )


def _jackknife(y, X, Z, W, codes, G) -> np.ndarray:
    """Leave-one-cluster-out coefficients, shape (G, K)."""
    if G < 3:
        raise ConfigError("the jackknife covariance needs at least three clusters")
    L, K = Z.shape[1], X.shape[1]
    zx = np.zeros((G, L, K))
    zy = np.zeros((G, L))
    np.add.at(zx, codes, Z[:, :, None] * X[:, None, :])
    np.add.at(zy, codes, Z * y[:, None])
    ZXm = zx.sum(axis=0)[None] - zx
    Zym = zy.sum(axis=0)[None] - zy
    if W is not None:
        WZX = W[None] @ ZXm
        A = np.swapaxes(ZXm, 1, 2) @ WZX
        b = np.einsum("glk,gl->gk", WZX, Zym)
    else:
        A, b = ZXm, Zym
    sv = np.linalg.svd(A, compute_uv=False)
    if np.any(sv[:, -1] <= SINGULAR_TOL * sv[:, 0]):
        raise IdentificationError("a leave-one-cluster-out sample does not identify the coefficients")
    return np.linalg.solve(A, b[:, :, None])[:, :, 0]


@dataclass(eq=False)
class MdResults:
    """Second-stage fits over a quantile grid with joint inference."""

    estimates: list
    x_names: tuple
    estimator: str = ""
    meta: dict = field(default_factory=dict)
    first_stage: object = field(default=None, repr=False)

    @property
    def taus(self) -> tuple:
        return tuple(e.tau for e in self.estimates)

    @property
    def coef(self) -> np.ndarray:
        """Coefficients, shape (T, K)."""
        return np.vstack([e.delta for e in self.estimates])

    def sigma(self) -> np.ndarray:
        """Stacked (TK, TK) covariance across the grid."""
        est = self.estimates
        if all(e.jackknife is not None for e in est):
            return jackknife_sigma([e.jackknife for e in est])
        N = est[0].n_obs
        dof = est[0].dof_correction
        omegas = [[omega_from_scores(a.scores, b.scores, N, dof) for b in est] for a in est]
        return sigma_blocks([e.G_hat for e in est], omegas, est[0].n_clusters)

    @property
    def se(self) -> np.ndarray:
        """Standard errors, shape (T, K)."""
        return np.vstack([e.se for e in self.estimates])

    def conf_int(self, level: float = 0.95) -> np.ndarray:
        """Pointwise intervals, shape (T, K, 2)."""
        if not 0.0 < level < 1.0:
            raise ConfigError("confidence level must lie in (0, 1)")
        q = stats.norm.ppf(0.5 + level / 2.0)
        c, s = self.coef, self.se
        return np.stack([c - q * s, c + q * s], axis=-1)

    def z_test(self, eta, null_value: float = 0.0) -> TestResult:
        return z_test(self.coef.ravel(), self.sigma(), eta, null_value)

    def contrast(self, name: str, tau_a: float, tau_b: float | None = None) -> np.ndarray:
        """Contrast vector selecting ``name`` at ``tau_a`` (minus at ``tau_b``)."""
        K = len(self.x_names)
        eta = np.zeros(len(self.estimates) * K)
        k = self.x_names.index(name)
        eta[self.taus.index(tau_a) * K + k] = 1.0
        if tau_b is not None:
            eta[self.taus.index(tau_b) * K + k] -= 1.0
        return eta

    def j_tests(self) -> list:
        return [e.j_test() for e in self.estimates if e.flag == "efficient"]

    def to_dict(self, level: float = 0.95) -> dict:
        ci = self.conf_int(level)
        out = {"estimator": self.estimator, "confidence_level": level, "quantiles": []}
        for t, e in enumerate(self.estimates):
            rows = [
                {
                    "name": name,
                    "estimate": float(e.delta[k]),
                    "se": float(e.se[k]),
                    "ci_lower": float(ci[t, k, 0]),
                    "ci_upper": float(ci[t, k, 1]),
                }
                for k, name in enumerate(self.x_names)
            ]
            entry = {
                "tau": e.tau,
                "weighting": e.flag,
                "n_instruments": e.n_instruments,
                "coefficients": rows,
            }
            if e.truncated_weight:
                entry["weight_truncated"] = True
            out["quantiles"].append(entry)
        tests = [dict(tau=e.tau, **e.j_test().to_dict()) for e in self.estimates if e.flag == "efficient"]
        if tests:
            out["tests"] = {"overidentification": tests}
        out.update(self.meta)
        return out


@dataclass(frozen=True)
class ClpEstimate:
    """Group-level regression of first-stage intercepts."""

    tau: float
    gamma: np.ndarray
    cov: np.ndarray
    names: tuple

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def clp_fit(
    first_stage: FirstStageFit,
    panel: GroupedPanel,
    tau: float,
    instruments=None,
) -> ClpEstimate:
    """Regress the first-stage intercepts on the group-level regressors.

    One observation per group. ``instruments`` (group-level, either one row
    per observation or one row per group, same number of columns as
    ``panel.X2``) switches from OLS to just-identified IV. Standard errors
    are heteroskedasticity robust without small-sample correction.
    """
    t = first_stage.taus.index(tau)
    b0 = first_stage.intercepts[:, t]
    X2 = panel.group_rows(panel.X2)
    if instruments is None:
        Zg = X2
    else:
        Zg = np.asarray(instruments, dtype=float)
        if Zg.ndim == 1:
            Zg = Zg[:, None]
        if Zg.shape[0] == panel.n_obs:
            Zg = panel.group_rows(Zg)
        if Zg.shape != X2.shape:
            raise DataError(f"group-level instruments have shape {Zg.shape}, expected {X2.shape}")
    A = Zg.T @ X2
    Ainv = _solve(A, np.eye(A.shape[0]), "the group-level design")
    gamma = Ainv @ (Zg.T @ b0)
    e = b0 - X2 @ gamma
    meat = (Zg * e[:, None] ** 2).T @ Zg
    cov = Ainv @ meat @ Ainv.T
    return ClpEstimate(tau=float(tau), gamma=gamma, cov=0.5 * (cov + cov.T), names=panel.x2_names)


def ls_one_step(y, X, Z, W=None) -> np.ndarray:
    """One-step linear GMM of ``y`` on ``X`` with instruments ``Z``.

    With ``W=None`` this is two-stage least squares computed by projecting
    ``X`` on ``Z`` with a least squares solver.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if W is None:
        coef, *_ = np.linalg.lstsq(Z, X, rcond=None)
        Xhat = Z @ coef
        delta, *_ = np.linalg.lstsq(Xhat, y, rcond=None)
        return delta
    ZX = Z.T @ X
    return np.linalg.solve(ZX.T @ W @ ZX, ZX.T @ W @ (Z.T @ y))
