"""End-to-end pipeline and a scikit-learn style estimator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConfigError, DataError
from .instruments import InstrumentSpec, build_design, build_problem
from .md import WEIGHTINGS, MdResults, md_fit
from .optimal_iv import (
    fe_optimal_instrument,
    first_stage_variance,
    group_effects,
    nerlove_sigma_alpha,
    re_optimal_instrument,
)
from .panel import GroupedPanel, QuantileGrid, filter_min_dof, within_demean
from .qr import FirstStageFit, check_loss, fit_first_stage, fit_ols_first_stage

__all__ = ["estimate", "QuantileMDRegressor"]


def _first_stage(panel: GroupedPanel, taus, first_stage) -> FirstStageFit:
    if isinstance(first_stage, FirstStageFit):
        return first_stage
    if first_stage in (None, "quantile"):
        return fit_first_stage(panel, QuantileGrid(taus))
    if first_stage == "ols":
        return fit_ols_first_stage(panel)
    raise ConfigError(f"unknown first-stage method {first_stage!r}")


def _optimal_fit(panel, fs, t, spec, *, dof_correction, powell_bandwidth, sigma_alpha_override, oi_method, vcov):
    tau = fs.taus[t]
    yhat = fs.fitted[t]
    clusters = panel.cluster_codes()
    V = first_stage_variance(fs, panel, tau, powell_bandwidth)
    info = {"tau": tau, "median_bandwidth": float(np.median(V.bandwidth))}
    if spec.kind == "optimal_fe":
        Z = fe_optimal_instrument(panel, V, method=oi_method)
        est = md_fit(yhat, panel.X1, Z, clusters=clusters, tau=tau, x_names=panel.x1_names,
                     z_names=tuple(f"optimal({n})" for n in panel.x1_names), dof_correction=dof_correction, vcov=vcov)
        return est, info
    if sigma_alpha_override is not None:
        s2 = float(sigma_alpha_override)
        if s2 < 0:
            raise ConfigError("sigma_alpha_override must be nonnegative")
    elif panel.K1:
        fe = md_fit(yhat, panel.X1, within_demean(panel), clusters=clusters, tau=tau)
        s2 = nerlove_sigma_alpha(group_effects(fs, panel, tau, fe.delta))
    else:
        s2 = nerlove_sigma_alpha(group_effects(fs, panel, tau, np.zeros(0)))
    info["sigma2_alpha"] = s2
    X, names = build_design(panel)
    Z = re_optimal_instrument(panel, V, s2, method=oi_method)
    est = md_fit(yhat, X, Z, clusters=clusters, tau=tau, x_names=names,
                 z_names=tuple(f"optimal({n})" for n in names), dof_correction=dof_correction, vcov=vcov)
    return est, info


def estimate(
    panel: GroupedPanel,
    spec="pooled",
    taus=(0.5,),
    *,
    weighting="auto",
    dof_correction: bool = False,
    powell_bandwidth: float | None = None,
    sigma_alpha_override: float | None = None,
    first_stage="quantile",
    oi_method: str = "lowrank",
    vcov: str = "cluster",
) -> MdResults:
    """Two-step quantile minimum distance estimation.

    Parameters
    ----------
    panel : GroupedPanel
    spec : InstrumentSpec, str or mapping
        Instrument recipe (see :class:`qpanel.instruments.InstrumentSpec`).
    taus : sequence of float
        Quantile grid.
    weighting : str or ndarray
        Second-stage weighting, see :func:`qpanel.md.md_fit`.
    first_stage : {"quantile", "ols"} or FirstStageFit
        Group-by-group quantile regressions (default), least squares, or a
        precomputed fit.
    vcov : {"cluster", "jackknife"}
        Covariance estimator, see :func:`qpanel.md.md_fit`.

    Returns
    -------
    MdResults
    """
    if not isinstance(spec, InstrumentSpec):
        spec = InstrumentSpec.from_mapping(spec)
    if isinstance(weighting, str) and weighting not in WEIGHTINGS:
        raise ConfigError(f"unknown weighting {weighting!r}; expected one of {', '.join(WEIGHTINGS)}")
    fs = _first_stage(panel, taus, first_stage)
    if spec.tau_dependent and fs.method != "quantile":
        raise ConfigError("optimal instruments require the quantile first stage")
    clusters = panel.cluster_codes()
    estimates, extra = [], []
    if spec.tau_dependent:
        for t in range(len(fs.taus)):
            est, info = _optimal_fit(
                panel, fs, t, spec, dof_correction=dof_correction, powell_bandwidth=powell_bandwidth,
                sigma_alpha_override=sigma_alpha_override, oi_method=oi_method, vcov=vcov,
            )
            estimates.append(est)
            extra.append(info)
    else:
        X, Z, x_names, z_names = build_problem(panel, spec)
        for t, tau in enumerate(fs.taus):
            estimates.append(
                md_fit(fs.fitted[t], X, Z, weighting=weighting, clusters=clusters, tau=tau,
                       x_names=x_names, z_names=z_names, dof_correction=dof_correction, vcov=vcov)
            )
    meta = {
        "first_stage": {
            "method": fs.method,
            "certificate_failures": fs.certificate_failures(),
            "solver_fallbacks": fs.solver_fallbacks,
            "rank_deficient_groups": [panel.labels[j] for j in sorted(fs.dropped)],
        },
        "n_obs": panel.n_obs,
        "n_groups": panel.n_groups,
        "n_clusters": estimates[0].n_clusters,
        "vcov": vcov,
    }
    if extra:
        meta["optimal_instrument"] = extra
    return MdResults(estimates=estimates, x_names=estimates[0].x_names, estimator=spec.kind, meta=meta,
                     first_stage=fs)


class QuantileMDRegressor(RegressorMixin, BaseEstimator):
    """Two-step minimum distance quantile regression for grouped data.

    Parameters
    ----------
    quantiles : float or sequence of float, default=0.5
        Quantile indices, strictly increasing inside (0, 1).
    estimator : str, default="pooled"
        Instrument recipe: ``pooled``, ``between``, ``fixed_effects``,
        ``random_effects_gmm``, ``hausman_taylor``, ``external``,
        ``optimal_re`` or ``optimal_fe`` (short aliases accepted).
    estimator_options : dict, optional
        Extra :class:`InstrumentSpec` fields (``x1_exog``, ``x2_exog``,
        ``instruments``, ``endogenous``, ``x1_instrument``).
    weighting : str, default="auto"
    dof_correction : bool, default=False
    min_dof : int, default=0
        Groups with fewer first-stage degrees of freedom are dropped.
    add_intercept : bool, default=True
    powell_bandwidth, sigma_alpha_override : float, optional
        Plug-in overrides for the optimal-instrument estimators.
    vcov : {"cluster", "jackknife"}, default="cluster"

    Attributes
    ----------
    coef_ : ndarray, shape (n_quantiles, n_coefficients)
    feature_names_ : tuple of str
    results_ : MdResults
    dropped_groups_ : list
    """

    def __init__(
        self,
        quantiles=0.5,
        estimator="pooled",
        estimator_options=None,
        weighting="auto",
        dof_correction=False,
        min_dof=0,
        add_intercept=True,
        powell_bandwidth=None,
        sigma_alpha_override=None,
        vcov="cluster",
    ):
        self.quantiles = quantiles
        self.estimator = estimator
        self.estimator_options = estimator_options
        self.weighting = weighting
        self.dof_correction = dof_correction
        self.min_dof = min_dof
        self.add_intercept = add_intercept
        self.powell_bandwidth = powell_bandwidth
        self.sigma_alpha_override = sigma_alpha_override
        self.vcov = vcov

    def fit(self, X, y, groups, X_group=None, Z=None, clusters=None):
        """Fit on individual-level regressors ``X`` and group labels ``groups``.

        ``X_group`` holds group-level regressors (constant within groups) and
        ``Z`` external instruments.
        """
        X, y = check_X_y(X, y, y_numeric=True)
        n = X.shape[0]
        X2 = None if X_group is None else check_array(X_group, ensure_2d=False)
        Zx = None if Z is None else check_array(Z, ensure_2d=False)
        opts = self.estimator_options or {}
        panel = GroupedPanel.from_arrays(
            y, X, X2, np.asarray(groups),
            x1_names=opts.get("x1_names"), x2_names=opts.get("x2_names"),
            Z_ext=Zx, z_names=opts.get("z_names"), clusters=clusters,
            add_intercept=self.add_intercept,
        )
        if panel.n_obs != n:
            raise DataError("row count changed while building the panel")  # pragma: no cover
        panel, dropped = filter_min_dof(panel, self.min_dof)
        spec = InstrumentSpec.from_mapping(
            {k: v for k, v in {**opts, "kind": self.estimator}.items() if k not in ("x1_names", "x2_names", "z_names")}
        )
        grid = QuantileGrid(self.quantiles)
        self.results_ = estimate(
            panel, spec, grid.taus, weighting=self.weighting, dof_correction=self.dof_correction,
            powell_bandwidth=self.powell_bandwidth, sigma_alpha_override=self.sigma_alpha_override,
            vcov=self.vcov,
        )
        self.quantiles_ = grid.taus
        self.coef_ = self.results_.coef
        self.feature_names_ = self.results_.x_names
        self.n_features_in_ = X.shape[1]
        self.n_group_features_ = 0 if X2 is None else (1 if X2.ndim == 1 else X2.shape[1])
        self.within_only_ = spec.within_only
        self.dropped_groups_ = dropped
        return self

    def predict(self, X, X_group=None):
        """Conditional quantile predictions, shape (n,) or (n, n_quantiles).

        Estimators that only identify within-group slopes return ``X @ beta``
        (the group-specific level is not identified).
        """
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        K1 = self.n_features_in_
        pred = X @ self.coef_[:, :K1].T
        if not self.within_only_:
            parts = []
            if self.n_group_features_:
                if X_group is None:
                    raise DataError("group-level regressors are required for prediction")
                Xg = check_array(X_group, ensure_2d=False)
                parts.append(Xg.reshape(X.shape[0], -1))
            if self.add_intercept:
                parts.append(np.ones((X.shape[0], 1)))
            if parts:
                pred = pred + np.hstack(parts) @ self.coef_[:, K1:].T
        return pred[:, 0] if pred.shape[1] == 1 else pred

    def score(self, X, y, X_group=None, sample_weight=None):
        """Negative mean check loss averaged over the fitted quantiles."""
        pred = self.predict(X, X_group)
        pred = pred[:, None] if pred.ndim == 1 else pred
        y = np.asarray(y, dtype=float)
        losses = [np.average(check_loss(y - pred[:, t], tau), weights=sample_weight)
                  for t, tau in enumerate(self.quantiles_)]
        return -float(np.mean(losses))
