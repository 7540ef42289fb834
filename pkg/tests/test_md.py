import numpy as np
import pytest
from conftest import random_unbalanced_panel
from oracles import (
    between_estimator,
    gmm,
    hausman_taylor,
    ols,
    rel_err,
    sandwich,
    tsls,
    two_step_gmm,
    within_estimator,
)

from qpanel.estimator import estimate
from qpanel.exceptions import ConfigError, DataError, IdentificationError
from qpanel.instruments import InstrumentSpec, build_problem
from qpanel.md import clp_fit, ls_one_step, md_fit
from qpanel.qr import fit_first_stage, fit_ols_first_stage

TOL = 1e-8
PANELS = [random_unbalanced_panel(np.random.default_rng(100 + i)) for i in range(20)]


def _md(panel, kind, weighting="two_stage_ls", **spec):
    fs = fit_ols_first_stage(panel)
    X, Z, _, _ = build_problem(panel, InstrumentSpec(kind=kind, **spec))
    return md_fit(fs.fitted[0], X, Z, weighting=weighting, clusters=panel.codes), X, Z


@pytest.mark.parametrize("i", range(20))
def test_ols_first_stage_md_equals_one_step_estimators(i):
    p = PANELS[i]
    X = np.hstack([p.X1, p.X2])
    # pooled: plain OLS
    est, _, _ = _md(p, "pooled")
    assert rel_err(est.delta, ols(p.y, X)) < TOL
    # within
    est, _, _ = _md(p, "fixed_effects")
    assert rel_err(est.delta, within_estimator(p.y, p.X1, p.codes)) < TOL
    # between
    est, _, _ = _md(p, "between")
    assert rel_err(est.delta, between_estimator(p.y, p.X1, p.X2, p.codes)) < TOL
    # random-effects GMM with 2SLS weighting and with efficient weighting
    est, Xr, Zr = _md(p, "random_effects_gmm")
    assert rel_err(est.delta, tsls(p.y, Xr, Zr)) < TOL
    assert rel_err(est.delta, ls_one_step(p.y, Xr, Zr)) < TOL
    est, _, _ = _md(p, "random_effects_gmm", weighting="efficient")
    assert rel_err(est.delta, two_step_gmm(p.y, Xr, Zr, p.codes)[0]) < TOL


@pytest.mark.parametrize("i", range(20))
def test_ols_first_stage_md_equals_hausman_taylor(i):
    p = PANELS[i]
    # leading group-level columns endogenous (as many as the order condition
    # allows), the rest and the intercept exogenous
    n_en2 = min(p.K2 - 1, p.K1)
    ex2 = list(range(n_en2, p.K2))
    ex1 = list(range(max(n_en2, 1)))
    spec = dict(x1_exog=[p.x1_names[k] for k in ex1], x2_exog=[p.x2_names[k] for k in ex2])
    est, _, _ = _md(p, "hausman_taylor", **spec)
    assert rel_err(est.delta, hausman_taylor(p.y, p.X1, p.X2, p.codes, ex1, ex2)) < TOL


@pytest.mark.parametrize("i", range(20))
def test_clustered_covariance_equals_one_step_sandwich(i):
    p = PANELS[i]
    for weighting in ("two_stage_ls", "efficient"):
        est, X, Z = _md(p, "random_effects_gmm", weighting=weighting)
        ref = sandwich(p.y, X, Z, est.weighting, est.delta, p.codes)
        assert rel_err(est.cov, ref) < TOL
    est, X, Z = _md(p, "fixed_effects")
    ref = sandwich(p.y, X, Z, np.eye(Z.shape[1]), est.delta, p.codes)
    assert rel_err(est.cov, ref) < TOL


def test_weighting_presets(small_panel):
    p = small_panel
    fs = fit_ols_first_stage(p)
    X, Z, _, _ = build_problem(p, InstrumentSpec("random_effects_gmm"))
    y = fs.fitted[0]
    ident = md_fit(y, X, Z, weighting="identity")
    assert ident.flag == "identity"
    assert rel_err(ident.delta, gmm(y, X, Z, np.eye(Z.shape[1]))) < TOL
    W = np.diag(np.arange(1.0, Z.shape[1] + 1))
    custom = md_fit(y, X, Z, weighting=W)
    assert custom.flag == "custom" and rel_err(custom.delta, gmm(y, X, Z, W)) < TOL
    assert md_fit(y, X, Z).flag == "efficient"
    with pytest.raises(ConfigError):
        md_fit(y, X, Z, weighting="optimal")
    with pytest.raises(DataError):
        md_fit(y, X, Z, weighting=np.eye(2))


def test_exactly_identified_ignores_weighting(small_panel):
    p = small_panel
    X, Z, _, _ = build_problem(p, InstrumentSpec("pooled"))
    a = md_fit(p.y, X, Z, weighting="identity")
    b = md_fit(p.y, X, Z, weighting="efficient")
    assert a.flag == b.flag == "exact"
    np.testing.assert_allclose(a.delta, b.delta, rtol=1e-12)
    with pytest.raises(IdentificationError):
        a.j_test()

def test_identification_failures(small_panel):
    p = small_panel
    X = np.hstack([p.X1, p.X2])
    with pytest.raises(IdentificationError):
        md_fit(p.y, X, X[:, :1])
    Z = np.column_stack([X[:, 0], X[:, 0], X[:, 1:-1], X[:, -1]])
    Z = Z[:, : X.shape[1]]
    with pytest.raises(IdentificationError):
        md_fit(p.y, X, Z)


def test_j_test_only_for_efficient_fits(small_panel):
    p = small_panel
    X, Z, _, _ = build_problem(p, InstrumentSpec("random_effects_gmm"))
    with pytest.raises(ConfigError):
        md_fit(p.y, X, Z, weighting="two_stage_ls", clusters=p.codes).j_test()
    j = md_fit(p.y, X, Z, clusters=p.codes).j_test()
    assert j.dof == p.K1 and j.statistic >= 0 and 0 <= j.p_value <= 1


def test_j_statistic_matches_textbook(small_panel):
    p = small_panel
    X, Z, _, _ = build_problem(p, InstrumentSpec("random_effects_gmm"))
    est = md_fit(p.y, X, Z, clusters=p.codes)
    d, W = two_step_gmm(p.y, X, Z, p.codes)
    N, G = p.n_obs, p.n_groups
    gbar = Z.T @ (p.y - X @ d) / N
    # W here inverts sum s s' / N; the moment variance is G/N times that
    J = G * gbar @ (W * N / G) @ gbar
    assert est.j_test().statistic == pytest.approx(J, rel=1e-8)


def test_jackknife_matches_explicit_leave_one_out(small_panel):
    p = small_panel
    X, Z, _, _ = build_problem(p, InstrumentSpec("random_effects_gmm"))
    est = md_fit(p.y, X, Z, weighting="two_stage_ls", clusters=p.codes, vcov="jackknife")
    W = est.weighting
    reps = np.array([gmm(p.y[p.codes != g], X[p.codes != g], Z[p.codes != g], W) for g in range(p.n_groups)])
    G = p.n_groups
    D = reps - reps.mean(axis=0)
    ref = (G - 1) / G * D.T @ D
    assert rel_err(est.cov, ref) < 1e-10
    with pytest.raises(ConfigError):
        md_fit(p.y, X, Z, vcov="bootstrap")


def test_dof_correction_scales_covariance(small_panel):
    p = small_panel
    X, Z, _, _ = build_problem(p, InstrumentSpec("pooled"))
    a = md_fit(p.y, X, Z, clusters=p.codes)
    b = md_fit(p.y, X, Z, clusters=p.codes, dof_correction=True)
    G = p.n_groups
    np.testing.assert_allclose(b.cov, a.cov * G / (G - 1), rtol=1e-12)


def test_clp_is_group_level_ols_of_intercepts(small_panel):
    p = small_panel
    fs = fit_first_stage(p, (0.5,))
    res = clp_fit(fs, p, 0.5)
    X2g = p.group_rows(p.X2)
    b0 = fs.intercepts[:, 0]
    g = ols(b0, X2g)
    np.testing.assert_allclose(res.gamma, g, rtol=1e-10)
    e = b0 - X2g @ g
    bread = np.linalg.inv(X2g.T @ X2g)
    np.testing.assert_allclose(res.cov, bread @ (X2g.T * e**2) @ X2g @ bread, rtol=1e-10)


def test_results_container(small_panel):
    p = small_panel
    r = estimate(p, "random_effects_gmm", (0.25, 0.5, 0.75))
    T, K = 3, p.K1 + p.K2
    assert r.coef.shape == (T, K) and r.se.shape == (T, K)
    ci = r.conf_int(0.9)
    assert ci.shape == (T, K, 2) and np.all(ci[..., 0] < ci[..., 1])
    S = r.sigma()
    assert S.shape == (T * K, T * K)
    np.testing.assert_allclose(np.sqrt(np.diag(S)).reshape(T, K), r.se, rtol=1e-10)
    eta = r.contrast("x1_0", 0.75, 0.25)
    t = r.z_test(eta)
    diff = r.coef[2, 0] - r.coef[0, 0]
    assert t.statistic == pytest.approx(diff / np.sqrt(eta @ S @ eta))
    doc = r.to_dict()
    assert len(doc["quantiles"]) == 3 and "overidentification" in doc["tests"]
    with pytest.raises(ConfigError):
        r.conf_int(1.5)
