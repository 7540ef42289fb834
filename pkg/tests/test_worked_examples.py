"""Small worked examples and structural invariances."""

import numpy as np
import pytest

from qpanel.estimator import estimate
from qpanel.inference import efficient_weight, omega_hat, sigma_blocks, z_test
from qpanel.instruments import InstrumentSpec, build_problem
from qpanel.md import md_fit
from qpanel.montecarlo import DgpSpec, draw, replication_rng
from qpanel.optimal_iv import (
    group_effects,
    nerlove_sigma_alpha,
    powell_vj,
    re_optimal_instrument,
)
from qpanel.panel import GroupedPanel, within_demean
from qpanel.qr import fit_first_stage, fit_ols_first_stage, fit_qr


def test_qr_constant_and_median_examples():
    fit = fit_qr(np.ones(3), np.ones((3, 1)), 0.5)
    assert fit.coefficients[0] == pytest.approx(1.0) and fit.objective == pytest.approx(0.0)
    fit = fit_qr(np.array([1.0, 2.0, 3.0, 10.0]), np.ones((4, 1)), 0.5)
    assert 2.0 <= fit.coefficients[0] <= 3.0
    assert fit.n_neg <= 2 <= fit.n_neg + fit.n_zero


def test_qr_equivariance_in_outcome():
    rng = np.random.default_rng(8)
    X = np.column_stack([np.ones(30), rng.normal(size=(30, 2))])
    y = rng.normal(size=30)
    c = np.array([0.5, -1.0, 2.0])
    b0 = fit_qr(y, X, 0.3).coefficients
    b1 = fit_qr(2.5 * y + X @ c, X, 0.3).coefficients
    np.testing.assert_allclose(b1, 2.5 * b0 + c, rtol=1e-8, atol=1e-10)


def test_first_stage_constant_groups_fit_exactly():
    y = np.array([1.0, 1.0, 1.0, 4.0, 4.0, 4.0])
    p = GroupedPanel.from_arrays(y, None, None, [0, 0, 0, 1, 1, 1])
    fs = fit_first_stage(p, (0.1, 0.5, 0.9))
    np.testing.assert_allclose(fs.fitted, np.tile(y, (3, 1)))


def test_first_stage_ignores_group_order(small_panel):
    p = small_panel
    rev = p.subset_groups(np.arange(p.n_groups)[::-1])
    a, b = fit_first_stage(p, (0.5,)), fit_first_stage(rev, (0.5,))
    np.testing.assert_allclose(a.coefs[::-1], b.coefs, rtol=1e-12, atol=1e-14)


def test_ols_first_stage_residuals_orthogonal(small_panel):
    p = small_panel
    fs = fit_ols_first_stage(p)
    r = p.y - fs.fitted[0]
    for j in range(p.n_groups):
        sl = p.group_slice(j)
        Xt = np.column_stack([np.ones(sl.stop - sl.start), p.X1[sl]])
        assert np.max(np.abs(Xt.T @ r[sl])) < 1e-10


def test_moment_variance_hand_values():
    Z = np.ones((4, 1))
    assert np.all(omega_hat(Z, np.zeros(4), [0, 0, 1, 1]) == 0.0)
    # two groups of two: scores 3 and -1 -> m * sum s^2 / N^2 = 2 * 10 / 16
    np.testing.assert_allclose(omega_hat(Z, np.array([1.0, 2.0, -1.0, 0.0]), [0, 0, 1, 1]), [[1.25]])
    np.testing.assert_allclose(sigma_blocks([np.eye(2)], [[np.eye(2)]], 4), np.eye(2) / 4)
    np.testing.assert_allclose(efficient_weight(2 * np.eye(3))[0], np.eye(3) / 2)


def test_z_test_scale_invariance_and_ci_monotonicity(small_panel):
    r = estimate(small_panel, "re_gmm", (0.25, 0.75))
    eta = r.contrast("x1_0", 0.75, 0.25)
    S = r.sigma()
    a = z_test(r.coef.ravel(), S, eta)
    b = z_test(r.coef.ravel(), S, -3.0 * eta)
    assert a.statistic == pytest.approx(-b.statistic, rel=1e-10)
    k = r.x_names.index("x1_0")
    null = r.coef[0, k]
    assert z_test(r.coef.ravel(), S, r.contrast("x1_0", 0.25), null).p_value == pytest.approx(1.0)
    ci90, ci99 = r.conf_int(0.90), r.conf_int(0.99)
    assert np.all(ci99[..., 0] <= ci90[..., 0]) and np.all(ci99[..., 1] >= ci90[..., 1])


def test_j_statistic_invariant_to_instrument_scale(small_panel):
    p = small_panel
    X, Z, _, _ = build_problem(p, InstrumentSpec("re_gmm"))
    j1 = md_fit(p.y, X, Z, clusters=p.codes).j_test().statistic
    j2 = md_fit(p.y, X, 7.0 * Z, clusters=p.codes).j_test().statistic
    assert j2 == pytest.approx(j1, rel=1e-8)


def test_powell_saturated_band():
    rng = np.random.default_rng(3)
    n = 4  # K1 + 2 with K1 = 2
    Xt = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    r = rng.uniform(-1, 1, size=n)
    h = 5.0
    V, _ = powell_vj(r, Xt, 0.4, bandwidth=h)
    Q = Xt.T @ Xt / n
    B = Q / (2 * h)
    Bi = np.linalg.inv(B)
    np.testing.assert_allclose(V, Bi @ (0.24 * Q) @ Bi, rtol=1e-10)


def test_powell_uniform_residuals_example():
    rng = np.random.default_rng(12)
    n, tau = 2000, 0.5
    Xt = np.column_stack([np.ones(n), rng.normal(size=n)])
    r = rng.uniform(-1, 1, size=n)  # density 1/2 at the median
    V, _ = powell_vj(r, Xt, tau)
    target = tau * (1 - tau) / 0.5**2 * np.linalg.inv(Xt.T @ Xt / n)
    np.testing.assert_allclose(np.diag(V), np.diag(target), rtol=0.2)
    assert np.all(np.linalg.eigvalsh(V) > 0)


def test_nerlove_hand_values():
    assert nerlove_sigma_alpha([0.0, 2.0]) == pytest.approx(2.0)
    assert nerlove_sigma_alpha([3.0, 3.0, 3.0]) == 0.0


def test_nerlove_recovers_group_effect_variance():
    p = draw(DgpSpec("panel", 200, 200, 0.0, 1), replication_rng(1, 0))
    fs = fit_first_stage(p, (0.5,))
    fe = md_fit(fs.fitted[0], p.X1, within_demean(p))
    s2 = nerlove_sigma_alpha(group_effects(fs, p, 0.5, fe.delta))
    assert abs(s2 - 1.0) < 0.1 * 1.0 + 0.15  # sampling sd of a variance over 200 groups is about 0.1


def test_re_oi_with_ols_variances_is_least_squares_random_effects():
    # homoskedastic OLS variances V_j = s2 (X'X/n)^-1 plugged into the same
    # formula give the GLS random-effects estimator
    p = draw(DgpSpec("panel", 30, 8, 0.0, 2), replication_rng(2, 0))
    fs = fit_ols_first_stage(p)
    resid = p.y - fs.fitted[0]
    s2_e = resid @ resid / (p.n_obs - 2 * p.n_groups)
    V = np.empty((p.n_groups, 2, 2))
    for j in range(p.n_groups):
        sl = p.group_slice(j)
        Xt = np.column_stack([np.ones(sl.stop - sl.start), p.X1[sl]])
        V[j] = s2_e * np.linalg.inv(Xt.T @ Xt / Xt.shape[0])

    class _V:  # minimal stand-in carrying the per-group variances
        pass

    fv = _V()
    fv.V = V
    s2_a = 0.8
    Z = re_optimal_instrument(p, fv, s2_a)
    X = np.hstack([p.X1, p.X2])
    delta = md_fit(fs.fitted[0], X, Z).delta
    # textbook GLS with Omega_j = s2_e I + s2_a 1 1'
    A = np.zeros((2, 2))
    b = np.zeros(2)
    for j in range(p.n_groups):
        sl = p.group_slice(j)
        n = sl.stop - sl.start
        Oi = np.linalg.inv(s2_e * np.eye(n) + s2_a * np.ones((n, n)))
        A += X[sl].T @ Oi @ X[sl]
        b += X[sl].T @ Oi @ p.y[sl]
    np.testing.assert_allclose(delta, np.linalg.solve(A, b), rtol=1e-6)


def _re_oi_fe_gap(n, draws, seed=77):
    gaps = []
    for r in range(draws):
        p = draw(DgpSpec("panel", 25, n, 0.0, seed), replication_rng(seed, r))
        re = estimate(p, "re_oi", (0.5,)).coef[0, 0]
        fe = estimate(p, "fe", (0.5,)).coef[0, 0]
        gaps.append(abs(re - fe))
    return float(np.mean(gaps))


def test_re_oi_close_to_fe_with_long_groups():
    # average over enough draws that the Monte Carlo error (about 0.0008) is
    # small next to the threshold
    assert _re_oi_fe_gap(200, 100) <= 0.01


def test_re_oi_fe_gap_shrinks_with_group_size():
    gaps = [_re_oi_fe_gap(n, 30) for n in (100, 200, 400)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_re_oi_huge_group_variance_collapses_to_fe():
    p = draw(DgpSpec("panel", 25, 30, 0.3, 6), replication_rng(6, 0))
    fe = estimate(p, "fe_oi", (0.5,)).coef[0, 0]
    re = estimate(p, "re_oi", (0.5,), sigma_alpha_override=1e9).coef[0, 0]
    assert abs(re - fe) <= 1e-3


def test_moment_variance_shrinks_like_one_over_n_without_group_effects():
    logs = []
    ns = (25, 100, 400)
    for n in ns:
        tr = []
        for r in range(20):
            p = draw(DgpSpec("grouped1", 25, n, seed=9), replication_rng(9, r))
            e = estimate(p, "external", (0.5,)).estimates[0]
            tr.append(np.trace(e.omega))
        logs.append(np.log(np.mean(tr)))
    slope = np.polyfit(np.log(ns), logs, 1)[0]
    assert abs(slope + 1.0) <= 0.15


def test_efficient_gmm_not_worse_than_2sls():
    coef = {"auto": [], "two_stage_ls": []}
    for r in range(200):
        p = draw(DgpSpec("panel", 25, 10, 0.0, 4), replication_rng(4, r))
        fs = fit_first_stage(p, (0.5,))
        for w in coef:
            coef[w].append(estimate(p, "re_gmm", (0.5,), weighting=w, first_stage=fs).coef[0, 0])
    assert np.std(coef["auto"]) <= np.std(coef["two_stage_ls"]) * 1.05
