import numpy as np
import pytest
from conftest import random_unbalanced_panel
from oracles import emd, ols, rel_err
from scipy import stats

from qpanel.estimator import estimate
from qpanel.exceptions import ConfigError, NumericalError
from qpanel.md import md_fit
from qpanel.montecarlo import DgpSpec, draw_panel, replication_rng
from qpanel.optimal_iv import (
    efficient_md,
    fe_optimal_instrument,
    first_stage_variance,
    group_effects,
    hall_sheather_bandwidth,
    nerlove_sigma_alpha,
    powell_vj,
    re_optimal_instrument,
)
from qpanel.qr import fit_first_stage, fit_ols_first_stage


def _draws():
    out = []
    for i in range(20):
        rng = np.random.default_rng(500 + i)
        if i % 2:
            out.append(draw_panel(DgpSpec("panel", 15, 40, 0.3, i), replication_rng(i, 0)))
        else:
            out.append(random_unbalanced_panel(rng, m=12, K1=2, K2=2, n_min=40, n_max=60))
    return out


DRAWS = _draws()


@pytest.mark.parametrize("i", range(20))
def test_re_oi_without_group_effect_is_efficient_md(i):
    p = DRAWS[i]
    tau = (0.25, 0.5, 0.75)[i % 3]
    fs = fit_first_stage(p, (tau,))
    V = first_stage_variance(fs, p, tau)
    r = estimate(p, "re_oi", (tau,), first_stage=fs, sigma_alpha_override=0.0)
    ref = emd(fs.coefs[:, 0, :], V.V, p.counts, p.group_rows(p.X2), 0.0)
    assert rel_err(r.coef[0], ref) < 1e-6
    assert rel_err(efficient_md(fs.coefs[:, 0, :], V, p, 0.0), ref) < 1e-10


@pytest.mark.parametrize("i", range(0, 20, 4))
def test_re_oi_with_group_effect_matches_efficient_md(i):
    p = DRAWS[i]
    fs = fit_first_stage(p, (0.5,))
    V = first_stage_variance(fs, p, 0.5)
    r = estimate(p, "re_oi", (0.5,), first_stage=fs, sigma_alpha_override=0.7)
    ref = emd(fs.coefs[:, 0, :], V.V, p.counts, p.group_rows(p.X2), 0.7)
    assert rel_err(r.coef[0], ref) < 1e-6


@pytest.mark.parametrize("i", range(0, 20, 5))
def test_lowrank_and_svd_routes_agree(i):
    p = DRAWS[i]
    fs = fit_first_stage(p, (0.5,))
    V = first_stage_variance(fs, p, 0.5)
    for s2 in (0.0, 0.4):
        a = re_optimal_instrument(p, V, s2, method="lowrank")
        b = re_optimal_instrument(p, V, s2, method="svd")
        assert rel_err(a, b) < 1e-8
    assert rel_err(fe_optimal_instrument(p, V), fe_optimal_instrument(p, V, method="svd")) < 1e-8


def test_fe_oi_is_efficient_combination_of_slopes():
    p = DRAWS[1]
    fs = fit_first_stage(p, (0.5,))
    V = first_stage_variance(fs, p, 0.5)
    Z = fe_optimal_instrument(p, V)
    # instrument is orthogonal to every group constant
    sums = np.add.reduceat(Z, p.starts[:-1], axis=0)
    assert np.max(np.abs(sums)) < 1e-8 * np.abs(Z).max()
    beta = md_fit(fs.fitted[0], p.X1, Z).delta
    # GLS of slopes: sum_j (V_j/n_j)_{bb}^-1 after profiling the intercept
    A = np.zeros((p.K1, p.K1))
    b = np.zeros(p.K1)
    for j in range(p.n_groups):
        M = V.V[j] / p.counts[j]
        Ps = np.linalg.inv(M[1:, 1:])
        A += Ps
        b += Ps @ fs.coefs[j, 0, 1:]
    assert rel_err(beta, np.linalg.solve(A, b)) < 1e-6
    # a very large group-effect variance makes RE-OI collapse to FE-OI
    Zre = re_optimal_instrument(p, V, 1e9)
    beta_re = md_fit(fs.fitted[0], np.hstack([p.X1, p.X2]), Zre).delta[: p.K1]
    assert rel_err(beta_re, beta) < 1e-5


def test_powell_is_consistent_for_the_asymptotic_variance():
    # average of 8 independent large samples so that the check targets bias,
    # not the kernel estimator's sampling noise
    n = 40000
    for tau in (0.25, 0.5):
        q = stats.norm.ppf(tau)
        target = tau * (1 - tau) / stats.norm.pdf(q) ** 2
        diags = []
        for s in range(8):
            rng = np.random.default_rng(s)
            Xt = np.column_stack([np.ones(n), rng.normal(size=n)])
            V, h = powell_vj(rng.normal(size=n) - q, Xt, tau)
            diags.append(np.diag(V))
            assert h > 0
        np.testing.assert_allclose(np.mean(diags, axis=0), target, rtol=0.05)


def test_powell_fixed_bandwidth_formula():
    rng = np.random.default_rng(1)
    n = 50
    Xt = np.column_stack([np.ones(n), rng.normal(size=n)])
    r = rng.normal(size=n)
    h = 0.6
    V, used = powell_vj(r, Xt, 0.3, bandwidth=h)
    k = (np.abs(r) <= h) / (2 * h)
    B = (Xt * k[:, None]).T @ Xt / n
    Bi = np.linalg.inv(B)
    ref = Bi @ (0.3 * 0.7 * Xt.T @ Xt / n) @ Bi
    assert used == h
    np.testing.assert_allclose(V, ref, rtol=1e-12)


def test_powell_widens_then_fails():
    Xt = np.column_stack([np.ones(6), np.arange(6.0)])
    r = np.array([5.0, -5, 6, -6, 7, -7])
    V, h = powell_vj(r, Xt, 0.5, bandwidth=2.0)  # needs two doublings
    assert h == 8.0
    with pytest.raises(NumericalError):
        powell_vj(r * 100, Xt, 0.5, bandwidth=2.0)
    with pytest.raises(ConfigError):
        powell_vj(r, Xt, 0.5, bandwidth=0.0)


def test_hall_sheather_shrinks_with_n():
    assert hall_sheather_bandwidth(1000, 0.5) < hall_sheather_bandwidth(100, 0.5)
    assert hall_sheather_bandwidth(100, 0.5) == pytest.approx(
        100 ** (-1 / 3) * stats.norm.ppf(0.975) ** (2 / 3) * (1.5 * stats.norm.pdf(0) ** 2) ** (1 / 3)
    )


def test_nerlove_and_group_effects(small_panel):
    p = small_panel
    fs = fit_ols_first_stage(p)
    beta = np.array([0.3, -0.2])
    a = group_effects(fs, p, 0.5, beta)
    ybar = np.add.reduceat(p.y, p.starts[:-1]) / p.counts
    x1bar = np.add.reduceat(p.X1, p.starts[:-1], axis=0) / p.counts[:, None]
    level = ybar - x1bar @ beta
    X2g = p.group_rows(p.X2)
    np.testing.assert_allclose(a, level - X2g @ ols(level, X2g), atol=1e-10)
    assert nerlove_sigma_alpha(a) == pytest.approx(np.var(a, ddof=1))
    assert nerlove_sigma_alpha([1.0, 1.0]) == 0.0


def test_optimal_iv_input_checks(small_panel):
    p = small_panel
    fs = fit_first_stage(p, (0.5,))
    V = first_stage_variance(fs, p, 0.5)
    with pytest.raises(ConfigError):
        re_optimal_instrument(p, V, -1.0)
    with pytest.raises(ConfigError):
        re_optimal_instrument(p, V, 0.0, method="qr")
    with pytest.raises(ConfigError):
        estimate(p, "re_oi", (0.5,), first_stage="ols")
