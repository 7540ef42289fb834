import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from qpanel import QuantileMDRegressor
from qpanel.estimator import estimate
from qpanel.exceptions import ConfigError, DataError
from qpanel.montecarlo import DgpSpec, draw_grouped


@pytest.fixture
def grouped():
    p = draw_grouped(DgpSpec("grouped1", 40, 30, seed=9))
    return p.X1, p.y, p.codes, p.X2[:, :1]


def test_params_roundtrip_and_clone():
    est = QuantileMDRegressor(quantiles=(0.25, 0.75), estimator="re_gmm", vcov="jackknife")
    params = est.get_params()
    assert params["quantiles"] == (0.25, 0.75) and params["vcov"] == "jackknife"
    c = clone(est).set_params(weighting="two_stage_ls")
    assert c.weighting == "two_stage_ls" and est.weighting == "auto"


def test_fit_predict_shapes(grouped):
    X, y, g, Xg = grouped
    m = QuantileMDRegressor(quantiles=[0.1, 0.5, 0.9]).fit(X, y, g, X_group=Xg)
    assert m.coef_.shape == (3, 3) and m.feature_names_ == ("x1_0", "x2_0", "const")
    assert m.n_features_in_ == 1 and m.n_group_features_ == 1
    pred = m.predict(X, X_group=Xg)
    assert pred.shape == (y.size, 3)
    assert np.all(np.diff(pred, axis=1).mean(axis=0) > 0)
    m1 = QuantileMDRegressor().fit(X, y, g, X_group=Xg)
    assert m1.predict(X, X_group=Xg).shape == (y.size,)
    s = m1.score(X, y, X_group=Xg)
    assert s < 0


def test_estimator_matches_function_api(grouped):
    X, y, g, Xg = grouped
    m = QuantileMDRegressor(quantiles=0.5).fit(X, y, g, X_group=Xg)
    p = draw_grouped(DgpSpec("grouped1", 40, 30, seed=9))
    np.testing.assert_allclose(m.coef_, estimate(p, "pooled", (0.5,)).coef, rtol=1e-12)


def test_within_only_prediction(grouped):
    X, y, g, Xg = grouped
    m = QuantileMDRegressor(estimator="fe").fit(X, y, g, X_group=Xg)
    assert m.within_only_ and m.coef_.shape == (1, 1)
    np.testing.assert_allclose(m.predict(X), X[:, 0] * m.coef_[0, 0])


def test_validation_errors(grouped):
    X, y, g, Xg = grouped
    with pytest.raises(NotFittedError):
        QuantileMDRegressor().predict(X)
    with pytest.raises(ValueError):
        QuantileMDRegressor().fit(X[:5], y, g)
    with pytest.raises(ConfigError):
        QuantileMDRegressor(quantiles=1.5).fit(X, y, g)
    m = QuantileMDRegressor().fit(X, y, g, X_group=Xg)
    with pytest.raises(DataError):
        m.predict(X)
    with pytest.raises(DataError):
        m.predict(np.hstack([X, X]), X_group=Xg)


def test_min_dof_drops_groups(grouped):
    X, y, g, Xg = grouped
    keep = (g != 3) | (np.arange(g.size) % 30 < 10)
    m = QuantileMDRegressor(min_dof=20).fit(X[keep], y[keep], g[keep], X_group=Xg[keep])
    assert m.dropped_groups_ == ["3"]
