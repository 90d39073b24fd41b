import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import intercept_only
from indalpha import IndividualizedAlpha, SimDesign, simulate_study
from indalpha.exceptions import DataError
from indalpha.simulation import SIM_SPEC


@pytest.fixture(scope="module")
def fitted(sim_study):
    return IndividualizedAlpha.from_spec(SIM_SPEC).fit(sim_study)


class TestParams:
    def test_clone_round_trip(self):
        est = IndividualizedAlpha(mean_link="log", ci_level=0.9)
        copy = clone(est)
        assert copy.get_params() == est.get_params()

    def test_from_spec(self):
        est = IndividualizedAlpha.from_spec(SIM_SPEC, max_iter=7)
        assert est.var_link == "identity-positive" and est.max_iter == 7
        assert est.alpha_structure == SIM_SPEC.alpha_structure

    @pytest.mark.parametrize("kw", [{"mean_link": "probit"}, {"alpha_structure": "ar1"},
                                    {"ci_level": 1.2}, {"weight_floor": 0.0}, {"max_iter": 0}])
    def test_invalid(self, sim_study, kw):
        with pytest.raises(DataError):
            IndividualizedAlpha(**kw).fit(sim_study)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            IndividualizedAlpha().predict([1.0])


class TestFitted:
    def test_attributes(self, fitted, sim_study):
        assert fitted.converged_
        assert fitted.covariance_.shape == (15, 15)
        assert fitted.n_complete_ == sim_study.n_complete
        assert fitted.gamma_.shape == (3,)

    def test_predict(self, fitted):
        w = np.array([[1, 1, 0.5, 0, 0.5, 0], [1, 0, 0.2, 1, 0.1, -1.0]])
        np.testing.assert_allclose(fitted.predict(w), 1 - np.exp(w @ fitted.theta_))
        assert fitted.predict(w[0]).shape == (1,)
        with pytest.raises(DataError):
            fitted.predict([1.0, 2.0])

    def test_alpha_estimate_matches_predict(self, fitted):
        row = [1, 1, 0.5, 0, 0.5, 0]
        est = fitted.alpha_estimate(row)
        assert est.alpha == pytest.approx(fitted.predict(row)[0], rel=1e-14)
        assert est.ci[0] < est.alpha < est.ci[1]

    def test_coef_table(self, fitted):
        rows = fitted.coef_table("theta")
        assert [r["name"] for r in rows] == list(fitted.names_["theta"])
        se = np.sqrt(np.diag(fitted.covariance_))[-6:]
        np.testing.assert_allclose([r["se"] for r in rows], se)
        assert len(fitted.coef_table("gamma")) == 3

    def test_no_ipw_drops_gamma(self, sim_study):
        est = IndividualizedAlpha.from_spec(SIM_SPEC, ipw=False).fit(sim_study)
        assert est.missingness_ is None and est.coef_table("gamma") == []


class TestHomogeneous:
    def test_pooled_alpha(self):
        design = SimDesign(n=4000, alpha_design="single", theta=(math.log(0.14), 0.0), tests=(1,),
                           missing=False)
        study = intercept_only(simulate_study(design, seed=21))
        est = IndividualizedAlpha.from_spec(SIM_SPEC).fit(study)
        a = est.alpha_estimate([1.0])
        assert a.alpha == pytest.approx(0.86, abs=0.02)
        assert a.ci[0] < 0.86 < a.ci[1]
