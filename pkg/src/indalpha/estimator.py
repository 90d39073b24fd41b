"""Estimator front end combining the missingness fit, the GEE sets and the sandwich."""
from __future__ import annotations

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_choice, check_level, check_study
from .data import ALPHA_STRUCTURES, MEAN_LINKS, STRUCTURES, VAR_LINKS, VARIANCE_FUNCTIONS, ModelSpec
from .exceptions import DataError
from .gee import alpha_from_linear, fit_gee
from .inference import (OMEGA_CONVENTIONS, alpha_estimate, alpha_range_test, sandwich_covariance,
                        wald_test)
from .missingness import WEIGHT_FLOOR, fit_missingness


class IndividualizedAlpha(BaseEstimator):
    """Individualized coefficient alpha ``alpha_ijp = 1 - exp(W_ijp' theta)``.

    Parameters
    ----------
    mean_link : {'identity', 'log', 'logit'}
    var_link : {'identity-positive', 'log'}
    mean_structure, var_structure : {'independence', 'exchangeable'}
        Working correlation of the mean and variance sets.
    alpha_structure : {'independence', 'exchangeable', 'gaussian'}
        Working structure of the alpha set; ``'gaussian'`` uses the full
        normal-theory covariance of the pairwise statistics.
    var_function, alpha_function : {'constant', 'gaussian'}
        Variance function scaling the working correlation of the variance
        and alpha sets.
    ipw : bool
        Weight complete subjects by their inverse fitted verification
        probability.  When False (or when every subject is complete) the fit
        uses complete cases with unit weights.
    max_iter, tol :
        Per-set Gauss-Newton limits.
    weight_floor : float
        Lower bound on fitted verification probabilities.
    omega_convention : {'inverse', 'literal'}
        How the logistic information enters the estimated-weights
        correction of the sandwich.
    ci_level : float
        Default confidence level for intervals.

    Attributes
    ----------
    missingness_ : MissingnessFit or None
    gee_fit_ : GeeFit
    sandwich_ : SandwichResult
    beta_, omega_, theta_, gamma_ : ndarray
    covariance_ : ndarray
        Estimated covariance of ``(beta, omega, theta)``.
    converged_ : bool
    """

    def __init__(self, mean_link="identity", var_link="log", mean_structure="exchangeable",
                 var_structure="independence", alpha_structure="gaussian",
                 var_function="gaussian", alpha_function="constant", ipw=True, max_iter=100,
                 tol=1e-8, weight_floor=WEIGHT_FLOOR, omega_convention="inverse", ci_level=0.95):
        self.mean_link = mean_link
        self.var_link = var_link
        self.mean_structure = mean_structure
        self.var_structure = var_structure
        self.alpha_structure = alpha_structure
        self.var_function = var_function
        self.alpha_function = alpha_function
        self.ipw = ipw
        self.max_iter = max_iter
        self.tol = tol
        self.weight_floor = weight_floor
        self.omega_convention = omega_convention
        self.ci_level = ci_level

    @classmethod
    def from_spec(cls, spec, **kwargs):
        """Estimator configured with the links and working structures of ``spec``."""
        return cls(**{**spec.estimator_params(), **kwargs})

    def _spec(self):
        check_choice("mean_link", self.mean_link, MEAN_LINKS)
        check_choice("var_link", self.var_link, VAR_LINKS)
        check_choice("mean_structure", self.mean_structure, STRUCTURES)
        check_choice("var_structure", self.var_structure, STRUCTURES)
        check_choice("alpha_structure", self.alpha_structure, ALPHA_STRUCTURES)
        check_choice("var_function", self.var_function, VARIANCE_FUNCTIONS)
        check_choice("alpha_function", self.alpha_function, VARIANCE_FUNCTIONS)
        check_choice("omega_convention", self.omega_convention, OMEGA_CONVENTIONS)
        check_level(self.ci_level, "ci_level")
        if int(self.max_iter) < 1 or not self.tol > 0:
            raise DataError("max_iter must be >= 1 and tol positive")
        if not 0.0 < self.weight_floor < 1.0:
            raise DataError("weight_floor must lie in (0, 1)")
        return ModelSpec(mean_link=self.mean_link, var_link=self.var_link,
                         mean_structure=self.mean_structure, var_structure=self.var_structure,
                         alpha_structure=self.alpha_structure, var_function=self.var_function,
                         alpha_function=self.alpha_function)

    def fit(self, study, y=None):
        """Fit all three estimating-equation sets to ``study`` (a :class:`StudyData`).

        ``y`` is ignored; it exists for scikit-learn API compatibility.
        """
        spec = self._spec()
        check_study(study)
        miss = None
        if self.ipw:
            miss = fit_missingness(study.delta, study.q, study.q_names, floor=self.weight_floor)
        gee = fit_gee(study, spec, miss, max_iter=int(self.max_iter), tol=float(self.tol))
        sand = sandwich_covariance(study, gee, miss, self.omega_convention)

        self.spec_ = spec
        self.missingness_ = miss
        self.gee_fit_ = gee
        self.sandwich_ = sand
        self.beta_, self.omega_, self.theta_ = gee.beta, gee.omega, gee.theta
        self.gamma_ = miss.gamma if miss is not None else np.array([])
        self.covariance_ = sand.cov
        self.converged_ = gee.converged
        self.n_subjects_ = study.n
        self.n_complete_ = study.n_complete
        self.names_ = {"beta": study.x_names, "omega": study.z_names, "theta": study.w_names,
                       "gamma": study.q_names}
        return self

    def _rows(self, W):
        check_is_fitted(self, "theta_")
        W = np.asarray(W, dtype=float)
        if W.ndim == 1:
            W = W[None, :]
        if W.shape[-1] != self.theta_.shape[0]:
            raise DataError(f"W rows need {self.theta_.shape[0]} columns "
                            f"({', '.join(self.names_['theta'])}), got {W.shape[-1]}")
        return W

    def predict(self, W):
        """Fitted alpha ``1 - exp(W theta)`` for alpha-design rows ``W`` (any leading shape)."""
        return alpha_from_linear(self._rows(W) @ self.theta_)

    def alpha_estimate(self, w_row, level=None):
        """Alpha at one alpha-design row with a delta-method interval."""
        w_row = self._rows(w_row)
        if w_row.shape[0] != 1:
            raise DataError("alpha_estimate takes a single row")
        level = self.ci_level if level is None else level
        return alpha_estimate(w_row[0], self.theta_, self.sandwich_.block("theta"), level)

    def range_test(self, w_row, threshold, direction=None, level=0.05):
        """One-sided test of alpha at ``w_row`` against ``threshold``."""
        return alpha_range_test(self.alpha_estimate(w_row), threshold, direction, level)

    def gamma_covariance(self):
        """Estimated covariance of the missingness coefficients (None when not estimated)."""
        check_is_fitted(self, "theta_")
        miss = self.missingness_
        if miss is None or miss.degenerate:
            return None
        return np.linalg.inv(miss.info) / self.n_subjects_

    def coef_table(self, which="theta", level=None):
        """Rows of estimate, SE, Wald z, p-value and interval for one coefficient block.

        ``which`` is ``'beta'``, ``'omega'``, ``'theta'`` or ``'gamma'``.
        """
        check_is_fitted(self, "theta_")
        level = check_level(self.ci_level if level is None else level)
        if which == "gamma":
            cov = self.gamma_covariance()
            if cov is None:
                return []
            est = self.gamma_
        else:
            est = {"beta": self.beta_, "omega": self.omega_, "theta": self.theta_}[which]
            cov = self.sandwich_.block(which)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        zc = stats.norm.ppf(0.5 + level / 2.0)
        rows = []
        for name, b, s in zip(self.names_[which], est, se):
            z, p = wald_test(b, s) if s > 0 else (float("nan"), float("nan"))
            rows.append({"name": name, "estimate": float(b), "se": float(s), "z": float(z),
                         "p_value": float(p), "ci": [float(b - zc * s), float(b + zc * s)]})
        return rows
