"""Logistic verification model for covariate missingness.

``logit(pi_p) = Q_p' gamma`` is fitted by Newton-Raphson; the fitted
``pi_p`` become inverse-probability weights ``delta_p / pi_p`` for the
estimating equations, and the logistic information feeds the
estimated-weights correction of the sandwich covariance.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_column_rank
from .exceptions import DataError, IndAlphaError, SeparationError

WEIGHT_FLOOR = 1e-6


@dataclass(frozen=True)
class MissingnessFit:
    """Result of :func:`fit_missingness`.

    ``pi`` is floored at ``floor`` and is what the weights use;
    ``info`` is the per-subject-averaged logistic information
    ``(1/n) sum pi(1-pi) Q Q'`` evaluated at the unfloored probabilities.
    """

    gamma: np.ndarray
    pi: np.ndarray
    info: np.ndarray
    converged: bool
    iterations: int
    degenerate: bool = False
    floor: float = WEIGHT_FLOOR
    floor_hits: int = 0
    q_names: tuple = ()

    def weights(self, delta):
        """Inverse-probability weights ``delta_p / pi_p``."""
        return np.asarray(delta, dtype=float) / self.pi

    @property
    def mean_pi(self):
        return float(np.mean(self.pi))


def pi_gradient(q, gamma):
    """Derivative of ``pi = expit(Q' gamma)`` with respect to ``gamma``.

    Works row-wise when ``q`` is a matrix.
    """
    q = np.asarray(q, dtype=float)
    p = expit(q @ np.asarray(gamma, dtype=float))
    return (p * (1.0 - p))[..., None] * q


def information_matrix(q, gamma):
    """``(1/n) sum_p pi_p (1 - pi_p) Q_p Q_p'``."""
    q = np.asarray(q, dtype=float)
    p = expit(q @ gamma)
    return (q * (p * (1.0 - p))[:, None]).T @ q / q.shape[0]


def _loglik(q, delta, gamma):
    lin = q @ gamma
    # log(1 + exp(lin)) computed stably
    return float(np.sum(delta * lin - np.logaddexp(0.0, lin)))


def fit_missingness(delta, q, q_names=(), max_iter=50, tol=1e-10, floor=WEIGHT_FLOOR):
    """Maximum-likelihood logistic fit of ``delta`` on ``q``.

    Newton-Raphson with step-halving; stops when ``max|step| < tol``.
    When every subject is observed the fit is degenerate: ``pi == 1`` and
    the estimated-weights correction is disabled downstream.

    Raises
    ------
    DataError
        No complete subjects.
    SingularMatrixError
        ``q`` is rank deficient.
    SeparationError
        Fitted probabilities pin to 0 or 1 (perfect separation).
    """
    delta = np.asarray(delta, dtype=float)
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != delta.shape[0]:
        raise DataError("q must be an (n, pq) matrix matching delta")
    n, pq = q.shape
    if delta.sum() == 0:
        raise DataError("no subject has complete covariates (all delta = 0)")
    if delta.sum() == n:
        return MissingnessFit(
            gamma=np.full(pq, np.nan), pi=np.ones(n), info=np.zeros((pq, pq)),
            converged=True, iterations=0, degenerate=True, floor=floor, q_names=tuple(q_names),
        )
    check_column_rank(q, q_names, "missingness design Q")

    gamma = np.zeros(pq)
    ll = _loglik(q, delta, gamma)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(q @ gamma)
        score = q.T @ (delta - p)
        hess = (q * (p * (1.0 - p))[:, None]).T @ q
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise SeparationError(
                "logistic information became singular; fitted probabilities pinned to 0/1. "
                "Perfect separation in the missingness model; use fewer Q columns"
            ) from None
        t = 1.0
        for _ in range(30):
            cand = gamma + t * step
            ll_new = _loglik(q, delta, cand)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        gamma, ll = cand, ll_new
        if np.max(np.abs(t * step)) < tol:
            converged = True
            break

    p = expit(q @ gamma)
    pinned = np.max(np.abs(q @ gamma)) > 30 or np.min(p * (1.0 - p)) < 1e-13
    if not converged or pinned:
        if pinned or np.max(np.abs(gamma)) > 15:
            raise SeparationError(
                "fitted verification probabilities pin to 0/1 (perfect separation); "
                "use fewer Q columns"
            )
        raise IndAlphaError(f"logistic missingness fit did not converge in {max_iter} iterations")

    hits = int(np.sum(p < floor))
    if hits:
        warnings.warn(f"{hits} verification probabilities floored at {floor:g}", RuntimeWarning,
                      stacklevel=2)
    return MissingnessFit(
        gamma=gamma, pi=np.maximum(p, floor), info=information_matrix(q, gamma),
        converged=True, iterations=it, degenerate=False, floor=floor, floor_hits=hits,
        q_names=tuple(q_names),
    )


class MissingnessModel(BaseEstimator):
    """Estimator wrapper around :func:`fit_missingness`.

    Parameters
    ----------
    max_iter : int
    tol : float
        Newton-Raphson stops when every coefficient moves less than ``tol``.
    floor : float
        Lower bound applied to fitted probabilities before weighting.
    """

    def __init__(self, max_iter=50, tol=1e-10, floor=WEIGHT_FLOOR):
        self.max_iter = max_iter
        self.tol = tol
        self.floor = floor

    def fit(self, Q, delta):
        self.fit_ = fit_missingness(delta, Q, max_iter=self.max_iter, tol=self.tol, floor=self.floor)
        self.coef_ = self.fit_.gamma
        return self

    def predict_proba(self, Q):
        """Columns are P(delta = 0), P(delta = 1), matching sklearn classifiers."""
        check_is_fitted(self, "fit_")
        Q = np.asarray(Q, dtype=float)
        if self.fit_.degenerate:
            p1 = np.ones(Q.shape[0])
        else:
            p1 = np.maximum(expit(Q @ self.coef_), self.floor)
        return np.column_stack([1.0 - p1, p1])
