"""Sandwich covariance, Wald tests and alpha intervals.

The three estimating-equation sets are stacked into one system in
``zeta = (beta, omega, theta)``.  Its bread ``Gamma_n`` is block lower
triangular because set 2 depends on ``beta`` and set 3 on ``(beta, omega)``.
The meat is corrected for the estimated missingness coefficients ``gamma``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._validation import check_choice, check_level
from .data import _pair_positions
from .exceptions import DataError, SingularMatrixError
from .gee import (_whitener, alpha_eval, alpha_from_linear, compute_T, compute_U, mean_eval,
                  variance_eval, variance_functions)
from .missingness import pi_gradient

OMEGA_CONVENTIONS = ("inverse", "literal")


@dataclass(frozen=True)
class SubjectBlocks:
    """Per-subject pieces of the stacked system, complete subjects only.

    Arrays are indexed by complete subject ``c`` first.  ``d``, ``e``, ``f``
    are the diagonal blocks of ``G_p`` (and of ``H_p``); ``dt_dbeta``,
    ``du_dbeta`` and ``du_domega`` are the derivatives of ``T_p`` and
    ``U_p`` that fill the strictly lower blocks of ``H_p`` (with a minus
    sign).  ``vfun`` holds the variance-function values of the three sets
    (None for constant).
    """

    resid_mean: np.ndarray
    resid_var: np.ndarray
    resid_alpha: np.ndarray
    d: np.ndarray
    e: np.ndarray
    f: np.ndarray
    dt_dbeta: np.ndarray
    du_dbeta: np.ndarray
    du_domega: np.ndarray
    vfun: tuple = (None, None, None)


def subject_blocks(study, spec, beta, omega, theta):
    """Evaluate residuals, Jacobians and cross derivatives at ``(beta, omega, theta)``."""
    sel = study.delta == 1
    y, x, z, w = study.y[sel], study.x[sel], study.z[sel], study.w[sel]
    mev = mean_eval(x, np.asarray(beta, dtype=float), spec.mean_link)
    vev = variance_eval(z, np.asarray(omega, dtype=float), spec.var_link)
    aev = alpha_eval(w, np.asarray(theta, dtype=float))
    mu, d = mev.value, mev.jacobian
    s2, e = vev.value, vev.jacobian
    r1 = y - mu
    t_stat = compute_T(y, mu)
    u_stat = compute_U(y, mu, s2)
    ii, jj = _pair_positions(study.k)
    denom = (s2[:, ii] + s2[:, jj])[..., None]
    dt_dbeta = -2.0 * r1[..., None] * d
    du_dbeta = -2.0 * (mu[:, jj, None] * d[:, ii] + mu[:, ii, None] * d[:, jj]) / denom
    du_domega = -u_stat[..., None] * (e[:, ii] + e[:, jj]) / denom
    return SubjectBlocks(r1, t_stat - s2, u_stat - aev.value, d, e, aev.jacobian,
                         dt_dbeta, du_dbeta, du_domega,
                         variance_functions(spec, mu, s2, aev.value))


@dataclass(frozen=True)
class SandwichResult:
    """Pieces of the joint covariance of ``(beta, omega, theta)``.

    ``psi`` is the asymptotic covariance of ``sqrt(n) (zeta_hat - zeta)``;
    :attr:`cov` divides it by ``n``.
    """

    psi: np.ndarray
    gamma_n: np.ndarray
    sigma_n: np.ndarray
    upsilon_n: np.ndarray
    omega_n: np.ndarray
    n: int
    sizes: tuple
    omega_convention: str = "inverse"
    clipped: bool = False
    correction_applied: bool = True
    names: tuple = field(default=())

    @property
    def cov(self):
        return self.psi / self.n

    def block(self, which):
        """Covariance block for ``'beta'``, ``'omega'`` or ``'theta'``."""
        idx = {"beta": 0, "omega": 1, "theta": 2}[which]
        start = sum(self.sizes[:idx])
        sl = slice(start, start + self.sizes[idx])
        return self.cov[sl, sl]

    def se(self, which):
        return np.sqrt(np.diag(self.block(which)))


def sandwich_covariance(study, gee_fit, missingness=None, omega_convention="inverse"):
    """Joint sandwich covariance ``Gamma^-1 (Sigma - Upsilon Omega^-1 Upsilon') Gamma^-T``.

    ``omega_convention='literal'`` multiplies by ``Omega`` instead of its
    inverse; it exists for comparison only.  Without missingness (or when all
    subjects are observed) the correction vanishes and the result is the
    classical sandwich.
    """
    check_choice("omega_convention", omega_convention, OMEGA_CONVENTIONS)
    spec = gee_fit.spec
    n = study.n
    sel = study.delta == 1
    wt = gee_fit.weights[sel]
    blk = subject_blocks(study, spec, gee_fit.beta, gee_fit.omega, gee_fit.theta)
    v1, v2, v3 = (c.inverse() for c in gee_fit.nuisance)
    # V_p = A_p^{1/2} (phi R) A_p^{1/2'}: whiten every set-l array by A_p^{-1/2}
    w1, w2, w3 = (_whitener(a) for a in blk.vfun)
    d, e, f = w1(blk.d), w2(blk.e), w3(blk.f)

    # G' V^-1 blocks (whitened), shape (c, m_l, p_l)
    gv1 = np.einsum("ij,cjp->cip", v1, d)
    gv2 = np.einsum("ij,cjp->cip", v2, e)
    gv3 = np.einsum("ij,cjp->cip", v3, f)
    score = np.concatenate([
        np.einsum("cip,ci->cp", gv1, w1(blk.resid_mean)),
        np.einsum("cip,ci->cp", gv2, w2(blk.resid_var)),
        np.einsum("cip,ci->cp", gv3, w3(blk.resid_alpha)),
    ], axis=1)
    sizes = (blk.d.shape[2], blk.e.shape[2], blk.f.shape[2])
    m = sum(sizes)
    b0, b1 = sizes[0], sizes[0] + sizes[1]

    def wsum(a, b):
        return np.einsum("c,cip,ciq->pq", wt, a, b) / n

    gam = np.zeros((m, m))
    gam[:b0, :b0] = wsum(gv1, d)
    gam[b0:b1, :b0] = wsum(gv2, -w2(blk.dt_dbeta))
    gam[b0:b1, b0:b1] = wsum(gv2, e)
    gam[b1:, :b0] = wsum(gv3, -w3(blk.du_dbeta))
    gam[b1:, b0:b1] = wsum(gv3, -w3(blk.du_domega))
    gam[b1:, b1:] = wsum(gv3, f)

    sig = np.einsum("c,cp,cq->pq", wt * wt, score, score) / n

    correction = missingness is not None and not missingness.degenerate
    if correction:
        dpi = pi_gradient(study.q[sel], missingness.gamma)
        ups = np.einsum("c,cp,cq->pq", wt * wt, score, dpi) / n
        omg = missingness.info
        if omega_convention == "inverse":
            middle = ups @ np.linalg.solve(omg, ups.T)
        else:
            middle = ups @ omg @ ups.T
        meat = sig - middle
    else:
        pq = study.q.shape[1]
        ups = np.zeros((m, pq))
        omg = missingness.info if missingness is not None else np.zeros((pq, pq))
        meat = sig

    meat = 0.5 * (meat + meat.T)
    clipped = False
    evals, evecs = np.linalg.eigh(meat)
    if evals.min() < -1e-8 * max(np.trace(meat), 1e-300):
        warnings.warn("corrected meat matrix is indefinite; negative eigenvalues clipped to zero",
                      RuntimeWarning, stacklevel=2)
        meat = (evecs * np.maximum(evals, 0.0)) @ evecs.T
        clipped = True

    try:
        ginv = np.linalg.inv(gam)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("sandwich bread Gamma_n is singular") from None
    if not np.all(np.isfinite(ginv)) or np.linalg.cond(gam) > 1e14:
        raise SingularMatrixError("sandwich bread Gamma_n is singular")
    psi = ginv @ meat @ ginv.T
    psi = 0.5 * (psi + psi.T)
    names = (tuple(f"beta:{s}" for s in study.x_names) + tuple(f"omega:{s}" for s in study.z_names)
             + tuple(f"theta:{s}" for s in study.w_names))
    return SandwichResult(psi=psi, gamma_n=gam, sigma_n=sig, upsilon_n=ups, omega_n=omg, n=n,
                          sizes=sizes, omega_convention=omega_convention, clipped=clipped,
                          correction_applied=correction, names=names)


# ---------------------------------------------------------------------------
# Tests and intervals
# ---------------------------------------------------------------------------


def wald_test(estimate, se, null=0.0):
    """Two-sided normal test of ``estimate == null``; returns ``(z, p)``."""
    se = float(se)
    if not se > 0:
        raise DataError("standard error must be positive for a Wald test")
    z = (float(estimate) - null) / se
    return z, float(2.0 * stats.norm.sf(abs(z)))


@dataclass(frozen=True)
class AlphaEstimate:
    """Alpha at one covariate row, with a delta-method interval.

    The interval is the normal interval for the linear predictor ``w' theta``
    mapped through the decreasing transform ``t -> 1 - exp(t)``.
    """

    w: tuple
    linear: float
    linear_se: float
    alpha: float
    level: float
    linear_ci: tuple
    ci: tuple

    def to_dict(self):
        return {"w": list(self.w), "linear": self.linear, "linear_se": self.linear_se,
                "alpha": self.alpha, "level": self.level, "linear_ci": list(self.linear_ci),
                "ci": list(self.ci)}


def alpha_estimate(w_row, theta_hat, cov_theta, level=0.95):
    """Point estimate and interval for ``alpha = 1 - exp(w' theta)``.

    Parameters
    ----------
    w_row : array_like
        Alpha-model covariate row (same column order as ``theta_hat``).
    theta_hat : array_like
    cov_theta : array_like
        Estimated covariance of ``theta_hat`` (not scaled by ``n``).
    level : float
        Two-sided confidence level.
    """
    level = check_level(level)
    w_row = np.asarray(w_row, dtype=float)
    lin = float(w_row @ np.asarray(theta_hat, dtype=float))
    var = float(w_row @ np.asarray(cov_theta, dtype=float) @ w_row)
    se = float(np.sqrt(max(var, 0.0)))
    zc = stats.norm.ppf(0.5 + level / 2.0)
    lo, hi = lin - zc * se, lin + zc * se
    return AlphaEstimate(
        w=tuple(w_row.tolist()), linear=lin, linear_se=se, alpha=float(alpha_from_linear(lin)),
        level=level, linear_ci=(lo, hi),
        ci=(float(alpha_from_linear(hi)), float(alpha_from_linear(lo))),
    )


@dataclass(frozen=True)
class RangeTest:
    threshold: float
    direction: str
    z: float
    p_value: float
    reject: bool
    level: float

    def to_dict(self):
        return {"threshold": self.threshold, "direction": self.direction, "z": self.z,
                "p_value": self.p_value, "reject": self.reject, "level": self.level}


def alpha_range_test(estimate, threshold, direction=None, level=0.05):
    """One-sided test placing alpha relative to ``threshold``.

    ``direction='lower'`` tests H0: alpha < c against H1: alpha >= c and
    rejects for small ``(w'theta - log(1-c)) / se``; ``'upper'`` tests
    H0: alpha > c against H1: alpha <= c and rejects for large values.
    By default thresholds below 0.8 use ``'lower'`` and the rest ``'upper'``.
    """
    threshold = float(threshold)
    if not 0.0 < threshold < 1.0:
        raise DataError(f"threshold must lie in (0, 1), got {threshold}")
    if direction is None:
        direction = "lower" if threshold < 0.8 else "upper"
    check_choice("direction", direction, ("lower", "upper"))
    level = check_level(level, "level")
    if not estimate.linear_se > 0:
        raise DataError("alpha range test needs a positive standard error")
    z = (estimate.linear - np.log1p(-threshold)) / estimate.linear_se
    crit = stats.norm.ppf(1.0 - level)
    if direction == "lower":
        p, reject = stats.norm.cdf(z), z <= -crit
    else:
        p, reject = stats.norm.sf(z), z >= crit
    return RangeTest(threshold, direction, float(z), float(p), bool(reject), level)


def naive_overall_alpha(y):
    """Sample Cronbach's alpha of an ``(n, k)`` score matrix (unbiased variances)."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[0] < 2 or y.shape[1] < 2:
        raise DataError("naive alpha needs an (n, k) matrix with n >= 2 and k >= 2")
    k = y.shape[1]
    total_var = y.sum(axis=1).var(ddof=1)
    if total_var <= 0:
        raise DataError("total score has zero variance")
    return float(k / (k - 1) * (1.0 - y.var(axis=0, ddof=1).sum() / total_var))


def naive_pairwise_alpha(y):
    """Average over item pairs of the two-item sample Cronbach's alpha.

    This is the homogeneous-case counterpart of the pairwise alpha that the
    alpha model estimates; for ``k > 2`` it differs from
    :func:`naive_overall_alpha`, which pools all ``k`` items.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[1] < 2:
        raise DataError("naive alpha needs an (n, k) matrix with k >= 2")
    ii, jj = _pair_positions(y.shape[1])
    return float(np.mean([naive_overall_alpha(y[:, [i, j]]) for i, j in zip(ii, jj)]))
