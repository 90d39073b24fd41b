"""Three sequential sets of weighted estimating equations.

Set 1 fits the item means ``mu_ip = g(X_ip' beta)``, set 2 the item variances
``sigma2_ip = h(Z_ip' omega)`` from squared residuals ``T_ip``, and set 3
the pairwise alpha model ``eta_ijp = (1 - exp(W' theta)) / (1 + exp(W' theta))``
from the standardized cross products ``U_ijp``.  Each set is solved by
Gauss-Newton with working-covariance nuisance parameters re-estimated by
moments after every step.  Set 2 holds ``beta`` fixed at its estimate and set
3 holds ``(beta, omega)`` fixed; the sets are never revisited.

Working covariances have the form ``V_p = phi * A_p^{1/2} R(rho) A_p^{1/2}``
where ``A_p`` is a per-subject variance function (``'constant'`` gives
``A_p = I``; ``'gaussian'`` uses the moments the statistic would have if the
responses were jointly normal).  For set 3 the ``'gaussian'`` structure uses
the full normal-theory covariance of ``U_p`` instead of ``A^{1/2} R A^{1/2}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from ._validation import check_study, solve_normal
from .data import ModelSpec, _pair_positions
from .exceptions import DataError, SaturationError

VAR_FLOOR = 1e-8
ETA_BOUND = 1.0 - 1e-8
RHO_MARGIN = 1e-6
EQ_TOL = 1e-7
VARIANCE_FUNCTIONS = ("constant", "gaussian")


@dataclass(frozen=True)
class LinkEval:
    """Link values and their Jacobian with respect to the coefficients.

    ``value`` has shape ``(..., m)`` and ``jacobian`` shape ``(..., m, p)``.
    """

    value: np.ndarray
    jacobian: np.ndarray


def _mean_link(link):
    if link == "identity":
        return (lambda t: t), (lambda t: np.ones_like(t)), (lambda m: m)
    if link == "log":
        return np.exp, np.exp, (lambda m: np.log(np.maximum(m, 1e-8)))
    if link == "logit":
        def deriv(t):
            p = expit(t)
            return p * (1.0 - p)
        return expit, deriv, (lambda m: logit(np.clip(m, 1e-6, 1 - 1e-6)))
    raise DataError(f"unknown mean link {link!r}")


def _var_link(link):
    if link == "identity-positive":
        return (lambda t: np.maximum(t, VAR_FLOOR)), (lambda t: np.ones_like(t)), (lambda s: s)
    if link == "log":
        return np.exp, np.exp, np.log
    raise DataError(f"unknown variance link {link!r}")


def mean_eval(x, beta, link="identity"):
    """``mu = g(X beta)`` and ``D = d mu / d beta``."""
    fn, deriv, _ = _mean_link(link)
    t = x @ beta
    return LinkEval(fn(t), deriv(t)[..., None] * x)


def variance_eval(z, omega, link="log"):
    """``sigma2 = h(Z omega)`` and ``E = d sigma2 / d omega``."""
    fn, deriv, _ = _var_link(link)
    t = z @ omega
    return LinkEval(fn(t), deriv(t)[..., None] * z)


def alpha_eval(w, theta):
    """``eta = (1 - e^t) / (1 + e^t)`` with ``t = W theta``, and ``F = d eta / d theta``."""
    t = w @ theta
    # (1 - e^t)/(1 + e^t) = -tanh(t/2), stable for any t
    th = np.tanh(0.5 * t)
    return LinkEval(-th, (-0.5 * (1.0 - th * th))[..., None] * w)


def alpha_from_linear(t):
    """Individualized alpha ``1 - exp(W' theta)``."""
    return 1.0 - np.exp(t)


def compute_T(y, mu):
    """Squared residuals ``(Y - mu)^2``."""
    y, mu = np.asarray(y, dtype=float), np.asarray(mu, dtype=float)
    if y.shape != mu.shape:
        raise DataError("y and mu must have equal shapes")
    return (y - mu) ** 2


def compute_U(y, mu, sigma2, pair_index=None):
    """Pairwise statistics ``2 (Y_i Y_j - mu_i mu_j) / (sigma2_i + sigma2_j)``.

    The last axis of the inputs indexes items; the output's last axis
    indexes pairs in lexicographic order.
    """
    y, mu, sigma2 = (np.asarray(a, dtype=float) for a in (y, mu, sigma2))
    if np.any(sigma2 <= 0):
        raise DataError("non-positive variance in compute_U")
    if pair_index is None:
        ii, jj = _pair_positions(y.shape[-1])
    else:
        pairs = np.asarray(pair_index) - 1
        ii, jj = pairs[:, 0], pairs[:, 1]
    num = y[..., ii] * y[..., jj] - mu[..., ii] * mu[..., jj]
    return 2.0 * num / (sigma2[..., ii] + sigma2[..., jj])


# ---------------------------------------------------------------------------
# Normal-theory moments of T and U
# ---------------------------------------------------------------------------


def t_variance(sigma2):
    """``Var(T_ip) = 2 sigma2_ip^2`` for a normal response."""
    return 2.0 * np.asarray(sigma2) ** 2


def u_covariance(mu, sigma2, eta, full=True):
    """Covariance of ``U_p`` for normal responses with the modelled moments.

    The item covariance is ``eta_ijp (sigma2_i + sigma2_j) / 2`` so that
    ``E U = eta``.  Returns shape ``(n, P, P)``, or the diagonal ``(n, P)``
    when ``full=False``.
    """
    mu, s2, eta = (np.asarray(a, dtype=float) for a in (mu, sigma2, eta))
    n, k = mu.shape
    ii, jj = _pair_positions(k)
    den = s2[:, ii] + s2[:, jj]
    c = eta * den / 2.0
    if not full:
        v = (s2[:, ii] * s2[:, jj] + c * c + mu[:, ii] ** 2 * s2[:, jj]
             + mu[:, jj] ** 2 * s2[:, ii] + 2.0 * mu[:, ii] * mu[:, jj] * c)
        return 4.0 * v / den ** 2
    s = np.zeros((n, k, k))
    s[:, np.arange(k), np.arange(k)] = s2
    s[:, ii, jj] = c
    s[:, jj, ii] = c
    a, b = ii[:, None], jj[:, None]
    cc, d = ii[None, :], jj[None, :]
    # Isserlis with means: Cov(Ya Yb, Yc Yd)
    cov = (s[:, a, cc] * s[:, b, d] + s[:, a, d] * s[:, b, cc]
           + mu[:, a] * mu[:, cc] * s[:, b, d] + mu[:, a] * mu[:, d] * s[:, b, cc]
           + mu[:, b] * mu[:, cc] * s[:, a, d] + mu[:, b] * mu[:, d] * s[:, a, cc])
    return 4.0 * cov / (den[:, :, None] * den[:, None, :])


def _cholesky_repaired(mats, rel_floor=1e-6):
    """Batched Cholesky factors, flooring eigenvalues of matrices that are not PD.

    The normal-theory covariance of ``U_p`` can be indefinite at parameter
    values whose implied response covariance is not PD (far from the fit);
    those matrices get eigenvalues floored at ``rel_floor`` times their mean
    diagonal.
    """
    try:
        return np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        pass
    if not np.all(np.isfinite(mats)):
        raise DataError("working covariance is not finite")
    evals, evecs = np.linalg.eigh(mats)
    floor = rel_floor * np.maximum(np.trace(mats, axis1=-2, axis2=-1) / mats.shape[-1], 1e-300)
    evals = np.maximum(evals, floor[:, None])
    return np.linalg.cholesky((evecs * evals[:, None, :]) @ np.swapaxes(evecs, -1, -2))


def _whitener(vfun):
    """Map ``x -> A^{-1/2} x`` (diagonal ``vfun``) or ``L^{-1} x`` (full ``vfun = L L'``)."""
    if vfun is None:
        return lambda x: x
    vfun = np.asarray(vfun, dtype=float)
    if vfun.ndim == 2:
        if np.any(vfun <= 0) or not np.all(np.isfinite(vfun)):
            raise DataError("working variance function is not positive")
        inv_sd = 1.0 / np.sqrt(vfun)
        return lambda x: x * (inv_sd if x.ndim == 2 else inv_sd[..., None])
    linv = np.linalg.inv(_cholesky_repaired(vfun))

    def apply(x):
        if x.ndim == 2:
            return (linv @ x[..., None])[..., 0]
        return linv @ x
    return apply


# ---------------------------------------------------------------------------
# Working covariance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkingCov:
    """Scale and correlation of one set's working covariance.

    ``matrix()`` is ``phi * R(rho)``, the covariance of the whitened
    residuals; :meth:`assemble` builds the full per-subject ``V_p``.
    """

    structure: str
    dim: int
    phi: float = 1.0
    rho: float = 0.0

    def matrix(self):
        r = np.eye(self.dim)
        if self.structure == "exchangeable" and self.dim > 1:
            r = np.full((self.dim, self.dim), self.rho)
            np.fill_diagonal(r, 1.0)
        return self.phi * r

    def inverse(self):
        return np.linalg.inv(self.matrix())

    def assemble(self, vfun_row=None):
        """``V_p`` for one subject given its variance-function value."""
        base = self.matrix()
        if vfun_row is None:
            return base
        vfun_row = np.asarray(vfun_row, dtype=float)
        if vfun_row.ndim == 1:
            sd = np.sqrt(vfun_row)
            return sd[:, None] * base * sd[None, :]
        chol = _cholesky_repaired(vfun_row[None])[0]
        return chol @ base @ chol.T

    def to_dict(self):
        return {"structure": self.structure, "phi": float(self.phi), "rho": float(self.rho)}


def estimate_nuisance(residuals, weights, structure):
    """Weighted moment estimates of the working scale and correlation.

    ``residuals`` are already standardized (whitened).  ``phi`` is the
    weighted mean squared residual; for the exchangeable structure ``rho``
    is the weighted mean off-diagonal product divided by ``phi``, clamped
    into the positive-definite range.
    """
    r = np.asarray(residuals, dtype=float)
    wt = np.asarray(weights, dtype=float)
    if r.ndim != 2:
        raise DataError("residuals must be an (n, m) array")
    if structure not in ("independence", "exchangeable", "gaussian"):
        raise DataError(f"unknown working structure {structure!r}")
    m = r.shape[1]
    total = wt.sum()
    if total <= 0 or np.count_nonzero(wt) < 2:
        raise DataError("zero effective sample for nuisance estimation")
    sq = np.sum(r * r, axis=1)
    phi = float(wt @ sq) / (total * m)
    rho = 0.0
    if structure == "exchangeable" and m > 1:
        s = r.sum(axis=1)
        off = float(wt @ (s * s - sq))
        rho = off / (total * m * (m - 1)) / phi if phi > 0 else 0.0
        rho = min(max(rho, -1.0 / (m - 1) + RHO_MARGIN), 1.0 - RHO_MARGIN)
    return WorkingCov(structure, m, max(phi, 1e-12), rho)


# ---------------------------------------------------------------------------
# Gauss-Newton
# ---------------------------------------------------------------------------


def _normal_system(resid, jac, weights, vinv):
    c, m, p = jac.shape
    vj = (vinv @ jac) * weights[:, None, None]
    vj = vj.reshape(c * m, p)
    return jac.reshape(c * m, p).T @ vj, vj.T @ resid.reshape(c * m)


def _objective(resid, weights, vinv):
    return float(weights @ np.sum((resid @ vinv) * resid, axis=1))


def gauss_newton_step(param, resid, jac, weights, cov, vfun=None, names=(),
                      label="estimating equations"):
    """One update ``param + (sum w J'V^-1 J)^-1 sum w J'V^-1 r``.

    ``resid`` is ``response - fitted`` and ``jac`` is d(fitted)/d(param);
    ``V_p`` is ``cov`` combined with the variance function ``vfun``.
    """
    white = _whitener(vfun)
    a, b = _normal_system(white(resid), white(jac), weights, cov.inverse())
    return np.asarray(param, dtype=float) + solve_normal(a, b, names, label)


@dataclass
class _SetResult:
    param: np.ndarray
    cov: WorkingCov
    iterations: int
    converged: bool
    enorm: float


def _solve_set(evaluate, start, weights, structure, names, label, max_iter, tol, halvings=10,
               eq_tol=EQ_TOL):
    """Gauss-Newton with step-halving; ``evaluate(param) -> (resid, jac, vfun)`` or None.

    Stops once the parameter change is below ``tol * (1 + max|param|)`` and
    the sup-norm of the weighted estimating equations is below ``eq_tol``
    (or its rounding floor, for data on a large scale).
    """
    param = np.array(start, dtype=float)
    out = evaluate(param)
    if out is None:
        raise SaturationError(f"{label}: starting value saturated")
    r, jac, vfun = out
    white = _whitener(vfun)
    rw, jw = white(r), white(jac)
    cov = estimate_nuisance(rw, weights, structure)
    converged = False
    moved = np.inf
    it = 0
    while True:
        vinv = cov.inverse()
        a, b = _normal_system(rw, jw, weights, vinv)
        enorm = float(np.max(np.abs(b)))
        scale = 1.0 + np.max(np.abs(param))
        # rounding floor for badly scaled data
        floor = 1e-12 * float(np.max(np.abs(a))) * scale
        if moved <= tol * scale and enorm <= max(eq_tol, floor):
            converged = True
            break
        if it == max_iter:
            break
        it += 1
        step = solve_normal(a, b, names, label)
        obj0 = _objective(rw, weights, vinv)
        t = 1.0
        accepted = None
        saturated = False
        for _ in range(halvings + 1):
            cand = param + t * step
            trial = evaluate(cand)
            if trial is None:
                saturated = True
            else:
                # V held at the current iterate while comparing
                obj = _objective(white(trial[0]), weights, vinv)
                if np.isfinite(obj):
                    accepted = (cand, trial)
                    if obj <= obj0 * (1.0 + 1e-12):
                        break
            t *= 0.5
        if accepted is None:
            if saturated:
                raise SaturationError(f"{label}: eta saturated (|eta| would reach 1)")
            raise DataError(f"{label}: non-finite estimating equations")
        moved = np.max(np.abs(accepted[0] - param))
        param, (r, jac, vfun) = accepted
        white = _whitener(vfun)
        rw, jw = white(r), white(jac)
        cov = estimate_nuisance(rw, weights, structure)
    return _SetResult(param, cov, it, converged, enorm)


@dataclass(frozen=True)
class GeeFit:
    """Estimates and diagnostics from :func:`fit_gee`.

    ``nuisance`` holds the final :class:`WorkingCov` of each set, and
    ``residual_norms`` the sup-norm of each weighted estimating equation at
    the estimates.
    """

    beta: np.ndarray
    omega: np.ndarray
    theta: np.ndarray
    nuisance: tuple
    iterations: tuple
    residual_norms: tuple
    converged_sets: tuple
    spec: ModelSpec
    weights: np.ndarray = field(repr=False)

    @property
    def converged(self):
        return all(self.converged_sets)

    @property
    def params(self):
        return np.concatenate([self.beta, self.omega, self.theta])


def ipw_weights(study, missingness=None):
    """``delta_p / pi_p``; ``pi = 1`` when no missingness fit is supplied."""
    if missingness is None:
        return study.delta.astype(float)
    return missingness.weights(study.delta)


def _complete(study):
    sel = study.delta == 1
    return sel, study.y[sel], study.x[sel], study.z[sel], study.w[sel]


def variance_functions(spec, mu, sigma2, eta):
    """Per-subject variance-function values ``(A_1, A_2, A_3)`` (None means identity).

    ``A_3`` is a full ``(n, P, P)`` covariance under the ``'gaussian'``
    structure, otherwise the diagonal ``(n, P)``.
    """
    a2 = t_variance(sigma2) if spec.var_function == "gaussian" else None
    a3 = None
    if spec.alpha_structure == "gaussian":
        a3 = u_covariance(mu, sigma2, eta, full=True)
    elif spec.alpha_function == "gaussian":
        a3 = u_covariance(mu, sigma2, eta, full=False)
    return None, a2, a3


def fit_gee(study, spec=None, missingness=None, max_iter=100, tol=1e-8):
    """Solve the three weighted estimating-equation sets in sequence.

    Parameters
    ----------
    study : StudyData
    spec : ModelSpec, optional
        Links, working structures and variance functions.
    missingness : MissingnessFit, optional
        Supplies ``pi_p``; omit for complete-case weights ``delta_p``.
    max_iter, tol :
        Per-set iteration cap and relative parameter-change tolerance.

    Returns
    -------
    GeeFit
        Flagged (``converged=False``) rather than raising when a set hits
        ``max_iter``.
    """
    check_study(study)
    spec = spec or ModelSpec()
    weights = ipw_weights(study, missingness)
    sel, y, x, z, w = _complete(study)
    wt = weights[sel]
    px, pz = x.shape[2], z.shape[2]

    _, _, ginv = _mean_link(spec.mean_link)
    beta0, *_ = np.linalg.lstsq(x.reshape(-1, px), ginv(y).reshape(-1), rcond=None)

    def eval1(beta):
        ev = mean_eval(x, beta, spec.mean_link)
        return y - ev.value, ev.jacobian, None

    s1 = _solve_set(eval1, beta0, wt, spec.mean_structure, study.x_names, "mean equations",
                    max_iter, tol)
    mu = mean_eval(x, s1.param, spec.mean_link).value
    t_stat = compute_T(y, mu)

    _, _, hinv = _var_link(spec.var_link)
    target = hinv(np.full(t_stat.size, max(float(np.average(t_stat.mean(axis=1), weights=wt)), 1e-8)))
    omega0, *_ = np.linalg.lstsq(z.reshape(-1, pz), target, rcond=None)

    def eval2(omega):
        ev = variance_eval(z, omega, spec.var_link)
        vfun = t_variance(ev.value) if spec.var_function == "gaussian" else None
        return t_stat - ev.value, ev.jacobian, vfun

    s2 = _solve_set(eval2, omega0, wt, spec.var_structure, study.z_names, "variance equations",
                    max_iter, tol)
    sigma2 = variance_eval(z, s2.param, spec.var_link).value
    u_stat = compute_U(y, mu, sigma2)

    def eval3(theta):
        ev = alpha_eval(w, theta)
        if np.max(np.abs(ev.value)) >= ETA_BOUND:
            return None
        return u_stat - ev.value, ev.jacobian, variance_functions(spec, mu, sigma2, ev.value)[2]

    s3 = _solve_set(eval3, np.zeros(w.shape[2]), wt, spec.alpha_structure, study.w_names,
                    "alpha equations", max_iter, tol)
    if not s3.converged and np.max(np.abs(alpha_eval(w, s3.param).value)) > 1.0 - 1e-6:
        raise SaturationError("alpha equations: eta saturated (no finite solution)")

    return GeeFit(
        beta=s1.param, omega=s2.param, theta=s3.param,
        nuisance=(s1.cov, s2.cov, s3.cov),
        iterations=(s1.iterations, s2.iterations, s3.iterations),
        residual_norms=(s1.enorm, s2.enorm, s3.enorm),
        converged_sets=(s1.converged, s2.converged, s3.converged),
        spec=spec, weights=weights,
    )


def estimating_equations(study, spec, beta, omega, theta, nuisance, weights):
    """Weighted estimating functions ``(e1, e2, e3)`` at the given parameters.

    ``e1`` depends on ``beta`` only and ``e2`` on ``(beta, omega)`` only.
    """
    sel, y, x, z, w = _complete(study)
    wt = np.asarray(weights, dtype=float)[sel]
    mev = mean_eval(x, np.asarray(beta, dtype=float), spec.mean_link)
    vev = variance_eval(z, np.asarray(omega, dtype=float), spec.var_link)
    aev = alpha_eval(w, np.asarray(theta, dtype=float))
    _, a2, a3 = variance_functions(spec, mev.value, vev.value, aev.value)
    _, e1 = _normal_system(y - mev.value, mev.jacobian, wt, nuisance[0].inverse())
    white = _whitener(a2)
    _, e2 = _normal_system(white(compute_T(y, mev.value) - vev.value), white(vev.jacobian), wt,
                           nuisance[1].inverse())
    white = _whitener(a3)
    u_stat = compute_U(y, mev.value, vev.value)
    _, e3 = _normal_system(white(u_stat - aev.value), white(aev.jacobian), wt, nuisance[2].inverse())
    return e1, e2, e3


def _step_inputs(study, weights, spec):
    sel, y, x, z, w = _complete(study)
    return y, x, z, w, np.asarray(weights, dtype=float)[sel], spec or ModelSpec()


def gn_step_beta(beta, study, weights, spec=None, cov=None):
    """One Gauss-Newton update of the mean coefficients.

    ``cov`` defaults to the moment estimate at the current ``beta``.
    """
    y, x, _, _, wt, spec = _step_inputs(study, weights, spec)
    ev = mean_eval(x, np.asarray(beta, dtype=float), spec.mean_link)
    r = y - ev.value
    cov = cov or estimate_nuisance(r, wt, spec.mean_structure)
    return gauss_newton_step(beta, r, ev.jacobian, wt, cov, None, study.x_names, "mean equations")


def gn_step_omega(omega, beta, study, weights, spec=None, cov=None):
    """One Gauss-Newton update of the variance coefficients with ``beta`` held fixed."""
    y, x, z, _, wt, spec = _step_inputs(study, weights, spec)
    mu = mean_eval(x, np.asarray(beta, dtype=float), spec.mean_link).value
    ev = variance_eval(z, np.asarray(omega, dtype=float), spec.var_link)
    r = compute_T(y, mu) - ev.value
    vfun = t_variance(ev.value) if spec.var_function == "gaussian" else None
    cov = cov or estimate_nuisance(_whitener(vfun)(r), wt, spec.var_structure)
    return gauss_newton_step(omega, r, ev.jacobian, wt, cov, vfun, study.z_names,
                             "variance equations")


def gn_step_theta(theta, beta, omega, study, weights, spec=None, cov=None):
    """One Gauss-Newton update of the alpha coefficients with ``(beta, omega)`` held fixed."""
    y, x, z, w, wt, spec = _step_inputs(study, weights, spec)
    mu = mean_eval(x, np.asarray(beta, dtype=float), spec.mean_link).value
    sigma2 = variance_eval(z, np.asarray(omega, dtype=float), spec.var_link).value
    ev = alpha_eval(w, np.asarray(theta, dtype=float))
    r = compute_U(y, mu, sigma2) - ev.value
    vfun = variance_functions(spec, mu, sigma2, ev.value)[2]
    cov = cov or estimate_nuisance(_whitener(vfun)(r), wt, spec.alpha_structure)
    return gauss_newton_step(theta, r, ev.jacobian, wt, cov, vfun, study.w_names, "alpha equations")
