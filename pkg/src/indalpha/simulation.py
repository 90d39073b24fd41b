"""Synthetic three-item studies and replicated Monte Carlo experiments.

Responses are Gaussian with unit variances and pairwise covariances equal to
``eta_ijp``, so the true individualized alpha is ``1 - exp(W' theta)``.
Covariates go missing at random through a logistic verification model.

Every replicate draws from its own generator seeded by
``SeedSequence(seed, spawn_key=(n, replicate))``, so results do not depend
on execution order or on the number of worker processes.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit

from .data import ModelSpec, StudyData
from .exceptions import DataError, IndAlphaError
from .gee import alpha_from_linear, fit_gee
from .inference import alpha_estimate, alpha_range_test, sandwich_covariance, wald_test
from .missingness import fit_missingness

PD_FLOOR = 1e-6

SIM_SPEC = ModelSpec(
    mean_link="identity", var_link="identity-positive", mean_structure="exchangeable",
    var_structure="independence", alpha_structure="gaussian", var_function="gaussian",
    intercept_mode="per-item", variance_mode="per-item-constant",
)


@dataclass(frozen=True)
class SimDesign:
    """True parameters and covariate layout of a simulated study.

    ``alpha_design='full'`` uses ``W = (1, w1, w2, w3, w4, w5)`` with
    ``w1 ~ Bern(0.5)``, ``w2, w4 ~ U(0,1)``, ``w3, w5 ~ N(0,1)`` (``w4``,
    ``w5`` pair-specific).  ``'single'`` uses ``W = (1, w1)`` with
    ``w1 ~ U(0,1)``, for the alpha range-test power study.
    """

    n: int = 2500
    beta_intercepts: tuple = (-0.6, 0.4, 0.3)
    beta: tuple = (0.25, 0.0, 1.0)
    theta: tuple = (-0.6, -0.4, 0.05, 0.05, -0.2, 0.0)
    gamma: tuple = (2.0, 0.5, -0.6)
    alpha_design: str = "full"
    missing: bool = True
    replicates: int = 500
    seed: int = 20190801
    tests: tuple = (0, 1, 4, 5)
    level: float = 0.05
    ci_level: float = 0.95
    alpha_w_row: tuple = ()

    def __post_init__(self):
        for name in ("beta_intercepts", "beta", "theta", "gamma", "tests", "alpha_w_row"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n < 10:
            raise DataError(f"design n must be at least 10, got {self.n}")
        if len(self.beta_intercepts) != 3 or len(self.beta) != 3 or len(self.gamma) != 3:
            raise DataError("design needs 3 item intercepts, 3 mean slopes and 3 gamma values")
        width = {"full": 6, "single": 2}.get(self.alpha_design)
        if width is None:
            raise DataError(f"alpha_design must be 'full' or 'single', got {self.alpha_design!r}")
        if len(self.theta) != width:
            raise DataError(f"alpha_design {self.alpha_design!r} needs {width} theta values")
        if any(not 0 <= j < width for j in self.tests):
            raise DataError("tests index outside theta")
        if self.alpha_w_row and len(self.alpha_w_row) != width:
            raise DataError("alpha_w_row length must match theta")
        if self.replicates < 1:
            raise DataError("replicates must be >= 1")
        if not all(math.isfinite(v) for v in self.theta + self.beta + self.beta_intercepts + self.gamma):
            raise DataError("design parameters must be finite")

    @property
    def w_row(self):
        """Covariate row at which alpha coverage is tracked (covariate means by default)."""
        if self.alpha_w_row:
            return np.asarray(self.alpha_w_row, dtype=float)
        if self.alpha_design == "full":
            return np.array([1.0, 0.5, 0.5, 0.0, 0.5, 0.0])
        return np.array([1.0, 0.5])

    @property
    def theta_names(self):
        return tuple(f"theta{j}" for j in range(len(self.theta)))

    @classmethod
    def from_dict(cls, doc):
        known = {f for f in cls.__dataclass_fields__}
        bad = set(doc) - known
        if bad:
            raise DataError(f"unknown design key(s): {', '.join(sorted(bad))}")
        return cls(**doc)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _response_cov(eta):
    """Unit-diagonal 3x3 covariances from pair values; shrinks off-diagonals if not PD."""
    n = eta.shape[0]
    off = np.zeros((n, 3, 3))
    off[:, 0, 1] = off[:, 1, 0] = eta[:, 0]
    off[:, 0, 2] = off[:, 2, 0] = eta[:, 1]
    off[:, 1, 2] = off[:, 2, 1] = eta[:, 2]
    lam = np.linalg.eigvalsh(off)[:, 0]
    bad = 1.0 + lam < PD_FLOOR
    scale = np.ones(n)
    # eigenvalues of I + s*O are 1 + s*lambda(O)
    scale[bad] = (1.0 - PD_FLOOR) / -lam[bad]
    return np.eye(3) + scale[:, None, None] * off, int(bad.sum())


def simulate_study(design, seed=None, rng=None, return_repairs=False):
    """Draw one study from ``design``.

    Pass either an integer ``seed`` or a ``numpy.random.Generator``.  The
    draw order is fixed, so a given seed always yields identical data.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    n, k = design.n, 3
    x1 = rng.uniform(-1.0, 1.0, n)
    x2 = rng.uniform(-1.0, 1.0, (n, k))
    x3 = rng.standard_normal((n, k))
    if design.alpha_design == "full":
        w1 = rng.binomial(1, 0.5, n).astype(float)
        w2 = rng.uniform(0.0, 1.0, n)
        w3 = rng.standard_normal(n)
        w4 = rng.uniform(0.0, 1.0, (n, 3))
        w5 = rng.standard_normal((n, 3))
        w = np.stack([np.ones((n, 3)), np.repeat(w1[:, None], 3, 1), np.repeat(w2[:, None], 3, 1),
                      np.repeat(w3[:, None], 3, 1), w4, w5], axis=-1)
        w_names = ("intercept", "w1", "w2", "w3", "w4", "w5")
    else:
        w1 = rng.uniform(0.0, 1.0, n)
        w = np.stack([np.ones((n, 3)), np.repeat(w1[:, None], 3, 1)], axis=-1)
        w_names = ("intercept", "w1")
    q1 = rng.standard_normal(n)
    q2 = rng.standard_normal(n)
    eps = rng.standard_normal((n, k))
    u_miss = rng.uniform(0.0, 1.0, n)

    x = np.concatenate([np.broadcast_to(np.eye(k), (n, k, k)),
                        np.stack([np.repeat(x1[:, None], k, 1), x2, x3], axis=-1)], axis=-1)
    beta = np.concatenate([design.beta_intercepts, design.beta])
    mu = x @ beta
    eta = -np.tanh(0.5 * (w @ np.asarray(design.theta)))
    cov, repairs = _response_cov(eta)
    y = mu + np.einsum("pij,pj->pi", np.linalg.cholesky(cov), eps)

    q = np.column_stack([np.ones(n), q1, q2])
    if design.missing:
        delta = (u_miss < expit(q @ np.asarray(design.gamma))).astype(np.int8)
    else:
        delta = np.ones(n, dtype=np.int8)
    # the key covariates (x1 in the mean model, w1 in the alpha model) go unobserved
    miss = delta == 0
    x[miss, :, k] = np.nan
    w[miss, :, 1] = np.nan

    study = StudyData(
        y=y, x=x, z=np.broadcast_to(np.eye(k), (n, k, k)), w=w, q=q, delta=delta,
        x_names=tuple(f"item[{i + 1}]" for i in range(k)) + ("x1", "x2", "x3"),
        z_names=tuple(f"item[{i + 1}]" for i in range(k)), w_names=w_names,
        q_names=("intercept", "q1", "q2"),
    )
    return (study, repairs) if return_repairs else study


def replicate_rng(seed, n, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(n, index)))


def fit_study(study, missing=True, spec=SIM_SPEC):
    """Missingness fit, GEE fit and sandwich for one simulated study."""
    miss = fit_missingness(study.delta, study.q, study.q_names) if missing else None
    gee = fit_gee(study, spec, miss)
    sand = sandwich_covariance(study, gee, miss)
    return miss, gee, sand


def _one_replicate(design, index):
    rng = replicate_rng(design.seed, design.n, index)
    study, repairs = simulate_study(design, rng=rng, return_repairs=True)
    rec = {"index": index, "repairs": repairs, "observed_rate": float(study.delta.mean())}
    try:
        miss, gee, sand = fit_study(study, design.missing, SIM_SPEC)
        if not gee.converged:
            raise IndAlphaError("GEE did not converge")
        se = sand.se("theta")
        if not np.all(np.isfinite(se)) or np.any(se <= 0):
            raise IndAlphaError("non-positive standard error")
    except (IndAlphaError, np.linalg.LinAlgError) as exc:
        rec.update(ok=False, error=str(exc))
        return rec
    est = alpha_estimate(design.w_row, gee.theta, sand.block("theta"), design.ci_level)
    rec.update(ok=True, theta=gee.theta, se=se, alpha_linear=est.linear, alpha_se=est.linear_se,
               mean_pi=float(miss.mean_pi) if miss is not None else 1.0)
    return rec


def _run(design, indices, jobs):
    if jobs == 1:
        return [_one_replicate(design, i) for i in indices]
    out = Parallel(n_jobs=jobs)(delayed(_one_replicate)(design, i) for i in indices)
    return sorted(out, key=lambda r: r["index"])


@dataclass
class McSummary:
    """Replicated-fit results for one design and sample size.

    Per-replicate estimates are kept so that summaries over sub-ranges of
    replicates can be formed with :meth:`head`.
    """

    design: SimDesign
    estimates: np.ndarray
    ses: np.ndarray
    alpha_linear: np.ndarray
    alpha_se: np.ndarray
    indices: np.ndarray
    failures: int
    failure_messages: list = field(default_factory=list)
    repairs: int = 0
    observed_rate: float = float("nan")
    mean_pi: float = float("nan")

    @property
    def truth(self):
        return np.asarray(self.design.theta, dtype=float)

    @property
    def successes(self):
        return int(self.estimates.shape[0])

    @property
    def replicates(self):
        return self.successes + self.failures

    def head(self, count):
        """Summary restricted to replicates with index below ``count``."""
        keep = self.indices < count
        return replace(self, estimates=self.estimates[keep], ses=self.ses[keep],
                       alpha_linear=self.alpha_linear[keep], alpha_se=self.alpha_se[keep],
                       indices=self.indices[keep],
                       failures=count - int(keep.sum()))

    @property
    def mean(self):
        return self.estimates.mean(axis=0)

    @property
    def rmse(self):
        return np.sqrt(np.mean((self.estimates - self.truth) ** 2, axis=0))

    @property
    def rmse_mcse(self):
        """Monte Carlo standard error of each RMSE (delta method on the mean squared error)."""
        sq = (self.estimates - self.truth) ** 2
        r = self.successes
        if r < 2:
            return np.full(sq.shape[1], np.nan)
        return sq.std(axis=0, ddof=1) / np.sqrt(r) / (2.0 * self.rmse)

    @property
    def mean_se(self):
        return self.ses.mean(axis=0)

    @property
    def empirical_sd(self):
        return self.estimates.std(axis=0, ddof=1) if self.successes > 1 else np.full(len(self.truth), np.nan)

    def rejection_rate(self, j, level=None):
        """Share of two-sided Wald tests of ``theta_j = 0`` rejected."""
        level = self.design.level if level is None else level
        pvals = np.array([wald_test(t, s)[1] for t, s in zip(self.estimates[:, j], self.ses[:, j])])
        return float(np.mean(pvals < level))

    def coverage(self, level=None):
        """Per-component share of normal intervals for theta containing the truth."""
        level = self.design.ci_level if level is None else level
        from scipy.stats import norm

        zc = norm.ppf(0.5 + level / 2.0)
        hit = np.abs(self.estimates - self.truth) <= zc * self.ses
        return hit.mean(axis=0)

    def alpha_coverage(self, level=None):
        """Share of delta-method alpha intervals at ``design.w_row`` containing the true alpha."""
        level = self.design.ci_level if level is None else level
        from scipy.stats import norm

        zc = norm.ppf(0.5 + level / 2.0)
        true_alpha = alpha_from_linear(float(self.design.w_row @ self.truth))
        lo = alpha_from_linear(self.alpha_linear + zc * self.alpha_se)
        hi = alpha_from_linear(self.alpha_linear - zc * self.alpha_se)
        return float(np.mean((lo <= true_alpha) & (true_alpha <= hi)))

    def table_rows(self):
        rows = []
        mean, rmse, mcse, cover = self.mean, self.rmse, self.rmse_mcse, self.coverage()
        for j, name in enumerate(self.design.theta_names):
            rows.append({"n": self.design.n, "parameter": name, "true": float(self.truth[j]),
                         "mean": float(mean[j]), "rmse": float(rmse[j]), "rmse_mcse": float(mcse[j]),
                         "mean_se": float(self.mean_se[j]), "coverage": float(cover[j]),
                         "replicates": self.replicates, "failures": self.failures})
        return rows

    def test_rows(self):
        return [{"n": self.design.n, "parameter": self.design.theta_names[j],
                 "true": float(self.truth[j]), "null": 0.0, "level": self.design.level,
                 "rejection_rate": self.rejection_rate(j), "replicates": self.replicates,
                 "failures": self.failures}
                for j in self.design.tests]

    def to_dict(self):
        return {
            "design": self.design.to_dict(),
            "replicates": self.replicates,
            "successes": self.successes,
            "failures": self.failures,
            "failure_messages": list(self.failure_messages),
            "pd_repairs": self.repairs,
            "observed_rate": self.observed_rate,
            "missing_rate": 1.0 - self.observed_rate,
            "mean_pi_hat": self.mean_pi,
            "parameters": self.table_rows() if self.successes else [],
            "tests": self.test_rows() if self.successes else [],
            "alpha_w_row": self.design.w_row.tolist(),
            "alpha_coverage": self.alpha_coverage() if self.successes else None,
        }


def run_mc(design, replicates=None, seed=None, n=None, jobs=1):
    """Fit ``replicates`` independent simulated studies and aggregate.

    Failed replicates (non-convergence, saturation, singular systems) are
    excluded from the summaries and counted.

    Raises
    ------
    IndAlphaError
        When every replicate fails.
    """
    overrides = {}
    if replicates is not None:
        overrides["replicates"] = int(replicates)
    if seed is not None:
        overrides["seed"] = int(seed)
    if n is not None:
        overrides["n"] = int(n)
    design = replace(design, **overrides) if overrides else design
    recs = _run(design, range(design.replicates), jobs)
    ok = [r for r in recs if r["ok"]]
    if not ok:
        raise IndAlphaError(f"all {design.replicates} replicates failed: {recs[0].get('error')}")
    p = len(design.theta)
    return McSummary(
        design=design,
        estimates=np.array([r["theta"] for r in ok]).reshape(-1, p),
        ses=np.array([r["se"] for r in ok]).reshape(-1, p),
        alpha_linear=np.array([r["alpha_linear"] for r in ok]),
        alpha_se=np.array([r["alpha_se"] for r in ok]),
        indices=np.array([r["index"] for r in ok]),
        failures=len(recs) - len(ok),
        failure_messages=[f"{r['index']}: {r['error']}" for r in recs if not r["ok"]],
        repairs=int(sum(r["repairs"] for r in recs)),
        observed_rate=float(np.mean([r["observed_rate"] for r in recs])),
        mean_pi=float(np.mean([r["mean_pi"] for r in ok])),
    )


def theta1_for_alpha(alpha_tilde, w_tilde, theta0=math.log(0.3)):
    """Slope making ``1 - exp(theta0 + theta1 * w_tilde)`` equal ``alpha_tilde``."""
    if not alpha_tilde < 1.0 or w_tilde == 0:
        raise DataError(f"no finite theta1 for alpha={alpha_tilde}, w={w_tilde}")
    val = (math.log1p(-alpha_tilde) - theta0) / w_tilde
    if not math.isfinite(val):
        raise DataError(f"no finite theta1 for alpha={alpha_tilde}, w={w_tilde}")
    return val


POWER_COLUMNS = ("alpha_true", "n", "w1_tilde", "threshold", "direction", "power", "replicates",
                 "failures")


def power_curve(alpha_grid, n_grid, w_tildes=(0.2, 0.5, 0.8),
                thresholds=((0.7, "lower"), (0.9, "upper")), replicates=500,
                seed=20190801, level=0.05, base=None, jobs=1):
    """Power of the alpha range tests over a grid of true alpha and sample size.

    For each ``(alpha, n, w_tilde)`` the single-covariate alpha model
    ``1 - exp(log 0.3 + theta1 w1)`` is simulated with ``theta1`` chosen so
    that alpha at ``w1 = w_tilde`` equals the grid value; every threshold's
    test is evaluated on the same fitted replicates.

    Returns a list of row dicts with keys :data:`POWER_COLUMNS`.
    """
    base = base or SimDesign(alpha_design="single", theta=(math.log(0.3), 0.0), tests=(0, 1))
    theta0 = base.theta[0]
    rows = []
    for w_t in w_tildes:
        for a in alpha_grid:
            theta1 = theta1_for_alpha(a, w_t, theta0)
            for n in n_grid:
                design = replace(base, n=int(n), theta=(theta0, theta1), replicates=int(replicates),
                                 seed=int(seed), alpha_w_row=(1.0, float(w_t)))
                recs = _run(design, range(design.replicates), jobs)
                ok = [r for r in recs if r["ok"]]
                for thr, direction in thresholds:
                    rejected = 0
                    for r in ok:
                        est = _LinearEstimate(r["alpha_linear"], r["alpha_se"])
                        rejected += alpha_range_test(est, thr, direction, level).reject
                    rows.append({"alpha_true": float(a), "n": int(n), "w1_tilde": float(w_t),
                                 "threshold": float(thr), "direction": direction,
                                 "power": rejected / len(ok) if ok else float("nan"),
                                 "replicates": len(recs), "failures": len(recs) - len(ok)})
    return rows


@dataclass(frozen=True)
class _LinearEstimate:
    linear: float
    linear_se: float


def load_design(path):
    """Read a design JSON; bare names resolve to the bundled designs."""
    p = Path(path)
    if not p.exists() and not p.suffix:
        p = Path(__file__).parent / "designs" / f"{path}.json"
    elif not p.exists():
        bundled = Path(__file__).parent / "designs" / p.name
        if bundled.exists():
            p = bundled
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"design file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{p.name} line {exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise DataError("design file must hold a JSON object")
    return doc
