"""Input validation helpers."""
import numpy as np

from .exceptions import DataError, SingularMatrixError


def null_space_columns(mat, names, rtol=1e-10):
    """Names of columns participating in the (numerical) null space of ``mat``."""
    mat = np.asarray(mat, dtype=float)
    # the reduced SVD already spans the row space when rows >= columns
    _, s, vt = np.linalg.svd(mat, full_matrices=mat.shape[0] < mat.shape[1])
    tol = rtol * (s[0] if s.size else 1.0)
    rank = int(np.sum(s > tol))
    null = vt[rank:]
    if null.size == 0:
        return ()
    involved = np.any(np.abs(null) > 1e-8, axis=0)
    names = list(names) or [f"col{c}" for c in range(mat.shape[1])]
    return tuple(names[c] for c in np.flatnonzero(involved))


def check_column_rank(mat, names, label):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim == 3:
        mat = mat.reshape(-1, mat.shape[-1])
    bad = null_space_columns(mat, names)
    if bad:
        raise SingularMatrixError(f"{label} is rank deficient; collinear columns: {', '.join(bad)}", bad)


def solve_normal(a, b, names, label):
    """Solve ``a x = b`` for a symmetric normal matrix, naming culprits on failure."""
    a = np.asarray(a, dtype=float)
    scale = np.max(np.abs(np.diag(a))) if a.size else 0.0
    if scale == 0.0 or not np.all(np.isfinite(a)) or np.linalg.cond(a) > 1e13:
        bad = null_space_columns(a, names, rtol=1e-12) or tuple(names)
        raise SingularMatrixError(f"singular normal matrix in {label}; offending columns: {', '.join(bad)}",
                                  bad)
    return np.linalg.solve(a, b)


def check_level(level, name="level"):
    level = float(level)
    if not 0.0 < level < 1.0:
        raise DataError(f"{name} must lie in (0, 1), got {level}")
    return level


def check_choice(name, value, allowed):
    if value not in allowed:
        raise DataError(f"{name} must be one of {tuple(allowed)}, got {value!r}")
    return value


def check_study(study):
    from .data import StudyData

    if not isinstance(study, StudyData):
        raise DataError(f"expected a StudyData instance, got {type(study).__name__}")
    if study.n_complete < 2:
        raise DataError("need at least 2 subjects with complete covariates")
    return study
