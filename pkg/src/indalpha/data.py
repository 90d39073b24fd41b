"""Study data containers, design construction and CSV ingestion.

Data arrive as up to three normalized tables:

* an item table (long format): ``subject_id, item_id, y`` plus item-level
  covariates;
* a subject table: ``subject_id`` plus subject-level covariates;
* an optional pair table: ``subject_id, item_i, item_j`` plus pair-level
  covariates.

A :class:`ModelSpec` (read from JSON) says which columns feed which design,
and the link / working-structure choices.  :func:`load_study` joins the
tables into a :class:`StudyData` holding dense design arrays.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
import pandas as pd

from .exceptions import DataError

MEAN_LINKS = ("identity", "log", "logit")
VAR_LINKS = ("identity-positive", "log")
STRUCTURES = ("independence", "exchangeable")
ALPHA_STRUCTURES = STRUCTURES + ("gaussian",)
VARIANCE_FUNCTIONS = ("constant", "gaussian")
INTERCEPT_MODES = ("shared", "per-item", "none")
VARIANCE_MODES = ("covariate", "per-item-constant")

MISSING_TOKENS = ("", "NA")


def build_pair_index(k):
    """Lexicographically ordered item pairs ``(i, j)`` with ``1 <= i < j <= k``.

    >>> build_pair_index(3)
    [(1, 2), (1, 3), (2, 3)]
    """
    k = int(k)
    if k < 2:
        raise DataError(f"need at least 2 items to form pairs, got k={k}")
    return list(combinations(range(1, k + 1), 2))


def _pair_positions(k):
    """Zero-based (i, j) index arrays matching :func:`build_pair_index`."""
    pairs = np.asarray(build_pair_index(k)) - 1
    return pairs[:, 0], pairs[:, 1]


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------

_SECTION_KEYS = {
    "mean": {"link", "intercept", "columns", "working"},
    "variance": {"link", "mode", "intercept", "columns", "working", "variance_function"},
    "alpha": {"intercept", "columns", "pooled", "working", "variance_function"},
    "missingness": {"intercept", "columns", "delta_column"},
}
_REQUIRED = {
    "mean": ("columns",),
    "variance": ("mode",),
    "alpha": ("columns",),
    "missingness": (),
}


@dataclass(frozen=True)
class ModelSpec:
    """Link functions, design-column mapping and working structures.

    The JSON form groups fields by estimating-equation set::

        {
          "mean":        {"link": "identity", "intercept": "per-item",
                          "columns": ["age"], "working": "exchangeable"},
          "variance":    {"link": "log", "mode": "per-item-constant",
                          "working": "independence"},
          "alpha":       {"columns": ["age"], "intercept": true,
                          "pooled": true, "working": "independence"},
          "missingness": {"columns": ["gender"], "intercept": true}
        }

    ``variance.variance_function`` and ``alpha.variance_function`` choose
    the per-subject variance function scaling the working correlation
    (``"constant"`` or ``"gaussian"``); ``alpha.working`` additionally
    accepts ``"gaussian"`` for the full normal-theory covariance of the
    pairwise statistics.

    ``mean``, ``variance`` and ``alpha`` are required, as are
    ``mean.columns``, ``variance.mode`` and ``alpha.columns``.  Unknown keys
    are rejected.
    """

    mean_link: str = "identity"
    var_link: str = "log"
    mean_structure: str = "exchangeable"
    var_structure: str = "independence"
    alpha_structure: str = "gaussian"
    var_function: str = "gaussian"
    alpha_function: str = "constant"
    intercept_mode: str = "per-item"
    variance_mode: str = "per-item-constant"
    variance_intercept: bool = True
    alpha_intercept: bool = True
    pooled_alpha: bool = False
    mean_columns: tuple = ()
    variance_columns: tuple = ()
    alpha_columns: tuple = ()
    missingness_columns: tuple = ()
    missingness_intercept: bool = True
    delta_column: str | None = None

    def __post_init__(self):
        for name in ("mean_columns", "variance_columns", "alpha_columns", "missingness_columns"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        _check_choice("mean.link", self.mean_link, MEAN_LINKS)
        _check_choice("variance.link", self.var_link, VAR_LINKS)
        _check_choice("variance.mode", self.variance_mode, VARIANCE_MODES)
        _check_choice("mean.intercept", self.intercept_mode, INTERCEPT_MODES)
        for key, val in (("mean.working", self.mean_structure),
                         ("variance.working", self.var_structure)):
            _check_choice(key, val, STRUCTURES)
        _check_choice("alpha.working", self.alpha_structure, ALPHA_STRUCTURES)
        _check_choice("variance.variance_function", self.var_function, VARIANCE_FUNCTIONS)
        _check_choice("alpha.variance_function", self.alpha_function, VARIANCE_FUNCTIONS)
        if self.variance_mode == "covariate" and not (self.variance_columns or self.variance_intercept):
            raise DataError("variance model has no columns and no intercept")
        if not (self.alpha_columns or self.alpha_intercept):
            raise DataError("alpha model has no columns and no intercept")
        if self.intercept_mode == "none" and not self.mean_columns:
            raise DataError("mean model has no columns and no intercept")

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise DataError("model spec must be a JSON object")
        unknown = set(doc) - set(_SECTION_KEYS)
        if unknown:
            raise DataError(f"unknown spec key(s): {', '.join(sorted(unknown))}")
        for section in ("mean", "variance", "alpha"):
            if section not in doc:
                raise DataError(f"missing required spec key: '{section}'")
        for section, body in doc.items():
            if not isinstance(body, dict):
                raise DataError(f"spec key '{section}' must be an object")
            bad = set(body) - _SECTION_KEYS[section]
            if bad:
                raise DataError(f"unknown spec key(s) in '{section}': {', '.join(sorted(bad))}")
            for req in _REQUIRED[section]:
                if req not in body:
                    raise DataError(f"missing required spec key: '{section}.{req}'")

        mean, var, alpha = doc["mean"], doc["variance"], doc["alpha"]
        miss = doc.get("missingness", {})
        return cls(
            mean_link=mean.get("link", "identity"),
            var_link=var.get("link", "log"),
            mean_structure=mean.get("working", "exchangeable"),
            var_structure=var.get("working", "independence"),
            alpha_structure=alpha.get("working", "gaussian"),
            var_function=var.get("variance_function", "gaussian"),
            alpha_function=alpha.get("variance_function", "constant"),
            intercept_mode=mean.get("intercept", "per-item"),
            variance_mode=var["mode"],
            variance_intercept=bool(var.get("intercept", True)),
            alpha_intercept=bool(alpha.get("intercept", True)),
            pooled_alpha=bool(alpha.get("pooled", False)),
            mean_columns=_str_list("mean.columns", mean["columns"]),
            variance_columns=_str_list("variance.columns", var.get("columns", [])),
            alpha_columns=_str_list("alpha.columns", alpha["columns"]),
            missingness_columns=_str_list("missingness.columns", miss.get("columns", [])),
            missingness_intercept=bool(miss.get("intercept", True)),
            delta_column=miss.get("delta_column"),
        )

    def to_dict(self):
        return {
            "mean": {"link": self.mean_link, "intercept": self.intercept_mode,
                     "columns": list(self.mean_columns), "working": self.mean_structure},
            "variance": {"link": self.var_link, "mode": self.variance_mode,
                         "intercept": self.variance_intercept,
                         "columns": list(self.variance_columns), "working": self.var_structure,
                         "variance_function": self.var_function},
            "alpha": {"intercept": self.alpha_intercept, "columns": list(self.alpha_columns),
                      "pooled": self.pooled_alpha, "working": self.alpha_structure,
                      "variance_function": self.alpha_function},
            "missingness": {"intercept": self.missingness_intercept,
                            "columns": list(self.missingness_columns),
                            "delta_column": self.delta_column},
        }

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path.name} line {exc.lineno}: invalid JSON ({exc.msg})") from None
        except OSError as exc:
            raise DataError(f"cannot read spec file {path}: {exc.strerror}") from None
        return cls.from_dict(doc)

    def estimator_params(self):
        """Keyword arguments for :class:`indalpha.IndividualizedAlpha`."""
        return {
            "mean_link": self.mean_link,
            "var_link": self.var_link,
            "mean_structure": self.mean_structure,
            "var_structure": self.var_structure,
            "alpha_structure": self.alpha_structure,
            "var_function": self.var_function,
            "alpha_function": self.alpha_function,
        }


def _check_choice(key, value, allowed):
    if value not in allowed:
        raise DataError(f"spec key '{key}' must be one of {allowed}, got {value!r}")


def _str_list(key, value):
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
        raise DataError(f"spec key '{key}' must be a list of column names")
    if len(set(value)) != len(value):
        raise DataError(f"spec key '{key}' lists a column twice")
    return tuple(value)


# ---------------------------------------------------------------------------
# Study data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StudyData:
    """Complete responses plus covariate designs for the three GEE sets.

    Attributes
    ----------
    y : ndarray, shape (n, k)
        Item responses; never missing.
    x : ndarray, shape (n, k, px)
        Mean-model design rows ``X_ip``.
    z : ndarray, shape (n, k, pz)
        Variance-model design rows ``Z_ip``.
    w : ndarray, shape (n, k(k-1)/2, pw)
        Alpha-model design rows ``W_ijp`` in :func:`build_pair_index` order.
    q : ndarray, shape (n, pq)
        Missingness-model design rows ``Q_p``; always observed.
    delta : ndarray of int, shape (n,)
        1 when subject ``p`` has all covariates observed, else 0.  Design
        rows of incomplete subjects may hold NaN.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    q: np.ndarray
    delta: np.ndarray
    x_names: tuple = ()
    z_names: tuple = ()
    w_names: tuple = ()
    q_names: tuple = ()
    subject_ids: tuple = ()
    item_ids: tuple = ()
    pooled: bool = False

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        if y.ndim != 2:
            raise DataError("y must be an (n, k) matrix")
        n, k = y.shape
        if k < 2:
            raise DataError(f"need at least 2 items, got k={k}")
        if not np.all(np.isfinite(y)):
            raise DataError("missing response: y must be complete and finite")
        npairs = k * (k - 1) // 2

        x = _as_3d("x", self.x, n, k)
        z = _as_3d("z", self.z, n, k)
        w = _as_3d("w", self.w, n, npairs)
        q = np.array(self.q, dtype=float)
        if q.ndim != 2 or q.shape[0] != n:
            raise DataError(f"q must have shape (n, pq) with n={n}, got {q.shape}")
        if not np.all(np.isfinite(q)):
            raise DataError("missingness covariates Q must be fully observed")
        delta = np.asarray(self.delta)
        if delta.shape != (n,) or not np.all(np.isin(delta, (0, 1))):
            raise DataError("delta must be a length-n vector of 0/1 indicators")
        delta = delta.astype(np.int8)

        obs = delta == 1
        for name, arr in (("x", x), ("z", z), ("w", w)):
            bad = obs & ~np.all(np.isfinite(arr), axis=(1, 2))
            if np.any(bad):
                p = int(np.flatnonzero(bad)[0])
                sid = self.subject_ids[p] if self.subject_ids else p
                raise DataError(f"subject {sid} has delta=1 but a missing {name}-design cell")

        names = {}
        for name, arr, default in (("x_names", x, "x"), ("z_names", z, "z"),
                                   ("w_names", w, "w"), ("q_names", q, "q")):
            given = tuple(getattr(self, name))
            width = arr.shape[-1]
            if not given:
                given = tuple(f"{default}{c}" for c in range(width))
            if len(given) != width:
                raise DataError(f"{name} has {len(given)} entries for {width} columns")
            names[name] = given

        subject_ids = tuple(self.subject_ids) or tuple(range(1, n + 1))
        item_ids = tuple(self.item_ids) or tuple(range(1, k + 1))
        if len(subject_ids) != n or len(item_ids) != k:
            raise DataError("subject_ids / item_ids lengths do not match y")

        for attr, arr in (("y", y), ("x", x), ("z", z), ("w", w), ("q", q), ("delta", delta)):
            arr.flags.writeable = False
            object.__setattr__(self, attr, arr)
        for attr, val in names.items():
            object.__setattr__(self, attr, val)
        object.__setattr__(self, "subject_ids", subject_ids)
        object.__setattr__(self, "item_ids", item_ids)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def k(self):
        return self.y.shape[1]

    @property
    def pairs(self):
        return build_pair_index(self.k)

    @property
    def n_complete(self):
        return int(self.delta.sum())

    def subset(self, index):
        """New StudyData with subjects reordered / selected by ``index``."""
        index = np.asarray(index)
        return StudyData(
            y=self.y[index], x=self.x[index], z=self.z[index], w=self.w[index],
            q=self.q[index], delta=self.delta[index],
            x_names=self.x_names, z_names=self.z_names, w_names=self.w_names,
            q_names=self.q_names,
            subject_ids=tuple(self.subject_ids[i] for i in index),
            item_ids=self.item_ids, pooled=self.pooled,
        )


def _as_3d(name, arr, n, m):
    arr = np.array(arr, dtype=float)
    if arr.ndim == 2 and arr.shape[0] == n * m:
        arr = arr.reshape(n, m, -1)
    if arr.ndim != 3 or arr.shape[:2] != (n, m):
        raise DataError(f"{name} design must have shape ({n}, {m}, p), got {arr.shape}")
    if arr.shape[2] == 0:
        raise DataError(f"{name} design has no columns")
    return arr


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _read_table(path, required, label):
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"{label} file not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"{path.name}: cannot parse CSV ({exc})") from None
    df.columns = [c.strip() for c in df.columns]
    for col in required:
        if col not in df.columns:
            raise DataError(f"{path.name}: missing required column '{col}'")
    if len(set(df.columns)) != len(df.columns):
        raise DataError(f"{path.name}: duplicate column names in header")
    df = df.apply(lambda s: s.str.strip())
    df.attrs["file"] = path.name
    return df


def _line(df, pos):
    # header is line 1
    return f"{df.attrs.get('file', 'table')} line {pos + 2}"


def _numeric(df, col, allow_missing):
    out = np.empty(len(df))
    for pos, raw in enumerate(df[col].tolist()):
        if raw in MISSING_TOKENS:
            if not allow_missing:
                raise DataError(f"{_line(df, pos)}: missing response in column '{col}'")
            out[pos] = np.nan
            continue
        try:
            val = float(raw)
        except ValueError:
            raise DataError(f"{_line(df, pos)}: non-numeric value {raw!r} in column '{col}'") from None
        if not math.isfinite(val):
            raise DataError(f"{_line(df, pos)}: non-finite value {raw!r} in column '{col}'")
        out[pos] = val
    return out


def _sort_ids(ids):
    ids = list(ids)
    try:
        return sorted(ids, key=int)
    except ValueError:
        return sorted(ids)


def load_study(data, spec, subjects=None, pairs=None):
    """Read and validate study tables.

    Parameters
    ----------
    data : path
        Long-format item table with ``subject_id, item_id, y``.
    spec : path or ModelSpec
        JSON model specification (see :class:`ModelSpec`).
    subjects, pairs : path, optional
        Subject-level and pair-level covariate tables.

    Returns
    -------
    study : StudyData
    spec : ModelSpec
    """
    if not isinstance(spec, ModelSpec):
        spec = ModelSpec.from_json(spec)
    items = _read_table(data, ("subject_id", "item_id", "y"), "data")
    subj = _read_table(subjects, ("subject_id",), "subjects") if subjects is not None else None
    pair = _read_table(pairs, ("subject_id", "item_i", "item_j"), "pairs") if pairs is not None else None
    return build_study(items, spec, subj, pair), spec


def build_study(items, spec, subjects=None, pairs=None):
    """Assemble a :class:`StudyData` from string-typed tables (see :func:`load_study`)."""
    y_vals = _numeric(items, "y", allow_missing=False)

    keys = list(zip(items["subject_id"], items["item_id"]))
    seen = {}
    for pos, key in enumerate(keys):
        if key in seen:
            raise DataError(f"{_line(items, pos)}: duplicate (subject, item) row {key} "
                            f"(first seen at {_line(items, seen[key])})")
        seen[key] = pos

    subject_ids = _sort_ids(set(items["subject_id"]))
    if subjects is not None:
        dup = subjects["subject_id"].duplicated()
        if dup.any():
            pos = int(np.flatnonzero(dup.to_numpy())[0])
            raise DataError(f"{_line(subjects, pos)}: duplicate subject_id {subjects['subject_id'].iloc[pos]!r}")
        known = set(subjects["subject_id"])
        absent = [s for s in subject_ids if s not in known]
        if absent:
            raise DataError(f"subject {absent[0]!r} in data file is absent from subjects file")
    item_ids = _sort_ids(set(items["item_id"]))
    n, k = len(subject_ids), len(item_ids)
    if k < 2:
        raise DataError(f"need at least 2 items, got k={k}")
    s_index = {s: i for i, s in enumerate(subject_ids)}
    i_index = {s: i for i, s in enumerate(item_ids)}
    rows = np.array([s_index[s] for s, _ in keys])
    cols = np.array([i_index[i] for _, i in keys])

    y = np.full((n, k), np.nan)
    y[rows, cols] = y_vals
    if np.isnan(y).any():
        p, i = np.argwhere(np.isnan(y))[0]
        raise DataError(f"missing response: subject {subject_ids[p]!r} has no row for item {item_ids[i]!r}")

    pairs_ij = build_pair_index(k)
    pair_pos = {(i - 1, j - 1): m for m, (i, j) in enumerate(pairs_ij)}
    pair_rows = pair_idx = None
    if pairs is not None:
        pr, pm = [], []
        seen_pairs = set()
        for pos, (s, a, b) in enumerate(zip(pairs["subject_id"], pairs["item_i"], pairs["item_j"])):
            if s not in s_index:
                raise DataError(f"{_line(pairs, pos)}: subject {s!r} absent from subject/data files")
            if a not in i_index or b not in i_index:
                raise DataError(f"{_line(pairs, pos)}: unknown item in pair ({a!r}, {b!r})")
            ia, ib = i_index[a], i_index[b]
            if ia >= ib:
                raise DataError(f"{_line(pairs, pos)}: pair ({a!r}, {b!r}) must satisfy item_i < item_j")
            if (s, ia, ib) in seen_pairs:
                raise DataError(f"{_line(pairs, pos)}: duplicate pair row")
            seen_pairs.add((s, ia, ib))
            pr.append(s_index[s])
            pm.append(pair_pos[(ia, ib)])
        pair_rows, pair_idx = np.array(pr, dtype=int), np.array(pm, dtype=int)

    def subject_level(col):
        if subjects is not None and col in subjects.columns:
            vals = _numeric(subjects, col, allow_missing=True)
            out = np.full(n, np.nan)
            for pos, sid in enumerate(subjects["subject_id"]):
                if sid in s_index:
                    out[s_index[sid]] = vals[pos]
            return out
        if col in items.columns:
            vals = _numeric(items, col, allow_missing=True)
            out = np.full(n, np.nan)
            out[rows] = vals
            grid = np.full((n, k), np.nan)
            grid[rows, cols] = vals
            same = np.all((grid == grid[:, :1]) | (np.isnan(grid) & np.isnan(grid[:, :1])), axis=1)
            if not np.all(same):
                p = int(np.flatnonzero(~same)[0])
                raise DataError(f"column '{col}' is used as subject-level but varies across items "
                                f"for subject {subject_ids[p]!r}")
            return grid[:, 0]
        return None

    def item_level(col):
        if col in items.columns and col not in ("subject_id", "item_id", "y"):
            vals = _numeric(items, col, allow_missing=True)
            out = np.full((n, k), np.nan)
            out[rows, cols] = vals
            return out
        vals = subject_level(col)
        if vals is None:
            return None
        return np.repeat(vals[:, None], k, axis=1)

    def pair_level(col):
        if pairs is not None and col in pairs.columns and col not in ("subject_id", "item_i", "item_j"):
            if spec.pooled_alpha:
                raise DataError(f"alpha column '{col}' is pair-level but alpha.pooled is set")
            vals = _numeric(pairs, col, allow_missing=True)
            out = np.full((n, len(pairs_ij)), np.nan)
            out[pair_rows, pair_idx] = vals
            return out
        vals = subject_level(col)
        if vals is None:
            return None
        return np.repeat(vals[:, None], len(pairs_ij), axis=1)

    def lookup(col, fn, where):
        vals = fn(col)
        if vals is None:
            raise DataError(f"missing required column '{col}' (looked in {where})")
        return vals

    # mean design
    x_cols, x_names = [], []
    if spec.intercept_mode == "shared":
        x_cols.append(np.ones((n, k)))
        x_names.append("intercept")
    elif spec.intercept_mode == "per-item":
        for c, iid in enumerate(item_ids):
            x_cols.append(np.tile(np.eye(k)[c], (n, 1)))
            x_names.append(f"item[{iid}]")
    for col in spec.mean_columns:
        x_cols.append(lookup(col, item_level, "item/subject tables"))
        x_names.append(col)

    z_cols, z_names = [], []
    if spec.variance_mode == "per-item-constant":
        for c, iid in enumerate(item_ids):
            z_cols.append(np.tile(np.eye(k)[c], (n, 1)))
            z_names.append(f"item[{iid}]")
    else:
        if spec.variance_intercept:
            z_cols.append(np.ones((n, k)))
            z_names.append("intercept")
        for col in spec.variance_columns:
            z_cols.append(lookup(col, item_level, "item/subject tables"))
            z_names.append(col)

    w_cols, w_names = [], []
    if spec.alpha_intercept:
        w_cols.append(np.ones((n, len(pairs_ij))))
        w_names.append("intercept")
    for col in spec.alpha_columns:
        w_cols.append(lookup(col, pair_level, "pair/subject tables"))
        w_names.append(col)

    q_cols, q_names = [], []
    if spec.missingness_intercept:
        q_cols.append(np.ones(n))
        q_names.append("intercept")
    for col in spec.missingness_columns:
        vals = lookup(col, subject_level, "subject table")
        if np.isnan(vals).any():
            p = int(np.flatnonzero(np.isnan(vals))[0])
            raise DataError(f"missingness covariate '{col}' is missing for subject {subject_ids[p]!r}")
        q_cols.append(vals)
        q_names.append(col)
    if not q_cols:
        raise DataError("missingness model has no columns and no intercept")

    x = np.stack(x_cols, axis=-1)
    z = np.stack(z_cols, axis=-1)
    w = np.stack(w_cols, axis=-1)
    q = np.stack(q_cols, axis=-1)

    complete = (np.all(np.isfinite(x), axis=(1, 2)) & np.all(np.isfinite(z), axis=(1, 2))
                & np.all(np.isfinite(w), axis=(1, 2)))
    if spec.delta_column is not None:
        vals = lookup(spec.delta_column, subject_level, "subject table")
        if np.isnan(vals).any() or not np.all(np.isin(vals, (0.0, 1.0))):
            raise DataError(f"delta column '{spec.delta_column}' must hold 0/1 for every subject")
        delta = vals.astype(np.int8)
        bad = (delta == 1) & ~complete
        if bad.any():
            p = int(np.flatnonzero(bad)[0])
            raise DataError(f"subject {subject_ids[p]!r} has delta=1 but a missing design cell")
    else:
        delta = complete.astype(np.int8)

    return StudyData(
        y=y, x=x, z=z, w=w, q=q, delta=delta,
        x_names=tuple(x_names), z_names=tuple(z_names), w_names=tuple(w_names),
        q_names=tuple(q_names), subject_ids=tuple(subject_ids), item_ids=tuple(item_ids),
        pooled=spec.pooled_alpha,
    )


def _fmt(v):
    return "NA" if not np.isfinite(v) else repr(float(v))


def write_study(study, directory, spec=None):
    """Write ``study`` as item/subject/pair CSVs plus a matching spec JSON.

    The written spec maps every design column verbatim (no generated
    intercepts), so :func:`load_study` on the output reproduces the design
    arrays exactly.  Values are written with 17 significant digits.

    Returns a dict of the written paths, keyed ``data``, ``subjects``,
    ``pairs`` and ``spec``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = spec or ModelSpec()
    n, k = study.n, study.k
    xcols = [f"x__{c}" for c in range(study.x.shape[2])]
    zcols = [f"z__{c}" for c in range(study.z.shape[2])]
    wcols = [f"w__{c}" for c in range(study.w.shape[2])]
    qcols = [f"q__{c}" for c in range(study.q.shape[1])]

    item_rows = []
    for p in range(n):
        for i in range(k):
            item_rows.append([str(study.subject_ids[p]), str(study.item_ids[i]), _fmt(study.y[p, i])]
                             + [_fmt(v) for v in study.x[p, i]] + [_fmt(v) for v in study.z[p, i]])
    subj_rows = [[str(study.subject_ids[p]), str(int(study.delta[p]))] + [_fmt(v) for v in study.q[p]]
                 for p in range(n)]
    pair_rows = []
    for p in range(n):
        for m, (i, j) in enumerate(study.pairs):
            pair_rows.append([str(study.subject_ids[p]), str(study.item_ids[i - 1]),
                              str(study.item_ids[j - 1])] + [_fmt(v) for v in study.w[p, m]])

    paths = {"data": directory / "items.csv", "subjects": directory / "subjects.csv",
             "pairs": directory / "pairs.csv", "spec": directory / "spec.json"}
    pd.DataFrame(item_rows, columns=["subject_id", "item_id", "y"] + xcols + zcols).to_csv(
        paths["data"], index=False)
    pd.DataFrame(subj_rows, columns=["subject_id", "delta"] + qcols).to_csv(paths["subjects"], index=False)
    pd.DataFrame(pair_rows, columns=["subject_id", "item_i", "item_j"] + wcols).to_csv(
        paths["pairs"], index=False)

    out_spec = {
        "mean": {"link": spec.mean_link, "intercept": "none", "columns": xcols,
                 "working": spec.mean_structure},
        "variance": {"link": spec.var_link, "mode": "covariate", "intercept": False,
                     "columns": zcols, "working": spec.var_structure,
                     "variance_function": spec.var_function},
        "alpha": {"intercept": False, "columns": wcols, "pooled": False,
                  "working": spec.alpha_structure, "variance_function": spec.alpha_function},
        "missingness": {"intercept": False, "columns": qcols, "delta_column": "delta"},
    }
    paths["spec"].write_text(json.dumps(out_spec, indent=2) + "\n", encoding="utf-8")
    return paths
