"""Fit reports: a JSON-serializable record of one analysis and its text rendering."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .exceptions import DataError

_NUM = {"type": ["number", "null"]}
_COEF_ROW = {
    "type": "object",
    "required": ["name", "estimate", "se", "z", "p_value", "ci"],
    "additionalProperties": False,
    "properties": {"name": {"type": "string"}, "estimate": _NUM, "se": _NUM, "z": _NUM,
                   "p_value": _NUM, "ci": {"type": "array", "items": _NUM, "minItems": 2,
                                           "maxItems": 2}},
}
_RANGE = {
    "type": "object",
    "required": ["threshold", "direction", "z", "p_value", "reject", "level"],
    "additionalProperties": False,
    "properties": {"threshold": _NUM, "direction": {"enum": ["lower", "upper"]}, "z": _NUM,
                   "p_value": _NUM, "reject": {"type": "boolean"}, "level": _NUM},
}
_ALPHA = {
    "type": "object",
    "required": ["label", "w", "linear", "linear_se", "alpha", "level", "linear_ci", "ci",
                 "range_tests"],
    "additionalProperties": False,
    "properties": {
        "label": {"type": "string"}, "w": {"type": "array", "items": _NUM}, "linear": _NUM,
        "linear_se": _NUM, "alpha": _NUM, "level": _NUM,
        "linear_ci": {"type": "array", "items": _NUM}, "ci": {"type": "array", "items": _NUM},
        "range_tests": {"type": "array", "items": _RANGE},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "indalpha fit report",
    "type": "object",
    "required": ["version", "spec", "settings", "data", "missingness", "coefficients", "nuisance",
                 "convergence", "alpha"],
    "additionalProperties": False,
    "properties": {
        "version": {"type": "string"},
        "spec": {"type": "object"},
        "settings": {"type": "object"},
        "data": {
            "type": "object",
            "required": ["n_subjects", "n_complete", "k"],
            "properties": {"n_subjects": {"type": "integer"}, "n_complete": {"type": "integer"},
                           "k": {"type": "integer"}},
        },
        "missingness": {
            "type": "object",
            "required": ["fitted", "degenerate", "coefficients"],
            "properties": {"fitted": {"type": "boolean"}, "degenerate": {"type": "boolean"},
                           "converged": {"type": ["boolean", "null"]},
                           "iterations": {"type": ["integer", "null"]},
                           "floor_hits": {"type": ["integer", "null"]},
                           "mean_pi": _NUM,
                           "coefficients": {"type": "array", "items": _COEF_ROW}},
        },
        "coefficients": {
            "type": "object",
            "required": ["beta", "omega", "theta"],
            "additionalProperties": False,
            "properties": {b: {"type": "array", "items": _COEF_ROW} for b in ("beta", "omega", "theta")},
        },
        "nuisance": {"type": "array", "items": {"type": "object"}},
        "convergence": {
            "type": "object",
            "required": ["converged", "converged_sets", "iterations", "residual_norms"],
            "properties": {"converged": {"type": "boolean"},
                           "converged_sets": {"type": "array", "items": {"type": "boolean"}},
                           "iterations": {"type": "array", "items": {"type": "integer"}},
                           "residual_norms": {"type": "array", "items": _NUM},
                           "sandwich_clipped": {"type": "boolean"},
                           "weights_correction": {"type": "boolean"}},
        },
        "alpha": {"type": "array", "items": _ALPHA},
    },
}


def _clean(obj):
    """Replace non-finite floats by None so the report is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


@dataclass
class FitReport:
    """Everything needed to read one analysis without the code that produced it."""

    version: str
    spec: dict
    settings: dict
    data: dict
    missingness: dict
    coefficients: dict
    nuisance: list
    convergence: dict
    alpha: list = field(default_factory=list)

    @classmethod
    def from_estimator(cls, est, study, spec, alpha_rows=(), range_thresholds=(), test_level=0.05,
                       labels=None):
        from . import __version__

        miss = est.missingness_
        gee = est.gee_fit_
        alpha = []
        for pos, row in enumerate(alpha_rows):
            a = est.alpha_estimate(row)
            tests = [est.range_test(row, thr, direction, test_level).to_dict()
                     for thr, direction in range_thresholds] if a.linear_se > 0 else []
            alpha.append({"label": labels[pos] if labels else f"row{pos + 1}", **a.to_dict(),
                          "range_tests": tests})
        doc = {
            "version": __version__,
            "spec": spec.to_dict(),
            "settings": {**{k: v for k, v in est.get_params().items()},
                         "test_level": test_level},
            "data": {"n_subjects": study.n, "n_complete": study.n_complete, "k": study.k},
            "missingness": {
                "fitted": miss is not None,
                "degenerate": bool(miss.degenerate) if miss is not None else False,
                "converged": bool(miss.converged) if miss is not None else None,
                "iterations": int(miss.iterations) if miss is not None else None,
                "floor_hits": int(miss.floor_hits) if miss is not None else None,
                "mean_pi": miss.mean_pi if miss is not None else None,
                "coefficients": est.coef_table("gamma"),
            },
            "coefficients": {b: est.coef_table(b) for b in ("beta", "omega", "theta")},
            "nuisance": [c.to_dict() for c in gee.nuisance],
            "convergence": {
                "converged": bool(gee.converged),
                "converged_sets": [bool(c) for c in gee.converged_sets],
                "iterations": [int(i) for i in gee.iterations],
                "residual_norms": [float(r) for r in gee.residual_norms],
                "sandwich_clipped": bool(est.sandwich_.clipped),
                "weights_correction": bool(est.sandwich_.correction_applied),
            },
            "alpha": alpha,
        }
        return cls.from_dict(_clean(doc))

    def to_dict(self):
        return {"version": self.version, "spec": self.spec, "settings": self.settings,
                "data": self.data, "missingness": self.missingness,
                "coefficients": self.coefficients, "nuisance": self.nuisance,
                "convergence": self.convergence, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise DataError("report must be a JSON object")
        missing = [k for k in REPORT_SCHEMA["required"] if k not in doc]
        if missing:
            raise DataError(f"report is missing key(s): {', '.join(missing)}")
        extra = set(doc) - set(REPORT_SCHEMA["properties"])
        if extra:
            raise DataError(f"unknown report key(s): {', '.join(sorted(extra))}")
        return cls(**{k: doc[k] for k in REPORT_SCHEMA["required"]})

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_text(self):
        lines = [f"indalpha {self.version} fit report",
                 f"subjects: {self.data['n_subjects']} ({self.data['n_complete']} with complete "
                 f"covariates), items: {self.data['k']}"]
        conv = self.convergence
        status = "converged" if conv["converged"] else "NOT CONVERGED"
        lines.append(f"status: {status}; iterations per set {conv['iterations']}")
        s = self.settings
        lines.append(f"working structures: mean={s['mean_structure']}, "
                     f"variance={s['var_structure']}/{s['var_function']}, "
                     f"alpha={s['alpha_structure']}/{s['alpha_function']}; "
                     f"omega convention: {s['omega_convention']}")
        miss = self.missingness
        if miss["coefficients"]:
            lines += ["", "Missingness model (logit of verification probability)"]
            lines += _table(miss["coefficients"], s["ci_level"])
        elif miss["fitted"]:
            lines += ["", "Missingness model: every subject complete; weights equal 1"]
        for block, title in (("beta", "Mean model"), ("omega", "Variance model"),
                             ("theta", "Alpha model (alpha = 1 - exp(W'theta))")):
            lines += ["", title]
            lines += _table(self.coefficients[block], s["ci_level"])
        if self.alpha:
            lines += ["", "Alpha estimates"]
            for a in self.alpha:
                lo, hi = a["ci"]
                lines.append(f"  {a['label']}: alpha = {_f(a['alpha'])} "
                             f"({a['level']:.0%} CI {_f(lo)}, {_f(hi)})")
                for t in a["range_tests"]:
                    rel = "<" if t["direction"] == "lower" else ">"
                    verdict = "reject" if t["reject"] else "retain"
                    lines.append(f"    H0: alpha {rel} {t['threshold']:g}: z = {_f(t['z'])}, "
                                 f"p = {_f(t['p_value'])} -> {verdict}")
        return "\n".join(lines) + "\n"


def _f(v, digits=4):
    return "NA" if v is None else f"{v:.{digits}f}"


def _table(rows, level):
    width = max([len(r["name"]) for r in rows] + [9])
    ci = f"{level:.0%} CI"
    out = [f"  {'term':<{width}}  {'estimate':>9}  {'se':>8}  {ci:>19}  {'p-value':>8}"]
    for r in rows:
        lo, hi = r["ci"]
        out.append(f"  {r['name']:<{width}}  {_f(r['estimate']):>9}  {_f(r['se']):>8}  "
                   f"{'(' + _f(lo) + ', ' + _f(hi) + ')':>19}  {_f(r['p_value']):>8}")
    return out
