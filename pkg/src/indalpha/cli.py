"""Command-line interface: ``indalpha fit | simulate | validate | version``.

Exit codes: 0 success, 1 input error, 2 numerical non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_study
from .estimator import IndividualizedAlpha
from .exceptions import DataError, IndAlphaError, SaturationError
from .inference import OMEGA_CONVENTIONS
from .report import FitReport
from .simulation import POWER_COLUMNS, SimDesign, load_design, power_curve, run_mc

OUT_ENV = "INDALPHA_OUT"
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

SUMMARY_COLUMNS = ("n", "parameter", "true", "mean", "rmse", "rmse_mcse", "mean_se", "coverage",
                   "replicates", "failures")
TEST_COLUMNS = ("n", "parameter", "true", "null", "level", "rejection_rate", "replicates",
                "failures")


def _out_dir(arg):
    out = Path(arg or os.environ.get(OUT_ENV) or "indalpha-out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _write(path, text):
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def _cell(v):
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else "NA"
    return str(v)


def _write_csv(path, columns, rows):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(columns)
            for row in rows:
                wr.writerow([_cell(row[c]) for c in columns])
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False,
                      default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)) + "\n"


def _finite(obj):
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def read_alpha_rows(path, w_names):
    """Alpha-design rows from a CSV whose header names alpha-model columns.

    An ``intercept`` column may be omitted (it defaults to 1) and an optional
    ``label`` column names each row.
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = [h.strip() for h in (reader.fieldnames or [])]
            records = list(reader)
    except FileNotFoundError:
        raise DataError(f"alpha-at file not found: {path}") from None
    unknown = set(header) - set(w_names) - {"label"}
    if unknown:
        raise DataError(f"{path.name}: unknown alpha column(s) {', '.join(sorted(unknown))}; "
                        f"expected {', '.join(w_names)}")
    rows, labels = [], []
    for pos, rec in enumerate(records):
        rec = {k.strip(): (v or "").strip() for k, v in rec.items()}
        vals = []
        for name in w_names:
            raw = rec.get(name)
            if raw is None and name == "intercept":
                raw = "1"
            if raw is None:
                raise DataError(f"{path.name}: missing required column '{name}'")
            try:
                vals.append(float(raw))
            except ValueError:
                raise DataError(f"{path.name} line {pos + 2}: non-numeric value {raw!r} "
                                f"in column '{name}'") from None
        rows.append(vals)
        labels.append(rec.get("label") or f"row{pos + 1}")
    return np.array(rows, dtype=float).reshape(-1, len(w_names)), labels


def _thresholds(text):
    out = []
    for tok in filter(None, (t.strip() for t in text.split(","))):
        if ":" in tok:
            val, direction = tok.split(":", 1)
        else:
            val, direction = tok, None
        try:
            c = float(val)
        except ValueError:
            raise DataError(f"bad range threshold {tok!r}") from None
        if direction is None:
            direction = "lower" if c < 0.8 else "upper"
        if direction not in ("lower", "upper"):
            raise DataError(f"range test direction must be 'lower' or 'upper', got {direction!r}")
        out.append((c, direction))
    return out


def cmd_fit(args):
    study, spec = load_study(args.data, args.spec, args.subjects, args.pairs)
    est = IndividualizedAlpha.from_spec(spec, ci_level=args.level, max_iter=args.max_iter,
                                        tol=args.tol, omega_convention=args.omega_convention,
                                        ipw=not args.no_ipw)
    est.fit(study)
    if args.alpha_at:
        rows, labels = read_alpha_rows(args.alpha_at, study.w_names)
    else:
        rows, labels = np.empty((0, len(study.w_names))), []
    report = FitReport.from_estimator(est, study, spec, rows, _thresholds(args.range_thresholds),
                                      args.test_level, labels)
    out = _out_dir(args.out)
    _write(out / "report.json", report.to_json())
    text = report.to_text()
    _write(out / "report.txt", text)
    sys.stdout.write(text)
    if not est.converged_:
        sys.stderr.write("error: estimating equations did not converge; see report.json\n")
        return EXIT_NUMERIC
    return EXIT_OK


def _design_doc(args):
    doc = load_design(args.design)
    kind = doc.get("kind", "monte-carlo")
    if kind not in ("monte-carlo", "power"):
        raise DataError(f"design kind must be 'monte-carlo' or 'power', got {kind!r}")
    allowed = {"kind", "design", "n_grid"} if kind == "monte-carlo" else {
        "kind", "design", "n_grid", "alpha_grid", "w_tildes", "thresholds", "replicates", "level"}
    bad = set(doc) - allowed
    if bad:
        raise DataError(f"unknown design key(s): {', '.join(sorted(bad))}")
    base = dict(doc.get("design", {}))
    if args.seed is not None:
        base["seed"] = args.seed
    if args.replicates is not None:
        base["replicates"] = args.replicates
        doc["replicates"] = args.replicates
    try:
        design = SimDesign.from_dict(base)
    except TypeError as exc:
        raise DataError(f"invalid design: {exc}") from None
    return kind, doc, design


def cmd_simulate(args):
    kind, doc, design = _design_doc(args)
    out = _out_dir(args.out)
    if args.jobs < 1:
        raise DataError("--jobs must be >= 1")
    if kind == "monte-carlo":
        summaries = [run_mc(design, n=n, jobs=args.jobs) for n in doc.get("n_grid", [design.n])]
        _write_csv(out / "summary.csv", SUMMARY_COLUMNS,
                   [r for s in summaries for r in s.table_rows()])
        _write_csv(out / "tests.csv", TEST_COLUMNS, [r for s in summaries for r in s.test_rows()])
        _write(out / "summary.json", _dump(_finite([s.to_dict() for s in summaries])))
        for s in summaries:
            sys.stdout.write(f"n={s.design.n}: {s.successes} fits, {s.failures} failures\n")
    else:
        thresholds = [tuple(t) for t in doc.get("thresholds", [[0.7, "lower"], [0.9, "upper"]])]
        rows = power_curve(doc["alpha_grid"], doc.get("n_grid", [design.n]),
                           w_tildes=doc.get("w_tildes", (0.2, 0.5, 0.8)), thresholds=thresholds,
                           replicates=doc.get("replicates", design.replicates), seed=design.seed,
                           level=doc.get("level", design.level), base=design, jobs=args.jobs)
        _write_csv(out / "power.csv", POWER_COLUMNS, rows)
        _write(out / "power.json", _dump(_finite({"design": design.to_dict(), "rows": rows})))
        sys.stdout.write(f"{len(rows)} power cells written\n")
    return EXIT_OK


def cmd_validate(args):
    study, spec = load_study(args.data, args.spec, args.subjects, args.pairs)
    sys.stdout.write("OK\n")
    sys.stdout.write(f"subjects {study.n}, complete {study.n_complete}, items {study.k}, "
                     f"pairs {len(study.pairs)}\n")
    for label, names in (("mean", study.x_names), ("variance", study.z_names),
                         ("alpha", study.w_names), ("missingness", study.q_names)):
        sys.stdout.write(f"{label} columns: {', '.join(names)}\n")
    return EXIT_OK


def cmd_version(args):
    sys.stdout.write(f"indalpha {__version__}\n")
    return EXIT_OK


def _data_args(p):
    p.add_argument("--data", required=True, help="long-format item CSV (subject_id, item_id, y, ...)")
    p.add_argument("--subjects", help="subject-level covariate CSV")
    p.add_argument("--pairs", help="pair-level covariate CSV (subject_id, item_i, item_j, ...)")
    p.add_argument("--spec", required=True, help="model specification JSON")


def build_parser():
    parser = argparse.ArgumentParser(prog="indalpha",
                                     description="Individualized coefficient alpha estimation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the model to CSV data and write a report")
    _data_args(p)
    p.add_argument("--alpha-at", help="CSV of alpha-model rows at which to report alpha")
    p.add_argument("--level", type=float, default=0.95, help="confidence level (default 0.95)")
    p.add_argument("--range-thresholds", default="0.7,0.9",
                   help="comma list of thresholds, optionally 'value:lower|upper' (default 0.7,0.9)")
    p.add_argument("--test-level", type=float, default=0.05, help="range-test size (default 0.05)")
    p.add_argument("--omega-convention", choices=OMEGA_CONVENTIONS, default="inverse")
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--no-ipw", action="store_true", help="complete-case fit without weighting")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./indalpha-out)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run a Monte Carlo or power-curve design")
    p.add_argument("--design", required=True,
                   help="design JSON, or a bundled name: table1, figure1, figure2")
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./indalpha-out)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="check data and spec without fitting")
    _data_args(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("version", help="print the version")
    p.set_defaults(func=cmd_version)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SaturationError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_NUMERIC
    except (IndAlphaError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
