"""Command-line interface: validate, impute, estimate, simulate, report.

Every CSV artifact starts with a ``# drimpute=<version> seed=<seed> config=<hash>``
line, and each command writes a ``metadata.json`` with the full resolved
configuration. Outputs carry no timestamps or thread counts, so reruns with
the same inputs, seed and config are byte-identical.

Exit codes: 0 success, 2 invalid data or configuration, 3 fitting failure.
"""
from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import pandas as pd

from . import __version__
from .data import (CsvSchema, LongitudinalDataset, fill_intermediate_gaps, fmt, ingest_long_csv, summarize,
                   validate_monotone, write_long_csv)
from .design import as_spec
from .errors import DataError, DrImputeError, FitError
from .estimators import GeeSpec, fit_gee, lsmean_contrast, write_fit_summary
from .imputers import (aipw_i_impute, aipw_s_impute, br_star_complete, compare_completed,
                       fit_baseline_time_model, paik_impute, write_model_coefficients)
from .inference import BootstrapPlan, bootstrap, normal_ci, write_replicates_csv
from .methods import IMPUTERS, LABELS, ModelSpecs, Pipeline, _evaluate, canonical_method, parse_estimand
from .simulation import CONSTRUCTS, ScenarioCell, SimulationConfig, grid_cells, run_scenario
from .weights import compute_weights, fit_hazards, write_weights_csv

log = logging.getLogger("drimpute")

EXIT_DATA = 2
EXIT_FIT = 3
IMPUTERS_CLI = ("paik", "aipw-i", "aipw-s", "br-star")


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=str) + "\n"


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


@dataclass(frozen=True)
class RunConfig:
    """Settings for the data commands, read from ``--config`` JSON.

    Keys: ``schema`` (CsvSchema fields), ``specs`` (ModelSpecs fields),
    ``estimands`` (list of estimand strings) and ``level`` (CI level).
    """
    schema: CsvSchema = field(default_factory=CsvSchema)
    specs: ModelSpecs = field(default_factory=ModelSpecs)
    estimands: tuple | None = None
    level: float = 0.95
    max_fail_frac: float = 0.10

    @classmethod
    def from_json(cls, obj: dict | None) -> "RunConfig":
        obj = dict(obj or {})
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise DataError(f"unknown config key(s): {', '.join(sorted(extra))}")
        if "schema" in obj:
            obj["schema"] = CsvSchema.from_mapping(obj["schema"])
        if "specs" in obj:
            spec_keys = {f.name for f in fields(ModelSpecs)}
            bad = set(obj["specs"]) - spec_keys
            if bad:
                raise DataError(f"unknown specs key(s): {', '.join(sorted(bad))}")
            obj["specs"] = ModelSpecs(**obj["specs"])
        if obj.get("estimands") is not None:
            obj["estimands"] = tuple(obj["estimands"])
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


def _load_json(path):
    if not path:
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"config is not valid JSON: {e}") from None


def _header(seed, config_hash, **extra) -> str:
    parts = [f"drimpute={__version__}", f"seed={seed}", f"config={config_hash}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_metadata(out, meta):
    _write_text(os.path.join(out, "metadata.json"), _canonical_json(meta))


def _load_dataset(args, cfg: RunConfig):
    if not args.input:
        raise DataError("--input is required")
    if not os.path.exists(args.input):
        raise DataError(f"input not found: {args.input}")
    ds = ingest_long_csv(args.input, cfg.schema)
    if getattr(args, "fill_gaps", False):
        try:
            validate_monotone(ds)
        except DataError:
            ds = fill_intermediate_gaps(ds)
            log.info("filled %d intermediate gap cell(s)", int(ds.filled.sum()))
    return ds, validate_monotone(ds)


def _has_provenance(path) -> bool:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                return "provenance" in [c.strip() for c in line.strip().split(",")]
    return False


def default_estimands(ds: LongitudinalDataset, specs: ModelSpecs) -> tuple:
    """Visit means, analysis-model coefficients and, with an arm term, LS-mean differences per visit."""
    out = [f"mean:{k}" for k in range(1, ds.m + 1)]
    spec = as_spec(specs.analysis).expand(visits=ds.visit_names())
    out += [f"coef:{nm}" for nm in spec.names]
    if specs.arm in spec.references() and specs.arm in ds.baseline_names:
        out += [f"lsmean:{fmt(t)}" for t in ds.time_codes]
    return tuple(out)


class CompletedAnalysis:
    """Picklable callable for completed-data input: fit the analysis model and evaluate estimands."""

    def __init__(self, specs: ModelSpecs, estimands):
        self.specs = specs
        self.estimands = tuple(estimands)
        self.parsed = [parse_estimand(e) for e in self.estimands]

    def fit(self, ds):
        return fit_gee(ds, GeeSpec(self.specs.analysis, correlation=self.specs.analysis_correlation))

    def __call__(self, ds):
        need_fit = any(k != "mean" for k, _ in self.parsed)
        fit = self.fit(ds) if need_fit else None
        return np.array([_evaluate(k, a, np.asarray(ds.y), fit, self.specs.arm) for k, a in self.parsed])


def _sandwich_se(kind, arg, ds, values, fit, arm):
    """Plug-in standard errors that treat nuisance models as known."""
    if kind == "mean" and values is not None:
        col = values[:, arg - 1]
        return float(col.std(ddof=1) / np.sqrt(col.size)) if col.size > 1 else float("nan")
    if fit is None:
        return float("nan")
    V = fit.robust_cov
    if kind == "coef":
        if arg not in fit.names:
            return 0.0
        k = fit.names.index(arg)
        return float(np.sqrt(max(V[k, k], 0.0)))
    if kind == "mean":
        X = ds.long_design(fit.design).reshape(ds.n, ds.m, -1)
        g = X[:, arg - 1, :].mean(axis=0)
    else:
        if arm not in fit.design.references():
            return 0.0
        g = lsmean_contrast(fit, arg, arm=arm)
    return float(np.sqrt(max(g @ V @ g, 0.0)))


def _configure_logging():
    level = os.environ.get("AIPW_LOG", "WARNING").upper()
    if level.isdigit():
        lv = int(level)
    else:
        lv = getattr(logging, level, None)
        if not isinstance(lv, int):
            lv = logging.WARNING
    logging.basicConfig(level=lv, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


# commands


def cmd_validate(args) -> int:
    cfg = RunConfig.from_json(_load_json(args.config))
    ds, profile = _load_dataset(args, cfg)
    out = _out_dir(args)
    chash = _hash({"command": "validate", "config": cfg.to_dict(), "fill_gaps": bool(args.fill_gaps)})
    head = _header(args.seed, chash)
    table = summarize(ds, profile)
    cols = list(table.columns)
    lines = [f"# {head}", ",".join(cols)]
    for _, r in table.iterrows():
        lines.append(",".join(fmt(r[c]) if isinstance(r[c], (float, np.floating)) else str(r[c]) for c in cols))
    _write_text(os.path.join(out, "summary.csv"), "\n".join(lines) + "\n")
    patterns = {str(j): int((profile.J == j).sum()) for j in range(1, ds.m + 1)}
    meta = {
        "drimpute": __version__,
        "command": "validate",
        "seed": args.seed,
        "config_hash": chash,
        "config": cfg.to_dict(),
        "input_fingerprint": ds.fingerprint,
        "n_subjects": ds.n,
        "n_visits": ds.m,
        "time_codes": [float(t) for t in ds.time_codes],
        "last_visit_counts": patterns,
        "filled_cells": int(ds.filled.sum()) if ds.filled is not None else 0,
        "fill_gaps": bool(args.fill_gaps),
    }
    _write_metadata(out, meta)
    print(f"valid: {ds.n} subjects, {ds.m} visits, monotone")
    return 0


def _impute(ds, profile, specs: ModelSpecs, method):
    """Completed data plus diagnostic artifacts for one imputation method."""
    arts = {}
    if method in ("aipw_i", "aipw_s", "br_star"):
        hms = fit_hazards(ds, profile, specs.hazard, pin_no_dropout=specs.pin_no_dropout)
        wt = compute_weights(hms, ds, profile, eps=specs.eps, mode=specs.positivity)
        arts["weights"] = wt
    if method in ("paik", "aipw_i"):
        sma, comp = paik_impute(ds, profile, specs.imputation)
        arts["models"] = sma.fits
        if method == "aipw_i":
            comp = aipw_i_impute(ds, profile, arts["weights"], sma)
    elif method == "aipw_s":
        btm = fit_baseline_time_model(ds, profile, specs.mean)
        arts["mean_fit"] = btm.fit
        comp = aipw_s_impute(ds, profile, arts["weights"], btm)
    else:
        pi_terms = specs.analysis if specs.pi_form == "inverse_x" else None
        comp = br_star_complete(ds, profile, arts["weights"], specs.imputation, pi_form=specs.pi_form,
                                select=specs.select, pi_terms=pi_terms)
        arts["models"] = comp.models
    return comp, arts


def cmd_impute(args) -> int:
    cfg = RunConfig.from_json(_load_json(args.config))
    if not args.method:
        raise DataError("--method is required")
    method = canonical_method(args.method)
    if method not in IMPUTERS:
        raise DataError(f"method {args.method!r} does not produce completed data; choose from "
                        f"{', '.join(IMPUTERS_CLI)}")
    ds, profile = _load_dataset(args, cfg)
    out = _out_dir(args)
    chash = _hash({"command": "impute", "method": method, "config": cfg.to_dict(),
                   "fill_gaps": bool(args.fill_gaps)})
    head = _header(args.seed, chash, method=method)
    comp, arts = _impute(ds, profile, cfg.specs, method)
    write_long_csv(ds, os.path.join(out, "completed.csv"), y=comp.values, provenance=comp.provenance,
                   header=head, schema=cfg.schema)
    if "models" in arts:
        write_model_coefficients(arts["models"], os.path.join(out, "models.csv"), header=head)
    if "mean_fit" in arts:
        write_fit_summary(arts["mean_fit"], os.path.join(out, "models.csv"), header=head)
    if "weights" in arts:
        write_weights_csv(arts["weights"], ds, profile, os.path.join(out, "weights.csv"), header=head)
    cmp = compare_completed(ds, comp)
    cols = list(cmp.columns)
    lines = [f"# {head}", ",".join(cols)]
    for _, r in cmp.iterrows():
        lines.append(",".join(str(int(r[c])) if c in ("visit", "n_observed", "n_imputed") else fmt(r[c])
                              for c in cols))
    _write_text(os.path.join(out, "comparison.csv"), "\n".join(lines) + "\n")
    meta = {
        "drimpute": __version__,
        "command": "impute",
        "method": method,
        "seed": args.seed,
        "config_hash": chash,
        "config": cfg.to_dict(),
        "fill_gaps": bool(args.fill_gaps),
        "filled_cells": int(ds.filled.sum()) if ds.filled is not None else 0,
        "input_fingerprint": ds.fingerprint,
        "n_truncated": int(arts["weights"].n_truncated) if "weights" in arts else 0,
    }
    _write_metadata(out, meta)
    print(f"{LABELS[method]}: wrote completed data for {ds.n} subjects to {out}")
    return 0


def cmd_estimate(args) -> int:
    cfg = RunConfig.from_json(_load_json(args.config))
    if not args.input:
        raise DataError("--input is required")
    completed_input = os.path.exists(args.input) and _has_provenance(args.input)
    method = canonical_method(args.method) if args.method else None
    if method is None and not completed_input:
        raise DataError("--method is required unless --input is a completed dataset")
    if completed_input and method is not None:
        raise DataError("--input is already a completed dataset; drop --method")
    ds, profile = _load_dataset(args, cfg)
    if completed_input and not ds.observed.all():
        raise DataError("completed dataset has missing outcomes")
    specs = cfg.specs
    estimands = cfg.estimands or default_estimands(ds, specs)
    out = _out_dir(args)
    B = int(args.bootstrap or 0)
    chash = _hash({"command": "estimate", "method": method, "config": cfg.to_dict(), "estimands": estimands,
                   "bootstrap": B, "fill_gaps": bool(args.fill_gaps), "completed_input": completed_input})
    head = _header(args.seed, chash, method=method or "completed")
    parsed = [parse_estimand(e) for e in estimands]

    if completed_input:
        task = CompletedAnalysis(specs, estimands)
        fit = task.fit(ds)
        point = task(ds)
        values = np.asarray(ds.y)
    else:
        task = Pipeline(specs, (method,), estimands, keep_objects=True)
        res = task.run(ds, profile)
        if method in res.errors:
            raise res.errors[method]
        point = res.estimates
        comp, fits = res.objects[method]
        values = comp.values if comp is not None else None
        if isinstance(fits, dict):
            fit = fits.get(False, fits.get(True))
        else:
            fit = fits
        task.keep_objects = False

    if B:
        plan = BootstrapPlan(B=B, seed=args.seed, threads=args.threads, max_fail_frac=cfg.max_fail_frac)
        boot = bootstrap(ds, plan, task, names=list(estimands))
        se = boot.se
        se_method = "bootstrap"
        write_replicates_csv(boot, os.path.join(out, "replicates.csv"), header=head)
    else:
        boot = None
        se_fits = fits if not completed_input and isinstance(fits, dict) else None
        se = []
        for kind, arg in parsed:
            f = se_fits[kind == "mean"] if se_fits else fit
            se.append(_sandwich_se(kind, arg, ds, values, f, specs.arm))
        se = np.array(se)
        se_method = "sandwich"

    lines = [f"# {head}", "estimand,estimate,se,lower,upper,se_method"]
    for e, p, s in zip(estimands, point, se):
        if np.isfinite(s):
            ci = normal_ci(p, s, cfg.level)
            lo, hi = fmt(ci.lower), fmt(ci.upper)
        else:
            lo = hi = ""
        lines.append(",".join([e, fmt(p), fmt(s), lo, hi, se_method]))
    _write_text(os.path.join(out, "estimates.csv"), "\n".join(lines) + "\n")
    if fit is not None:
        write_fit_summary(fit, os.path.join(out, "fit.csv"), header=head)
    meta = {
        "drimpute": __version__,
        "command": "estimate",
        "method": method,
        "completed_input": completed_input,
        "seed": args.seed,
        "config_hash": chash,
        "config": cfg.to_dict(),
        "estimands": list(estimands),
        "bootstrap": B,
        "bootstrap_scope": ("analysis model only" if completed_input else "full pipeline") if B else None,
        "bootstrap_failures": (boot.failures if boot else {}),
        "se_method": se_method,
        "fill_gaps": bool(args.fill_gaps),
        "input_fingerprint": ds.fingerprint,
    }
    _write_metadata(out, meta)
    print(f"wrote {len(estimands)} estimate(s) to {out}")
    return 0


def _parse_cells(obj, construct):
    labels = obj.pop("cells", None)
    if labels is None:
        return grid_cells(construct)
    cells = []
    for lab in labels:
        lab = lab.replace("✓", "+").replace("✗", "-")
        if len(lab) != 4 or lab[0] != "Y" or lab[2] != "P" or lab[1] not in "+-" or lab[3] not in "+-":
            raise DataError(f"bad cell label {lab!r}; use e.g. 'Y+P-'")
        cells.append(ScenarioCell(lab[1] == "+", lab[3] == "+", construct))
    return cells


def cmd_simulate(args) -> int:
    obj = dict(_load_json(args.config) or {})
    construct = args.construct or obj.pop("construct", "moderate")
    obj.pop("construct", None)
    if construct not in CONSTRUCTS:
        raise DataError(f"unknown construct {construct!r}")
    cells = _parse_cells(obj, construct)
    try:
        cfg = SimulationConfig.from_json(obj)
    except TypeError as e:
        raise DataError(f"bad simulation config: {e}") from None
    over = {}
    if args.seed is not None:
        over["seed"] = int(args.seed)
    if args.bootstrap is not None:
        over["B"] = int(args.bootstrap)
    over["threads"] = int(args.threads)
    cfg = replace(cfg, **over)
    out = _out_dir(args)
    for cell in cells:
        def progress(r, total, _lab=cell.label):
            log.info("%s %s: repeat %d/%d", construct, _lab, r, total)
        rep = run_scenario(cell, cfg, progress=progress)
        tag = f"{construct}_{cell.label.replace('+', 'p').replace('-', 'm')}"
        rep.to_csv(os.path.join(out, f"metrics_{tag}.csv"))
        head = " ".join(f"{k}={v}" for k, v in rep.meta.items())
        lines = [f"# drimpute={__version__} {head}", "repeat,method,estimand,estimate,se"]
        names = [(m, e) for m in cfg.methods for e in cfg.estimands]
        for r in range(rep.estimates.shape[0]):
            for k, (m, e) in enumerate(names):
                lines.append(f"{r + 1},{m},{e},{fmt(rep.estimates[r, k])},{fmt(rep.ses[r, k])}")
        _write_text(os.path.join(out, f"estimates_{tag}.csv"), "\n".join(lines) + "\n")
        print(f"{construct} {cell.label}: done")
    meta = {
        "drimpute": __version__,
        "command": "simulate",
        "construct": construct,
        "cells": [c.label for c in cells],
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
    }
    _write_metadata(out, meta)
    return 0


METRIC_COLS = ["bias", "rmse", "ints", "covp", "mcsd", "avese"]


def _read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    meta = dict(kv.split("=", 1) for kv in first.lstrip("# ").split() if "=" in kv)
    df = pd.read_csv(path, comment="#")
    df["cell"] = meta.get("cell", "")
    df["construct"] = meta.get("construct", "")
    return df, meta


def cmd_report(args) -> int:
    if not args.input:
        raise DataError("--input is required (a metrics CSV or a directory of them)")
    paths = sorted(glob.glob(os.path.join(args.input, "metrics_*.csv"))) if os.path.isdir(args.input) else [args.input]
    if not paths or not all(os.path.exists(p) for p in paths):
        raise DataError(f"no metrics files found at {args.input}")
    frames, metas = zip(*(_read_metrics(p) for p in paths))
    df = pd.concat(frames, ignore_index=True)
    out = _out_dir(args)
    seeds = sorted({m.get("seed", "") for m in metas})
    configs = sorted({m.get("config", "") for m in metas})
    head = _header(",".join(seeds), ",".join(configs))
    cols = ["construct", "cell", "method", "estimand"] + METRIC_COLS + ["failures"]
    lines = [f"# {head}", ",".join(cols)]
    for _, r in df.iterrows():
        lines.append(",".join([str(r.construct), str(r.cell), r.method, r.estimand]
                              + [fmt(r[c]) for c in METRIC_COLS] + [str(int(r.failures))]))
    _write_text(os.path.join(out, "report.csv"), "\n".join(lines) + "\n")
    md = [f"<!-- {head} -->", ""]
    order = {m: i for i, m in enumerate(LABELS)}
    for (construct, est), g in df.groupby(["construct", "estimand"], sort=True):
        md.append(f"### {est} ({construct})")
        md.append("")
        cells = sorted(g.cell.unique())
        md.append("| Method | " + " | ".join(f"{c} Bias | {c} RMSE | {c} IntS | {c} CovP" for c in cells) + " |")
        md.append("|---|" + "---|" * (4 * len(cells)))
        for m in sorted(g.method.unique(), key=lambda x: order.get(x, 99)):
            row = [LABELS.get(m, m)]
            for c in cells:
                hit = g[(g.method == m) & (g.cell == c)]
                if hit.empty:
                    row += [""] * 4
                else:
                    h = hit.iloc[0]
                    row += [_r2(h.bias), _r2(h.rmse), _r2(h.ints), _r2(h.covp)]
            md.append("| " + " | ".join(row) + " |")
        md.append("")
    _write_text(os.path.join(out, "report.md"), "\n".join(md))
    print(f"report for {len(paths)} cell(s) written to {out}")
    return 0


def _r2(v):
    return "" if pd.isna(v) else f"{v:.2f}"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drimpute", description="Doubly robust imputation for monotone dropout.")
    p.add_argument("--version", action="version", version=f"drimpute {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--input", help="input CSV (long format) or, for report, a metrics CSV or directory")
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", help="output directory (default: current directory)")
        sp.add_argument("--seed", type=int, default=None if not data else 0, help="master seed")
        sp.add_argument("--threads", type=int, default=1, help="worker processes (output does not depend on it)")
        if data:
            sp.add_argument("--fill-gaps", action="store_true", help="fill intermediate gaps before analysis")

    common(sub.add_parser("validate", help="check a dataset and summarize dropout"))
    sp = sub.add_parser("impute", help="write a completed dataset")
    common(sp)
    sp.add_argument("--method", help="paik, aipw-i, aipw-s or br-star")
    sp = sub.add_parser("estimate", help="estimate from raw data with a method, or from a completed dataset")
    common(sp)
    sp.add_argument("--method", help="paik, aipw-i, aipw-s, br-star, mmrm, gee or wgee")
    sp.add_argument("--bootstrap", type=int, default=0, metavar="B", help="bootstrap replicates for SEs")
    sp = sub.add_parser("simulate", help="run the Monte Carlo scenario grid")
    common(sp, data=False)
    sp.add_argument("--construct", choices=CONSTRUCTS, help="dropout construct")
    sp.add_argument("--bootstrap", type=int, default=None, metavar="B", help="bootstrap replicates per repeat")
    sp = sub.add_parser("report", help="tabulate simulation metrics")
    common(sp, data=False)
    return p


COMMANDS = {"validate": cmd_validate, "impute": cmd_impute, "estimate": cmd_estimate,
            "simulate": cmd_simulate, "report": cmd_report}


def _fail(args, exc, code) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    subjects = getattr(exc, "subjects", None)
    if subjects:
        payload["subjects"] = [str(s) for s in subjects]
    text = json.dumps(payload, sort_keys=True)
    print(text, file=sys.stderr)
    out = getattr(args, "out", None)
    if out:
        try:
            os.makedirs(out, exist_ok=True)
            _write_text(os.path.join(out, "error.json"), text + "\n")
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        args.threads = 1
    try:
        return COMMANDS[args.command](args)
    except DataError as e:
        return _fail(args, e, EXIT_DATA)
    except DrImputeError as e:
        return _fail(args, e, EXIT_FIT)
    except (np.linalg.LinAlgError, FloatingPointError) as e:
        return _fail(args, FitError(str(e)), EXIT_FIT)


if __name__ == "__main__":
    sys.exit(main())
