"""Completed-data constructions: Paik sequential mean imputation, AIPW-I, AIPW-S and BR*."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from .data import LongitudinalDataset, MissingnessProfile, fmt
from .design import DesignSpec, as_spec
from .errors import DataError, FitError
from .estimators import MmrmFit, fit_mmrm
from .glm import LinearModelFit, fit_ols, forward_select
from .weights import WeightTable, check_history_design

log = logging.getLogger(__name__)

METHODS = ("paik", "aipw_i", "aipw_s", "br_star")
PI_FORMS = ("inverse", "raw", "inverse_x")


@dataclass(frozen=True, eq=False)
class SequentialModelArray:
    """Triangular array of fits keyed by (k, s): E[Y_k | L̄_s, on study at s+1], 1 <= s < k <= M.

    ``predictions[(k, s)]`` holds the fit evaluated at every subject with
    J >= s (NaN elsewhere).
    """
    fits: dict
    designs: dict
    predictions: dict = field(repr=False)
    fingerprint: str = ""


@dataclass(frozen=True, eq=False)
class CompletedDataset:
    values: np.ndarray
    imputed: np.ndarray
    method: str
    source: LongitudinalDataset = field(repr=False)
    fingerprints: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict, repr=False)

    @property
    def provenance(self) -> list:
        """Per-cell tags: 'observed' or 'imputed:<method>' by the source cell's status."""
        filled = self.source.filled
        out = []
        for i in range(self.values.shape[0]):
            row = []
            for j in range(self.values.shape[1]):
                if self.imputed[i, j]:
                    row.append(f"imputed:{self.method}")
                elif filled is not None and filled[i, j]:
                    row.append("imputed:gapfill")
                else:
                    row.append("observed")
            out.append(row)
        return out

    def as_dataset(self) -> LongitudinalDataset:
        return self.source.with_outcomes(self.values)


def _completed(ds, values, method, fingerprints=None, models=None):
    values = np.array(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise FitError(f"{method}: completed data contain non-finite values")
    values.setflags(write=False)
    imputed = ~ds.observed
    imputed.setflags(write=False)
    return CompletedDataset(values=values, imputed=imputed, method=method, source=ds,
                            fingerprints=dict(fingerprints or {}), models=dict(models or {}))


def _design_ks(designs, k, s):
    if isinstance(designs, Mapping):
        d = designs.get((k, s), designs.get(k, designs.get("default")))
        if d is None:
            raise DataError(f"no imputation design for (k={k}, s={s})")
        return as_spec(d)
    return as_spec(designs)


def paik_impute(ds: LongitudinalDataset, profile: MissingnessProfile, designs):
    """Sequential mean imputation; returns (SequentialModelArray, CompletedDataset).

    For each k, m^{k-1}_k is fit on subjects observed at k. Moving down
    s = k-2..1, the current working outcome (observed Y_k, or the prediction
    made for subjects who left after s+1) is regressed on L̄_s over subjects
    on study at s+1, and subjects with J = s receive that prediction.
    """
    J = profile.J
    frame = ds.subject_frame
    y = np.array(ds.y)
    fits, specs, preds = {}, {}, {}
    for k in range(2, ds.m + 1):
        cur = y[:, k - 1].copy()
        for s in range(k - 1, 0, -1):
            spec = _design_ks(designs, k, s).expand(history=ds.history_names(s))
            check_history_design(ds, spec, s, f"imputation design ({k},{s})")
            at = J >= s
            fit_rows = J >= s + 1
            X = spec.matrix(frame, n=ds.n)
            try:
                fit = fit_ols(X[fit_rows], cur[fit_rows], names=spec.names, design=spec)
            except FitError as e:
                raise FitError(f"sequential model (k={k}, s={s}): {e}") from None
            pred = np.full(ds.n, np.nan)
            pred[at] = X[at] @ fit.coefficients
            fits[(k, s)], specs[(k, s)], preds[(k, s)] = fit, spec, pred
            drop = J == s
            cur[drop] = pred[drop]
        y[:, k - 1] = cur
    sma = SequentialModelArray(fits=fits, designs=specs, predictions=preds, fingerprint=ds.fingerprint)
    return sma, _completed(ds, y, "paik", {"data": ds.fingerprint})


def aipw_i_impute(ds: LongitudinalDataset, profile: MissingnessProfile, wt: WeightTable,
                  sma: SequentialModelArray) -> CompletedDataset:
    """Y_k = (R_k / pi_k) Y_k + sum_{j<k} w_j m^j_k(L̄_j) for k >= 2; visit 1 passes through."""
    for name, fp in (("weight table", wt.fingerprint), ("sequential models", sma.fingerprint)):
        if fp and fp != ds.fingerprint:
            raise DataError(f"{name} fingerprint does not match the dataset")
    R = profile.R == 1
    w = wt.w
    out = np.array(ds.y)
    for k in range(2, ds.m + 1):
        lead = np.where(R[:, k - 1], np.where(R[:, k - 1], ds.y[:, k - 1], 0.0) / wt.pi[:, k - 1], 0.0)
        aug = np.zeros(ds.n)
        for j in range(1, k):
            aug += np.where(R[:, j - 1], w[:, j - 1] * np.nan_to_num(sma.predictions[(k, j)]), 0.0)
        out[:, k - 1] = lead + aug
    return _completed(ds, out, "aipw_i", {"data": ds.fingerprint, "weights": wt.fingerprint})


@dataclass(frozen=True, eq=False)
class BaselineTimeModel:
    fit: MmrmFit
    means: np.ndarray = field(repr=False)  # N x M predictions m(X_i0, t_k)


def fit_baseline_time_model(ds: LongitudinalDataset, profile: MissingnessProfile, design,
                            mmrm: MmrmFit | None = None) -> BaselineTimeModel:
    """Single MMRM (unstructured covariance, ML) on baseline covariates and time."""
    spec = as_spec(design)
    allowed = set(ds.baseline_names) | {"t", "visit"} | set(ds.visit_names())
    for f in spec.references():
        if f in ds.time_varying_names or f not in allowed:
            raise DataError(f"baseline-and-time only: design references {f!r}")
    fit = mmrm if mmrm is not None else fit_mmrm(ds, profile, spec)
    return BaselineTimeModel(fit=fit, means=fit.fitted)


def aipw_s_impute(ds: LongitudinalDataset, profile: MissingnessProfile, wt: WeightTable,
                  btm: BaselineTimeModel) -> CompletedDataset:
    """Y_k = (R_k / pi_k) Y_k + (1 - R_k / pi_k) m(X_0, t_k) for k >= 2."""
    if wt.fingerprint and wt.fingerprint != ds.fingerprint:
        raise DataError("weight table fingerprint does not match the dataset")
    R = profile.R == 1
    out = np.array(ds.y)
    for k in range(2, ds.m + 1):
        ratio = np.where(R[:, k - 1], 1.0 / wt.pi[:, k - 1], 0.0)
        yk = np.where(R[:, k - 1], ds.y[:, k - 1], 0.0)
        out[:, k - 1] = ratio * yk + (1.0 - ratio) * btm.means[:, k - 1]
    return _completed(ds, out, "aipw_s", {"data": ds.fingerprint, "weights": wt.fingerprint})


def _pi_columns(form, pi_col, frame, baseline_terms):
    if form == "inverse":
        return {"pi_inv": 1.0 / pi_col}, [("pi_inv",)]
    if form == "raw":
        return {"pi_hat": pi_col}, [("pi_hat",)]
    if form == "inverse_x":
        cols = {"pi_inv": 1.0 / pi_col}
        terms = [("pi_inv",)]
        for t in baseline_terms:
            nm = "pi_inv@" + "@".join(t)
            v = 1.0 / pi_col
            for f in t:
                v = v * frame[f]
            cols[nm] = v
            terms.append((nm,))
        return cols, terms
    raise ValueError(f"unknown pi form {form!r}; expected one of {PI_FORMS}")


def br_star_impute(ds: LongitudinalDataset, profile: MissingnessProfile, wt: WeightTable, design, k: int,
                   pi_form: str = "inverse", select: bool = True, return_models: bool = False,
                   pi_terms=None):
    """Recursive regression estimate of Y_k for every subject.

    Step s = k-1: regress observed Y_k on L̄_{k-1} plus the pi_k term over
    subjects observed at k. Steps s = k-2..1: regress the previous fitted
    values on L̄_s plus the pi_{s+1} term over subjects on study at s+1.
    Each regression keeps the intercept and pi term and forward-selects the
    remaining design terms by AIC. Fitted values replace observed Y_k.

    With ``pi_form="inverse_x"`` the pi term is 1/pi times each baseline
    column in ``pi_terms`` (default: the design's baseline terms), which
    should be the baseline columns of the analysis model.
    """
    if k < 2 or k > ds.m:
        raise DataError(f"target visit must be in 2..{ds.m}")
    J = profile.J
    base_frame = ds.subject_frame
    cur = np.array(ds.y[:, k - 1])
    models = {}
    for s in range(k - 1, 0, -1):
        spec = _design_ks(design, k, s).expand(history=ds.history_names(s))
        check_history_design(ds, spec, s, f"BR* design ({k},{s})")
        fit_rows = J >= s + 1
        at = J >= s
        static = [t for t in spec.terms if t and not any(f.startswith("y") and f[1:].isdigit() for f in t)]
        pcols, pterms = _pi_columns(pi_form, wt.pi[:, s], base_frame,
                                    static if pi_terms is None else _baseline_terms(pi_terms))
        frame = {**base_frame, **pcols}
        base = DesignSpec(((),) + tuple(pterms))
        cands = [t for t in spec.terms if t]
        sub = {nm: v[fit_rows] for nm, v in frame.items()}
        chosen = forward_select(base, cands, sub, cur[fit_rows]) if select and cands else base.plus(*cands)
        X = chosen.matrix(frame, n=ds.n)
        try:
            fit = fit_ols(X[fit_rows], cur[fit_rows], names=chosen.names, design=chosen)
        except FitError as e:
            raise FitError(f"BR* regression (k={k}, s={s}): {e}") from None
        nxt = np.full(ds.n, np.nan)
        nxt[at] = X[at] @ fit.coefficients
        cur = nxt
        models[(k, s)] = fit
    return (cur, models) if return_models else cur


def _baseline_terms(design):
    """Non-intercept terms of ``design`` that involve neither time nor outcomes."""
    out = []
    for t in as_spec(design).terms:
        if t and not any(f in ("t", "visit") or f.startswith(("y", "v")) and f[1:].isdigit() for f in t):
            out.append(t)
    return out


def br_star_complete(ds: LongitudinalDataset, profile: MissingnessProfile, wt: WeightTable, design,
                     pi_form: str = "inverse", select: bool = True, pi_terms=None) -> CompletedDataset:
    """Run BR* for every target visit k = 2..M; visit 1 passes through."""
    if wt.fingerprint and wt.fingerprint != ds.fingerprint:
        raise DataError("weight table fingerprint does not match the dataset")
    out = np.array(ds.y)
    models = {}
    for k in range(2, ds.m + 1):
        out[:, k - 1], mk = br_star_impute(ds, profile, wt, design, k, pi_form=pi_form, select=select,
                                           return_models=True, pi_terms=pi_terms)
        models.update(mk)
    return _completed(ds, out, "br_star", {"data": ds.fingerprint, "weights": wt.fingerprint}, models)


def compare_completed(ds: LongitudinalDataset, completed: CompletedDataset) -> pd.DataFrame:
    rows = []
    obs = ds.observed
    for j in range(ds.m):
        o = ds.y[obs[:, j], j]
        imp = completed.values[completed.imputed[:, j], j]
        rows.append(dict(
            visit=j + 1,
            time=float(ds.time_codes[j]),
            n_observed=int(o.size),
            observed_mean=float(o.mean()) if o.size else np.nan,
            n_imputed=int(imp.size),
            imputed_mean=float(imp.mean()) if imp.size else np.nan,
            completed_mean=float(completed.values[:, j].mean()),
        ))
    return pd.DataFrame(rows)


def write_model_coefficients(models: Mapping, dest, header: str | None = None) -> None:
    """Diagnostics CSV with one row per (k, s, term)."""
    lines = [f"# {header}"] if header else []
    lines.append("k,s,term,coefficient")
    for (k, s) in sorted(models):
        fit = models[(k, s)]
        for nm, b in zip(fit.names, fit.coefficients):
            lines.append(f"{k},{s},{nm},{fmt(b)}")
    text = "\n".join(lines) + "\n"
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
