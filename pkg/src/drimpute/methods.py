"""One analysis pipeline for every method, so point estimates and bootstrap replicates share code.

Estimands are strings:

``mean:k``        E(Y_k), k 1-based
``coef:<term>``   a coefficient of the analysis (or the method's own) mean model
``lsmean:<t>``    arm difference at time code t, covariates at their means
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import LongitudinalDataset, validate_monotone
from .errors import DataError, DrImputeError
from .estimators import GeeSpec, fit_gee, fit_mmrm, fit_wgee, lsmean_diff
from .imputers import aipw_i_impute, aipw_s_impute, br_star_complete, fit_baseline_time_model, paik_impute
from .weights import compute_weights, fit_hazards

log = logging.getLogger(__name__)

ALL_METHODS = ("br_star", "aipw_i", "aipw_s", "paik", "mmrm", "wgee", "gee_ind")
IMPUTERS = ("br_star", "aipw_i", "aipw_s", "paik")
LABELS = {
    "br_star": "BR*", "aipw_i": "AIPW-I", "aipw_s": "AIPW-S", "paik": "Paik",
    "mmrm": "MMRM", "wgee": "WGEE", "gee_ind": "GEE-IND",
}


def canonical_method(name: str) -> str:
    key = name.strip().lower().replace("-", "_").replace("*", "_star")
    aliases = {"gee": "gee_ind", "br_star": "br_star", "brstar": "br_star", "br": "br_star"}
    key = aliases.get(key, key)
    if key not in ALL_METHODS:
        raise DataError(f"unknown method {name!r}; choose from {', '.join(ALL_METHODS)}")
    return key


@dataclass(frozen=True)
class ModelSpecs:
    """Designs used by the pipeline.

    hazard: dropout model at visit j over L̄_{j-1}; imputation: sequential
    outcome models (Paik, AIPW-I, BR*) over L̄_s; mean: the baseline-by-time
    model of MMRM, WGEE, GEE-IND and AIPW-S; mean_visit: the same model with
    categorical time, used by MMRM, WGEE and GEE-IND for visit means;
    analysis: the model fitted to completed data.
    """
    hazard: str = "1 + x2 + hist"
    imputation: str = "1 + x1 + x2 + hist"
    mean: str = "1 + x1 + x2 + t + x2:t"
    mean_visit: str = "x1 + visit + x2:visit"
    analysis: str = "1 + x1 + x2 + t + x2:t"
    eps: float = 0.01
    positivity: str = "error"
    pi_form: str = "inverse"
    select: bool = True
    wgee_correlation: str = "unstructured"
    analysis_correlation: str = "independence"
    arm: str = "x2"
    pin_no_dropout: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def scenario_specs(y_correct: bool, p_correct: bool, **kw) -> ModelSpecs:
    """Designs for the 2 x 2 correct/incorrect grid; incorrect models drop x2 and its interactions."""
    return ModelSpecs(
        hazard="1 + x2 + hist" if p_correct else "1 + hist",
        imputation="1 + x1 + x2 + hist" if y_correct else "1 + x1 + hist",
        mean="1 + x1 + x2 + t + x2:t" if y_correct else "1 + x1 + t",
        mean_visit="x1 + visit + x2:visit" if y_correct else "x1 + visit",
        **kw,
    )


def parse_estimand(e: str):
    kind, _, arg = e.partition(":")
    if kind == "mean":
        return kind, int(arg)
    if kind == "coef":
        return kind, arg
    if kind == "lsmean":
        return kind, float(arg)
    raise DataError(f"unknown estimand {e!r}")


@dataclass
class PipelineResult:
    estimates: np.ndarray
    methods: tuple
    estimands: tuple
    failures: dict = field(default_factory=dict)
    objects: dict = field(default_factory=dict, repr=False)
    errors: dict = field(default_factory=dict, repr=False)

    def get(self, method, estimand) -> float:
        return float(self.estimates[self.methods.index(method) * len(self.estimands) + self.estimands.index(estimand)])

    def table(self) -> np.ndarray:
        return self.estimates.reshape(len(self.methods), len(self.estimands))


def _evaluate(kind, arg, values=None, fit=None, arm="x2"):
    if kind == "mean":
        if values is not None:
            return float(values[:, arg - 1].mean())
        return float(fit.fitted[:, arg - 1].mean())
    if kind == "coef":
        return fit.coef(arg, 0.0)
    if arm not in fit.design.references():
        return 0.0
    return lsmean_diff(fit, arg, arm=arm)


class Pipeline:
    """Picklable callable: dataset -> flat vector over methods x estimands (NaN for failed methods)."""

    def __init__(self, specs: ModelSpecs, methods=ALL_METHODS, estimands=("mean:3",), keep_objects=False):
        self.specs = specs
        self.methods = tuple(canonical_method(m) for m in methods)
        self.estimands = tuple(estimands)
        self.parsed = [parse_estimand(e) for e in self.estimands]
        self.keep_objects = keep_objects

    @property
    def names(self) -> list:
        return [f"{m}/{e}" for m in self.methods for e in self.estimands]

    def __call__(self, ds: LongitudinalDataset) -> np.ndarray:
        return self.run(ds).estimates

    def run(self, ds: LongitudinalDataset, profile=None) -> PipelineResult:
        sp = self.specs
        profile = profile or validate_monotone(ds)
        cache: dict = {}
        failures: dict = {}
        errors: dict = {}

        def get(key, fn):
            if key not in cache:
                try:
                    cache[key] = fn()
                except DrImputeError as e:
                    cache[key] = e
            if isinstance(cache[key], Exception):
                raise cache[key]
            return cache[key]

        def weights():
            hms = fit_hazards(ds, profile, sp.hazard, pin_no_dropout=sp.pin_no_dropout)
            return compute_weights(hms, ds, profile, eps=sp.eps, mode=sp.positivity)

        def paik():
            return paik_impute(ds, profile, sp.imputation)

        def mmrm(design):
            return lambda: fit_mmrm(ds, profile, design)

        mean_kinds = [k == "mean" for k, _ in self.parsed]
        designs = {True: sp.mean_visit or sp.mean, False: sp.mean}
        analysis = GeeSpec(sp.analysis, correlation=sp.analysis_correlation)
        pi_terms = sp.analysis if sp.pi_form == "inverse_x" else None
        out = np.full(len(self.methods) * len(self.estimands), np.nan)
        objects = {}
        for mi, method in enumerate(self.methods):
            row = slice(mi * len(self.estimands), (mi + 1) * len(self.estimands))
            try:
                vals = np.full(len(self.estimands), np.nan)
                if method in IMPUTERS:
                    if method == "paik":
                        comp = get("paik", paik)[1]
                    elif method == "aipw_i":
                        comp = aipw_i_impute(ds, profile, get("w", weights), get("paik", paik)[0])
                    elif method == "aipw_s":
                        btm = fit_baseline_time_model(ds, profile, sp.mean, mmrm=get(("mmrm", sp.mean), mmrm(sp.mean)))
                        comp = aipw_s_impute(ds, profile, get("w", weights), btm)
                    else:
                        comp = br_star_complete(ds, profile, get("w", weights), sp.imputation,
                                                pi_form=sp.pi_form, select=sp.select, pi_terms=pi_terms)
                    fit = fit_gee(comp, analysis) if not all(mean_kinds) else None
                    objects[method] = (comp, fit)
                    for ei, (kind, arg) in enumerate(self.parsed):
                        vals[ei] = _evaluate(kind, arg, comp.values, fit, sp.arm)
                else:
                    fits = {}
                    for is_mean in sorted(set(mean_kinds)):
                        design = designs[is_mean]
                        if method == "mmrm":
                            fits[is_mean] = get(("mmrm", design), mmrm(design))
                        elif method == "wgee":
                            fits[is_mean] = fit_wgee(ds, profile, get("w", weights), GeeSpec(design, sp.wgee_correlation))
                        else:
                            fits[is_mean] = fit_gee(ds, GeeSpec(design))
                    objects[method] = (None, fits)
                    for ei, (kind, arg) in enumerate(self.parsed):
                        vals[ei] = _evaluate(kind, arg, None, fits[mean_kinds[ei]], sp.arm)
                out[row] = vals
            except DrImputeError as e:
                failures[method] = f"{type(e).__name__}: {e}"
                errors[method] = e
                out[row] = np.nan
                log.debug("method %s failed: %s", method, e)
        return PipelineResult(out, self.methods, self.estimands, failures,
                              objects if self.keep_objects else {}, errors if self.keep_objects else {})
