"""Discrete-time dropout hazards, cumulative observation probabilities and AIPW visit coefficients."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import LongitudinalDataset, MissingnessProfile, fmt
from .design import DesignSpec, as_spec
from .errors import DataError, FitError, PositivityError
from .glm import LogisticModelFit, fit_logistic

log = logging.getLogger(__name__)

DEFAULT_EPS = 0.01


@dataclass(frozen=True)
class HazardModelSet:
    """Per-visit logistic hazard fits, keyed by 1-based visit j = 2..M.

    A model of ``None`` means the hazard was pinned to zero because no one
    dropped out at that visit.
    """
    models: dict
    designs: dict
    fingerprint: str = ""

    def coefficients(self) -> dict:
        return {j: (None if f is None else f.coefficients) for j, f in self.models.items()}


def _design_for(designs, j):
    if isinstance(designs, Mapping):
        try:
            return as_spec(designs[j])
        except KeyError:
            raise DataError(f"no hazard design for visit {j}") from None
    return as_spec(designs)


def check_history_design(ds: LongitudinalDataset, spec: DesignSpec, upto: int, what: str) -> None:
    """Refuse designs that reference outcomes or covariates from visits after ``upto``."""
    allowed = set(ds.baseline_names) | set(ds.history_names(upto))
    for f in spec.references():
        if f in allowed:
            continue
        if f.startswith("y") and f[1:].isdigit() or any(
                f.startswith(c + "_") and f[len(c) + 1:].isdigit() for c in ds.time_varying_names):
            raise DataError(f"future-data reference {f!r} in {what}")
        raise DataError(f"unknown design reference {f!r} in {what}")


def fit_hazards(ds: LongitudinalDataset, profile: MissingnessProfile, designs,
                pin_no_dropout: bool = False) -> HazardModelSet:
    """Logistic regression of dropout at visit j on L̄_{j-1}, among subjects still on study at j-1."""
    models, specs = {}, {}
    frame = ds.subject_frame
    for j in range(2, ds.m + 1):
        spec = _design_for(designs, j).expand(history=ds.history_names(j - 1))
        check_history_design(ds, spec, j - 1, f"hazard design for visit {j}")
        specs[j] = spec
        at_risk = profile.R[:, j - 2] == 1
        event = 1.0 - profile.R[at_risk, j - 1]
        if event.sum() == 0 and pin_no_dropout:
            models[j] = None
            continue
        X = spec.matrix(frame, n=ds.n)[at_risk]
        try:
            fit = fit_logistic(X, event, names=spec.names, design=spec)
        except FitError as e:
            raise type(e)(f"hazard model for visit {j}: {e}") from None
        if not fit.converged:
            log.warning("hazard model for visit %d did not converge", j)
        models[j] = fit
    return HazardModelSet(models=models, designs=specs, fingerprint=ds.fingerprint)


@dataclass(frozen=True, eq=False)
class WeightTable:
    """Hazards and cumulative probabilities, N x (M+1), column j-1 for visit j.

    lam[:, 0] = lam[:, M] = 0 and pi[:, M] = pi[:, M-1].
    """
    lam: np.ndarray
    pi: np.ndarray
    eps: float = DEFAULT_EPS
    mode: str = "error"
    n_truncated: int = 0
    fingerprint: str = ""
    w: np.ndarray | None = field(default=None, repr=False)

    @property
    def m(self):
        return self.lam.shape[1] - 1


def weight_table(lam, R, eps=DEFAULT_EPS, mode="error", subject_ids=None, fingerprint="") -> WeightTable:
    """Build a WeightTable from hazards lam (N x (M+1), padded with zeros)."""
    lam = np.array(lam, dtype=float)
    R = np.asarray(R)
    n, m1 = lam.shape
    lam[:, 0] = 0.0
    lam[:, -1] = 0.0
    pi = np.cumprod(1.0 - lam, axis=1)
    n_trunc = 0
    obs = np.zeros_like(pi, dtype=bool)
    obs[:, : m1 - 1] = R == 1
    low = obs & (pi < eps)
    if low.any():
        if mode == "error":
            rows = np.flatnonzero(low.any(axis=1))
            ids = [subject_ids[i] for i in rows] if subject_ids is not None else rows.tolist()
            raise PositivityError(ids, eps)
        if mode != "truncate":
            raise ValueError(f"unknown positivity mode {mode!r}")
        n_trunc = int(low.sum())
        pi = np.maximum(pi, eps)
        lam = np.zeros_like(pi)
        lam[:, 1:] = 1.0 - pi[:, 1:] / pi[:, :-1]
        lam[:, -1] = 0.0
        pi[:, -1] = pi[:, -2]
    w = _coefficients(lam, pi, R)
    for a in (lam, pi, w):
        a.setflags(write=False)
    return WeightTable(lam=lam, pi=pi, eps=eps, mode=mode, n_truncated=n_trunc, fingerprint=fingerprint, w=w)


def compute_weights(hms: HazardModelSet, ds: LongitudinalDataset, profile: MissingnessProfile,
                    eps: float = DEFAULT_EPS, mode: str = "error") -> WeightTable:
    """Predicted hazards for every subject at visits j <= J_i + 1 (zero beyond), then cumulative products."""
    if hms.fingerprint and hms.fingerprint != ds.fingerprint:
        raise DataError("hazard models were fitted on a different dataset")
    m = ds.m
    lam = np.zeros((ds.n, m + 1))
    frame = ds.subject_frame
    for j in range(2, m + 1):
        fit = hms.models[j]
        if fit is None:
            continue
        rows = profile.R[:, j - 2] == 1
        X = hms.designs[j].matrix(frame, n=ds.n)[rows]
        lam[rows, j - 1] = fit.predict(X)
    return weight_table(lam, profile.R, eps=eps, mode=mode, subject_ids=ds.subject_ids,
                        fingerprint=ds.fingerprint)


def _coefficients(lam, pi, R):
    """w_ij = (C_ij - lam_{i,j+1} R_ij) / pi_{i,j+1}.

    Written in the equivalent form -lam_{j+1}/pi_{j+1} for j < J and 1/pi_J at
    j = J, which only touches pi at observed visits.
    """
    n, m1 = lam.shape
    m = m1 - 1
    R = np.asarray(R, dtype=bool)
    J = R.sum(axis=1)
    w = np.where(R, -lam[:, 1:] / pi[:, 1:], 0.0)
    rows = np.arange(n)
    w[rows, J - 1] = 1.0 / pi[rows, J - 1]
    return w


def aipw_visit_coefficients(wt: WeightTable, profile: MissingnessProfile, i: int | None = None) -> np.ndarray:
    """AIPW visit coefficients; a length-M vector for subject ``i`` or the full N x M matrix."""
    w = wt.w if wt.w is not None else _coefficients(wt.lam, wt.pi, profile.R)
    return w if i is None else np.array(w[i])


def write_weights_csv(wt: WeightTable, ds: LongitudinalDataset, profile: MissingnessProfile, dest,
                      header: str | None = None) -> None:
    w = aipw_visit_coefficients(wt, profile)
    lines = [f"# {header}"] if header else []
    lines.append("subject_id,visit,lambda_hat,pi_hat,w")
    for i, s in enumerate(ds.subject_ids):
        for j in range(ds.m):
            lines.append(",".join([s, fmt(ds.time_codes[j]), fmt(wt.lam[i, j]), fmt(wt.pi[i, j]), fmt(w[i, j])]))
    text = "\n".join(lines) + "\n"
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
