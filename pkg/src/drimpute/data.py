"""Longitudinal panel data: container, missingness bookkeeping, CSV I/O.

Outcomes are stored wide (N subjects x M visits) with NaN for missing cells.
Visit j in the docstrings is 1-based, array index j-1.
"""
from __future__ import annotations

import hashlib
import io
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .design import as_spec
from .errors import DataError, FitError, NonMonotoneError
from .glm import fit_ols

_RESERVED = re.compile(r"^(t|y|y\d+|v\d+|hist|visit|subject_id|provenance)$")


def fmt(x) -> str:
    """17 significant digits, so text round-trips to the same double."""
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return format(float(x), ".17g")


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    subject_ids: tuple
    time_codes: np.ndarray
    y: np.ndarray
    baseline: np.ndarray
    baseline_names: tuple
    time_varying: np.ndarray | None = None
    time_varying_names: tuple = ()
    groups: np.ndarray | None = None
    filled: np.ndarray | None = None

    def __post_init__(self):
        y = _frozen(self.y)
        if y.ndim != 2:
            raise DataError("outcomes must be an N x M matrix")
        n, m = y.shape
        if m < 2:
            raise DataError(f"need at least 2 visits, got {m}")
        if n < 1:
            raise DataError("need at least 1 subject")
        t = _frozen(self.time_codes)
        if t.shape != (m,):
            raise DataError("time_codes length must equal the number of visits")
        if np.any(np.diff(t) <= 0):
            raise DataError("time_codes must be strictly increasing")
        ids = tuple(str(s) for s in self.subject_ids)
        if len(ids) != n:
            raise DataError("subject_ids length must equal N")
        if len(set(ids)) != n:
            raise DataError("subject ids are not unique")
        bad = np.flatnonzero(~np.isfinite(y[:, 0]))
        if bad.size:
            raise DataError("baseline outcome missing for subject(s): " + ", ".join(ids[i] for i in bad[:10]))
        x = _frozen(np.asarray(self.baseline, dtype=float).reshape(n, -1))
        names = tuple(self.baseline_names)
        if x.shape[1] != len(names):
            raise DataError("baseline_names does not match baseline columns")
        if not np.all(np.isfinite(x)):
            raise DataError("missing baseline covariate values")
        tv = None
        tv_names = tuple(self.time_varying_names)
        if self.time_varying is not None:
            tv = _frozen(self.time_varying)
            if tv.shape != (n, m, len(tv_names)):
                raise DataError("time-varying array must be N x M x q with q names")
            miss = ~np.isfinite(tv).all(axis=2) & np.isfinite(y)
            if miss.any():
                i = np.flatnonzero(miss.any(axis=1))
                raise DataError("time-varying covariate missing at an observed visit for subject(s): "
                                + ", ".join(ids[k] for k in i[:10]))
        elif tv_names:
            raise DataError("time_varying_names given without data")
        for nm in names + tv_names:
            if _RESERVED.match(nm):
                raise DataError(f"covariate name {nm!r} is reserved")
        if len(set(names + tv_names)) != len(names) + len(tv_names):
            raise DataError("duplicate covariate names")
        groups = None
        if self.groups is not None:
            groups = _frozen([str(g) for g in self.groups], dtype=object)
            if groups.shape != (n,):
                raise DataError("groups must have one label per subject")
        filled = None
        if self.filled is not None:
            filled = _frozen(self.filled, dtype=bool)
        for k, v in dict(subject_ids=ids, time_codes=t, y=y, baseline=x, baseline_names=names,
                         time_varying=tv, time_varying_names=tv_names, groups=groups, filled=filled).items():
            object.__setattr__(self, k, v)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return self.y.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return np.isfinite(self.y)

    def history_names(self, upto: int) -> list:
        """Names of L̄_s for s = upto: outcomes y1..ys then time-varying covariates by visit."""
        out = [f"y{j}" for j in range(1, upto + 1)]
        for j in range(1, upto + 1):
            out += [f"{c}_{j}" for c in self.time_varying_names]
        return out

    def visit_names(self) -> list:
        return [f"v{j}" for j in range(1, self.m + 1)]

    @cached_property
    def subject_frame(self) -> dict:
        """Column dict over subjects: baseline covariates, y1..yM, tv covariates by visit."""
        f = {nm: self.baseline[:, c] for c, nm in enumerate(self.baseline_names)}
        for j in range(self.m):
            f[f"y{j + 1}"] = self.y[:, j]
            for c, nm in enumerate(self.time_varying_names):
                f[f"{nm}_{j + 1}"] = self.time_varying[:, j, c]
        return f

    @cached_property
    def long_frame(self) -> dict:
        """Column dict over subject-visit rows (subject-major): covariates, t, v1..vM, y."""
        n, m = self.n, self.m
        f = {nm: np.repeat(self.baseline[:, c], m) for c, nm in enumerate(self.baseline_names)}
        f["t"] = np.tile(self.time_codes, n)
        eye = np.eye(m)
        for j in range(m):
            f[f"v{j + 1}"] = np.tile(eye[j], n)
        for c, nm in enumerate(self.time_varying_names):
            f[nm] = self.time_varying[:, :, c].reshape(-1)
        f["y"] = self.y.reshape(-1)
        return f

    def long_design(self, design) -> np.ndarray:
        """Design matrix of shape (N*M, p) for a long-format design."""
        spec = as_spec(design).expand(visits=self.visit_names())
        return spec.matrix(self.long_frame, n=self.n * self.m)

    def take(self, idx) -> "LongitudinalDataset":
        """Subset (or bootstrap resample) of subjects. Repeated subjects get suffixed ids."""
        idx = np.asarray(idx, dtype=int)
        seen: dict = {}
        ids = []
        for i in idx:
            s = self.subject_ids[i]
            k = seen.get(s, 0)
            seen[s] = k + 1
            ids.append(s if k == 0 else f"{s}#{k}")
        return LongitudinalDataset(
            subject_ids=tuple(ids),
            time_codes=self.time_codes,
            y=self.y[idx],
            baseline=self.baseline[idx],
            baseline_names=self.baseline_names,
            time_varying=None if self.time_varying is None else self.time_varying[idx],
            time_varying_names=self.time_varying_names,
            groups=None if self.groups is None else self.groups[idx],
            filled=None if self.filled is None else self.filled[idx],
        )

    def with_outcomes(self, y, filled=None) -> "LongitudinalDataset":
        return LongitudinalDataset(
            subject_ids=self.subject_ids,
            time_codes=self.time_codes,
            y=y,
            baseline=self.baseline,
            baseline_names=self.baseline_names,
            time_varying=self.time_varying,
            time_varying_names=self.time_varying_names,
            groups=self.groups,
            filled=filled if filled is not None else self.filled,
        )

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.time_codes, self.y, self.baseline):
            h.update(np.ascontiguousarray(a).tobytes())
        if self.time_varying is not None:
            h.update(np.ascontiguousarray(self.time_varying).tobytes())
        h.update("|".join(self.subject_ids + self.baseline_names + self.time_varying_names).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class MissingnessProfile:
    R: np.ndarray
    C: np.ndarray
    J: np.ndarray
    flagged: tuple = field(default=())

    @property
    def n(self):
        return self.R.shape[0]

    @property
    def m(self):
        return self.R.shape[1]

    @property
    def completers(self) -> np.ndarray:
        return self.J == self.m


def profile_from_last(J, m) -> MissingnessProfile:
    J = np.asarray(J, dtype=int)
    j = np.arange(1, m + 1)
    R = (j[None, :] <= J[:, None]).astype(np.int8)
    C = (j[None, :] == J[:, None]).astype(np.int8)
    for a in (R, C, J):
        a.setflags(write=False)
    return MissingnessProfile(R=R, C=C, J=J)


def validate_monotone(ds: LongitudinalDataset, allow_gaps: bool = False) -> MissingnessProfile:
    """R, C, J for a monotone dataset; non-monotone subjects raise unless ``allow_gaps``."""
    obs = ds.observed
    m = ds.m
    J = m - np.argmax(obs[:, ::-1], axis=1)
    prefix = np.arange(1, m + 1)[None, :] <= J[:, None]
    bad = np.flatnonzero((prefix & ~obs).any(axis=1))
    if bad.size and not allow_gaps:
        raise NonMonotoneError([ds.subject_ids[i] for i in bad])
    p = profile_from_last(J, m)
    return MissingnessProfile(R=p.R, C=p.C, J=p.J, flagged=tuple(ds.subject_ids[i] for i in bad))


def fill_intermediate_gaps(ds: LongitudinalDataset, design="auto") -> LongitudinalDataset:
    """Fill intermittent gaps with a sequential-regression prediction.

    Visits are processed in order. A gap at visit j (missing, with a later
    visit observed) is replaced by the fit of y_j on the design over L̄_{j-1},
    estimated on subjects observed at j whose history is complete (after
    earlier fills). Observed cells are never changed.
    """
    obs = ds.observed
    m = ds.m
    later = np.zeros_like(obs)
    later[:, :-1] = np.flip(np.cumsum(np.flip(obs[:, 1:], axis=1), axis=1), axis=1) > 0
    gaps = ~obs & later
    if not gaps.any():
        return ds
    if gaps[:, 0].any():
        raise DataError("gap at baseline visit")
    if ds.time_varying is not None:
        tv_missing = ~np.isfinite(ds.time_varying).all(axis=2) & gaps
        if tv_missing.any():
            raise DataError("time-varying covariate missing at an intermittent gap; covariate gaps are not imputed")
    if design == "auto":
        design = " + ".join(["1", *ds.baseline_names, "hist"])
    spec = as_spec(design)
    y = np.array(ds.y)
    filled = np.zeros_like(obs) if ds.filled is None else np.array(ds.filled)

    for j in range(1, m):
        rows = np.flatnonzero(gaps[:, j])
        if rows.size == 0:
            continue
        dj = spec.expand(history=ds.history_names(j))
        frame = _frame_with(ds, y)
        X = dj.matrix(frame, n=ds.n)
        hist_ok = np.isfinite(y[:, :j]).all(axis=1)
        fit_rows = np.flatnonzero(np.isfinite(y[:, j]) & hist_ok & np.isfinite(X).all(axis=1))
        if fit_rows.size < dj.width + 2:
            raise FitError(f"gap filling at visit {j + 1}: {fit_rows.size} subjects available, need {dj.width + 2}")
        fit = fit_ols(X[fit_rows], y[fit_rows, j], names=dj.names, design=dj)
        y[rows, j] = X[rows] @ fit.coefficients
        filled[rows, j] = True
    return ds.with_outcomes(y, filled=filled)


def _frame_with(ds, y):
    f = dict(ds.subject_frame)
    for j in range(ds.m):
        f[f"y{j + 1}"] = y[:, j]
    return f


@dataclass(frozen=True)
class CsvSchema:
    subject: str = "subject_id"
    visit: str = "visit"
    outcome: str = "y"
    baseline: tuple | None = None
    time_varying: tuple = ()
    group: str | None = None

    @classmethod
    def from_mapping(cls, m: Mapping | None) -> "CsvSchema":
        if not m:
            return cls()
        m = dict(m)
        for k in ("baseline", "time_varying"):
            if m.get(k) is not None:
                m[k] = tuple(m[k])
        return cls(**m)


def _to_float(col: pd.Series, what: str) -> np.ndarray:
    s = col.str.strip()
    empty = (s == "") | (s == "NA")
    out = pd.to_numeric(s.where(~empty, None), errors="coerce")
    bad = out.isna() & ~empty
    if bad.any():
        raise DataError(f"non-numeric {what}: {s[bad].iloc[0]!r}")
    # to_numeric's fast parser can be off by an ulp; numpy's string cast is exact
    return np.where(empty, np.nan, s.where(~empty, "nan").to_numpy(dtype=str).astype(float))


def ingest_long_csv(source, schema: CsvSchema | Mapping | None = None) -> LongitudinalDataset:
    """Read a long-format CSV (one row per subject-visit).

    ``source`` is a path, a text/byte stream or CSV text. Lines starting
    with '#' are metadata and skipped. A ``provenance`` column, if present,
    is ignored.
    """
    schema = schema if isinstance(schema, CsvSchema) else CsvSchema.from_mapping(schema)
    if isinstance(source, bytes):
        source = io.BytesIO(source)
    elif isinstance(source, str) and "\n" in source:
        source = io.StringIO(source)
    df = pd.read_csv(source, dtype=str, comment="#", keep_default_na=False, skipinitialspace=True)
    df.columns = [c.strip() for c in df.columns]
    required = [schema.subject, schema.visit, schema.outcome]
    named = list(required) + list(schema.baseline or ()) + list(schema.time_varying)
    if schema.group:
        named.append(schema.group)
    missing = [c for c in named if c not in df.columns]
    if missing:
        raise DataError(f"unknown schema column(s): {', '.join(missing)}")
    if schema.baseline is None:
        skip = set(named) | {"provenance"}
        base_cols = [c for c in df.columns if c not in skip]
    else:
        base_cols = list(schema.baseline)
    tv_cols = list(schema.time_varying)
    if df.empty:
        raise DataError("no data rows")
    sid = df[schema.subject].str.strip()
    visit = _to_float(df[schema.visit], "visit code")
    if np.isnan(visit).any():
        raise DataError("missing visit code")
    yv = _to_float(df[schema.outcome], "outcome")
    dup = pd.DataFrame({"s": sid, "v": visit}).duplicated()
    if dup.any():
        k = int(np.flatnonzero(dup.to_numpy())[0])
        raise DataError(f"duplicate (subject, visit): ({sid.iloc[k]}, {fmt(visit[k])})")
    times = np.unique(visit)
    ids = list(pd.unique(sid))
    row_of = {s: i for i, s in enumerate(ids)}
    ri = sid.map(row_of).to_numpy()
    ci = np.searchsorted(times, visit)
    n, m = len(ids), len(times)
    Y = np.full((n, m), np.nan)
    Y[ri, ci] = yv

    order = np.lexsort((visit, ri))
    X = np.full((n, len(base_cols)), np.nan)
    for c, name in enumerate(base_cols):
        v = _to_float(df[name], f"covariate {name!r}")
        for k in order:
            if np.isnan(v[k]):
                continue
            cur = X[ri[k], c]
            if np.isnan(cur):
                X[ri[k], c] = v[k]
            elif cur != v[k]:
                raise DataError(f"baseline covariate {name!r} varies within subject {ids[ri[k]]}")
    miss = np.isnan(X).any(axis=1)
    if miss.any():
        raise DataError("missing baseline covariate for subject(s): " + ", ".join(ids[i] for i in np.flatnonzero(miss)[:10]))
    TV = None
    if tv_cols:
        TV = np.full((n, m, len(tv_cols)), np.nan)
        for c, name in enumerate(tv_cols):
            TV[ri, ci, c] = _to_float(df[name], f"covariate {name!r}")
    groups = None
    if schema.group:
        g = df[schema.group].str.strip().to_numpy()
        groups = np.empty(n, dtype=object)
        for k in order:
            if groups[ri[k]] is None:
                groups[ri[k]] = g[k]
            elif groups[ri[k]] != g[k]:
                raise DataError(f"group label varies within subject {ids[ri[k]]}")
    return LongitudinalDataset(
        subject_ids=tuple(ids),
        time_codes=times,
        y=Y,
        baseline=X,
        baseline_names=tuple(base_cols),
        time_varying=TV,
        time_varying_names=tuple(tv_cols),
        groups=groups,
    )


def write_long_csv(ds: LongitudinalDataset, dest, y=None, provenance=None, header: str | None = None,
                   schema: CsvSchema | None = None) -> None:
    """Write one row per subject-visit cell. ``y`` overrides the outcomes (completed data)."""
    schema = schema or CsvSchema()
    y = ds.y if y is None else np.asarray(y)
    cols = [schema.subject, schema.visit, schema.outcome, *ds.baseline_names, *ds.time_varying_names]
    if ds.groups is not None:
        cols.append(schema.group or "group")
    if provenance is not None:
        cols.append("provenance")
    lines = []
    if header:
        lines.append("# " + header)
    lines.append(",".join(cols))
    xs = [[fmt(v) for v in row] for row in ds.baseline]
    for i, s in enumerate(ds.subject_ids):
        for j in range(ds.m):
            rec = [s, fmt(ds.time_codes[j]), fmt(y[i, j]), *xs[i]]
            if ds.time_varying is not None:
                rec += [fmt(v) for v in ds.time_varying[i, j]]
            if ds.groups is not None:
                rec.append(ds.groups[i])
            if provenance is not None:
                rec.append(provenance[i][j])
            lines.append(",".join(rec))
    text = "\n".join(lines) + "\n"
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def summarize(ds: LongitudinalDataset, profile: MissingnessProfile | None = None) -> pd.DataFrame:
    """Per-visit observed summaries, overall and by group.

    Columns: group, visit, time, n, mean, sd, dropout_pct, mean_completers,
    mean_dropouts (dropouts = subjects who leave before the last visit).
    """
    profile = profile or validate_monotone(ds, allow_gaps=True)
    labels = [("all", np.ones(ds.n, dtype=bool))]
    if ds.groups is not None:
        labels += [(g, ds.groups == g) for g in sorted(set(ds.groups))]
    comp = profile.completers
    rows = []
    for g, sel in labels:
        for j in range(ds.m):
            yj = ds.y[sel, j]
            ok = np.isfinite(yj)
            vals = yj[ok]
            nsel = int(sel.sum())
            c = ds.y[sel & comp, j]
            d = ds.y[sel & ~comp, j]
            d = d[np.isfinite(d)]
            rows.append(dict(
                group=g,
                visit=j + 1,
                time=float(ds.time_codes[j]),
                n=int(ok.sum()),
                mean=float(vals.mean()) if vals.size else np.nan,
                sd=float(vals.std(ddof=1)) if vals.size > 1 else np.nan,
                dropout_pct=100.0 * (1.0 - profile.R[sel, j].mean()) if nsel else np.nan,
                mean_completers=float(c.mean()) if c.size else np.nan,
                mean_dropouts=float(d.mean()) if d.size else np.nan,
            ))
    return pd.DataFrame(rows)


def dataset_from_arrays(y, baseline: Mapping[str, Sequence] | None = None, time_codes=None,
                        subject_ids=None, groups=None) -> LongitudinalDataset:
    """Convenience constructor from plain arrays."""
    y = np.asarray(y, dtype=float)
    n, m = y.shape
    baseline = baseline or {}
    names = tuple(baseline)
    X = np.column_stack([np.asarray(baseline[k], dtype=float) for k in names]) if names else np.empty((n, 0))
    return LongitudinalDataset(
        subject_ids=tuple(subject_ids) if subject_ids is not None else tuple(str(i + 1) for i in range(n)),
        time_codes=np.arange(m, dtype=float) if time_codes is None else time_codes,
        y=y,
        baseline=X,
        baseline_names=names,
        groups=groups,
    )
