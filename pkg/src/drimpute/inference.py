"""Nonparametric subject bootstrap, normal-theory intervals and the interval score."""
from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import fmt
from .errors import DrImputeError, FitError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BootstrapPlan:
    B: int = 300
    seed: int | tuple = 0
    threads: int = 1
    max_fail_frac: float = 0.10

    def __post_init__(self):
        if self.B < 2:
            raise ValueError("bootstrap needs B >= 2")

    def seed_for(self, b: int) -> np.random.SeedSequence:
        base = list(self.seed) if isinstance(self.seed, (tuple, list)) else [int(self.seed)]
        return np.random.SeedSequence(base + [b])


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    se: np.ndarray
    replicates: np.ndarray = field(repr=False)
    n_ok: np.ndarray = field(repr=False)
    n_failed: int = 0
    failures: dict = field(default_factory=dict)
    flagged: tuple = ()
    names: tuple = ()


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    se: float
    lower: float
    upper: float
    level: float


def _replicate(args):
    ds, plan, pipeline, b = args
    rng = np.random.default_rng(plan.seed_for(b))
    idx = rng.integers(0, ds.n, ds.n)
    try:
        return np.asarray(pipeline(ds.take(idx)), dtype=float), None
    except DrImputeError as e:
        return None, type(e).__name__
    except (np.linalg.LinAlgError, FloatingPointError) as e:
        return None, type(e).__name__


def bootstrap(ds, plan: BootstrapPlan, pipeline, names=None) -> BootstrapResult:
    """Resample subjects with replacement B times and rerun ``pipeline`` on each replicate.

    The replicate seed depends only on (plan.seed, b), so results do not depend
    on execution order or ``plan.threads``. SE is the sample SD (ddof=1) over
    replicates where the parameter is finite.
    """
    jobs = [(ds, plan, pipeline, b) for b in range(plan.B)]
    if plan.threads > 1:
        with ProcessPoolExecutor(max_workers=plan.threads) as ex:
            results = list(ex.map(_replicate, jobs, chunksize=max(1, plan.B // (4 * plan.threads))))
    else:
        results = [_replicate(j) for j in jobs]
    fails = Counter(err for _, err in results if err is not None)
    n_failed = sum(fails.values())
    if n_failed > plan.max_fail_frac * plan.B:
        detail = ", ".join(f"{k}: {v}" for k, v in sorted(fails.items()))
        raise FitError(f"bootstrap: {n_failed} of {plan.B} replicates failed ({detail})")
    ok = [r for r, _ in results if r is not None]
    width = len(ok[0]) if ok else (len(names) if names else 0)
    reps = np.full((plan.B, width), np.nan)
    for b, (r, _) in enumerate(results):
        if r is not None:
            reps[b] = r
    fin = np.isfinite(reps)
    n_ok = fin.sum(axis=0)
    se = np.full(width, np.nan)
    for j in range(width):
        v = reps[fin[:, j], j]
        if v.size >= 2:
            se[j] = v.std(ddof=1)
    flagged = tuple(int(j) for j in np.flatnonzero(n_ok < (1 - plan.max_fail_frac) * plan.B))
    return BootstrapResult(se=se, replicates=reps, n_ok=n_ok, n_failed=n_failed, failures=dict(fails),
                           flagged=flagged, names=tuple(names or ()))


def normal_ci(point: float, se: float, level: float = 0.95) -> IntervalEstimate:
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    if se < 0:
        raise ValueError("se must be nonnegative")
    z = norm.ppf(0.5 + level / 2)
    return IntervalEstimate(point, se, point - z * se, point + z * se, level)


def interval_score(lower, upper, truth, alpha: float):
    """Width plus 2/alpha times the distance by which the truth falls outside [lower, upper]."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    below = np.where(truth < lower, lower - truth, 0.0)
    above = np.where(truth > upper, truth - upper, 0.0)
    out = (upper - lower) + (2.0 / alpha) * (below + above)
    return float(out) if out.ndim == 0 else out


def write_replicates_csv(res: BootstrapResult, dest, header: str | None = None) -> None:
    lines = [f"# {header}"] if header else []
    lines.append("replicate,param,estimate")
    names = res.names or tuple(str(j) for j in range(res.replicates.shape[1]))
    for b, row in enumerate(res.replicates):
        for nm, v in zip(names, row):
            lines.append(f"{b + 1},{nm},{fmt(v)}")
    text = "\n".join(lines) + "\n"
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
