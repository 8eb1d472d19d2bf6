"""Synthetic data, dropout mechanisms, ground truth and the Monte Carlo scenario grid."""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy.special import expit

from . import __version__
from .data import LongitudinalDataset, fmt
from .inference import BootstrapPlan, bootstrap, interval_score
from .methods import ALL_METHODS, LABELS, ModelSpecs, Pipeline, scenario_specs
from .errors import DrImputeError

log = logging.getLogger(__name__)

DEFAULT_ESTIMANDS = ("mean:3", "coef:t", "coef:x2", "coef:x2:t")
CONSTRUCTS = ("moderate", "extreme")


@dataclass(frozen=True)
class GeneratorConfig:
    """Random intercept and slope model:

    Y_ij = b0_i + b1_i t_j + beta0 + beta1 x1_i + beta2 x2_i + beta3 x2_i t_j + e_ij
    """
    n: int = 500
    time_codes: tuple = (0.0, 1.0, 2.0)
    beta: tuple = (0.5, 2.0, -0.25, -6.0)
    mu_b: tuple = (1.0, 6.0)
    sigma_b: tuple = ((0.3, 0.1), (0.1, 0.2))
    resid_sd: float = 1.0
    x1_mean: float = 5.0
    x1_sd: float = 1.0
    x2_prob: float = 0.5

    def __post_init__(self):
        S = np.asarray(self.sigma_b, dtype=float)
        if S.shape != (2, 2) or not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() < -1e-12:
            raise ValueError("sigma_b must be a symmetric positive semidefinite 2x2 matrix")
        if self.resid_sd < 0:
            raise ValueError("resid_sd must be nonnegative")
        object.__setattr__(self, "time_codes", tuple(float(t) for t in self.time_codes))
        object.__setattr__(self, "sigma_b", tuple(tuple(float(v) for v in r) for r in self.sigma_b))

    def analytic_means(self) -> np.ndarray:
        t = np.asarray(self.time_codes)
        b0, b1, b2, b3 = self.beta
        return (self.mu_b[0] + self.mu_b[1] * t + b0 + b1 * self.x1_mean + b2 * self.x2_prob
                + b3 * self.x2_prob * t)


@dataclass(frozen=True)
class DropoutConfig:
    """logit P(drop at 2) = g20 + g21 y1 - g22 x2; logit P(drop at 3 | on study) = g30 + g31 y1 + g32 y2 - g33 x2."""
    gamma2: tuple = (-7.625, 0.5, 2.0)
    gamma3: tuple = (-5.225, 0.1, 0.2, 4.0)
    construct: str = "moderate"

    @classmethod
    def moderate(cls):
        return cls((-7.625, 0.5, 2.0), (-5.225, 0.1, 0.2, 4.0), "moderate")

    @classmethod
    def extreme(cls):
        return cls((-7.0, 0.5, 1.0), (-4.5, 0.1, 0.2, 2.0), "extreme")

    @classmethod
    def named(cls, construct: str):
        if construct not in CONSTRUCTS:
            raise ValueError(f"unknown construct {construct!r}")
        return getattr(cls, construct)()


@dataclass(frozen=True, eq=False)
class FullData:
    dataset: LongitudinalDataset
    y: np.ndarray
    b: np.ndarray


def _draw(cfg: GeneratorConfig, rng, n):
    t = np.asarray(cfg.time_codes)
    x1 = rng.normal(cfg.x1_mean, cfg.x1_sd, n)
    x2 = (rng.random(n) < cfg.x2_prob).astype(float)
    w, V = np.linalg.eigh(np.asarray(cfg.sigma_b))
    root = V * np.sqrt(np.clip(w, 0, None))
    b = np.asarray(cfg.mu_b) + rng.standard_normal((n, 2)) @ root.T
    e = cfg.resid_sd * rng.standard_normal((n, t.size))
    b0, b1, b2, b3 = cfg.beta
    y = (b[:, :1] + b[:, 1:] * t + b0 + b1 * x1[:, None] + b2 * x2[:, None] + b3 * x2[:, None] * t + e)
    return x1, x2, b, y


def generate_full(cfg: GeneratorConfig, rng) -> FullData:
    x1, x2, b, y = _draw(cfg, rng, cfg.n)
    ds = LongitudinalDataset(
        subject_ids=tuple(str(i + 1) for i in range(cfg.n)),
        time_codes=np.asarray(cfg.time_codes),
        y=y,
        baseline=np.column_stack([x1, x2]),
        baseline_names=("x1", "x2"),
    )
    return FullData(dataset=ds, y=y, b=b)


def dropout_masks(y, x2, dcfg: DropoutConfig, rng):
    u = rng.random((y.shape[0], 2))
    g = dcfg.gamma2
    drop2 = u[:, 0] < expit(g[0] + g[1] * y[:, 0] - g[2] * x2)
    g = dcfg.gamma3
    drop3 = ~drop2 & (u[:, 1] < expit(g[0] + g[1] * y[:, 0] + g[2] * y[:, 1] - g[3] * x2))
    return drop2, drop3


def apply_dropout(full, dcfg: DropoutConfig, rng) -> LongitudinalDataset:
    """Sequential Bernoulli dropout at visits 2 and 3; baseline is always kept."""
    ds = full.dataset if isinstance(full, FullData) else full
    if ds.m != 3:
        raise ValueError("the dropout mechanism is defined for 3 visits")
    x2 = ds.baseline[:, ds.baseline_names.index("x2")]
    drop2, drop3 = dropout_masks(ds.y, x2, dcfg, rng)
    y = np.array(ds.y)
    y[drop2, 1:] = np.nan
    y[drop3, 2] = np.nan
    return ds.with_outcomes(y)


@lru_cache(maxsize=32)
def true_values_oracle(cfg: GeneratorConfig, n_large: int = 1_000_000, seed: int = 987654321) -> dict:
    """Truth for E(Y_M) and the coefficients of 1 + x1 + x2 + t + x2:t, from one large full-data fit."""
    if n_large < 100_000:
        raise ValueError("n_large must be at least 1e5")
    rng = np.random.default_rng(seed)
    x1, x2, _, y = _draw(cfg, rng, n_large)
    t = np.asarray(cfg.time_codes)
    m = t.size
    XtX = np.zeros((5, 5))
    Xty = np.zeros(5)
    for j in range(m):
        X = np.column_stack([np.ones(n_large), x1, x2, np.full(n_large, t[j]), x2 * t[j]])
        XtX += X.T @ X
        Xty += X.T @ y[:, j]
    coef = np.linalg.solve(XtX, Xty)
    names = ("intercept", "x1", "x2", "t", "x2:t")
    out = {f"mean:{j + 1}": float(y[:, j].mean()) for j in range(m)}
    out.update({f"coef:{nm}": float(c) for nm, c in zip(names, coef)})
    return out


@dataclass(frozen=True)
class ScenarioCell:
    y_correct: bool
    p_correct: bool
    construct: str = "moderate"

    @property
    def label(self) -> str:
        return f"Y{'+' if self.y_correct else '-'}P{'+' if self.p_correct else '-'}"

    def specs(self, **kw):
        return scenario_specs(self.y_correct, self.p_correct, **kw)


@dataclass(frozen=True)
class SimulationConfig:
    repeats: int = 200
    B: int = 100
    seed: int = 20240601
    alpha: float = 0.05
    methods: tuple = ALL_METHODS
    estimands: tuple = DEFAULT_ESTIMANDS
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    n_oracle: int = 1_000_000
    threads: int = 1
    spec_options: tuple = ()

    def to_dict(self) -> dict:
        """Settings that determine results; ``threads`` is excluded because it never changes output."""
        d = asdict(self)
        d.pop("threads")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @classmethod
    def from_json(cls, obj: dict) -> "SimulationConfig":
        obj = dict(obj)
        if "generator" in obj:
            obj["generator"] = GeneratorConfig(**obj["generator"])
        for k in ("methods", "estimands"):
            if k in obj:
                obj[k] = tuple(obj[k])
        if "spec_options" in obj:
            obj["spec_options"] = tuple(sorted(dict(obj["spec_options"]).items()))
        return cls(**obj)


_CONSTRUCT_ID = {"moderate": 1, "extreme": 2}


def repeat_data(cfg: SimulationConfig, construct: str, r: int) -> LongitudinalDataset:
    """Data for repeat r: depends on (seed, construct, r) but not on the scenario cell."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _CONSTRUCT_ID[construct], r]))
    full = generate_full(cfg.generator, rng)
    return apply_dropout(full, DropoutConfig.named(construct), rng)


def _run_repeat(args):
    cell, cfg, r = args
    pipe = Pipeline(cell.specs(**dict(cfg.spec_options)), cfg.methods, cfg.estimands)
    ds = repeat_data(cfg, cell.construct, r)
    res = pipe.run(ds)
    if cfg.B >= 2:
        plan = BootstrapPlan(B=cfg.B, seed=(cfg.seed, _CONSTRUCT_ID[cell.construct], r))
        try:
            se = bootstrap(ds, plan, pipe).se
        except DrImputeError as e:
            log.warning("repeat %d: bootstrap failed: %s", r, e)
            se = np.full(res.estimates.shape, np.nan)
    else:
        se = np.full(res.estimates.shape, np.nan)
    return res.estimates, se, res.failures


def metrics(estimates, ses, truth: float, alpha: float = 0.05) -> dict:
    """Bias, RMSE, IntS, CovP, MCSD and AveSE over repeats; NaN estimates count as failures."""
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    if est.size == 0:
        raise ValueError("no estimates")
    ok = np.isfinite(est)
    e, s = est[ok], se[ok]
    r = e.size
    row = dict(failures=int((~ok).sum()), repeats=int(est.size), flags="")
    flags = []
    if r == 0:
        row.update(bias=np.nan, rmse=np.nan, ints=np.nan, covp=np.nan, mcsd=np.nan, avese=np.nan)
        row["flags"] = "all_failed"
        return row
    d = e - truth
    row["bias"] = float(d.mean())
    row["rmse"] = float(np.sqrt((d * d).mean()))
    row["mcsd"] = float(e.std(ddof=1)) if r >= 2 else np.nan
    if r < 2:
        flags.append("mcsd_undefined")
    sok = np.isfinite(s)
    if sok.any():
        from scipy.stats import norm

        z = norm.ppf(1 - alpha / 2)
        lo, hi = e[sok] - z * s[sok], e[sok] + z * s[sok]
        row["avese"] = float(s[sok].mean())
        row["covp"] = float(((lo <= truth) & (truth <= hi)).mean())
        row["ints"] = float(np.mean(interval_score(lo, hi, truth, alpha)))
        if np.all(s[sok] == 0):
            flags.append("degenerate_intervals")
    else:
        row.update(avese=np.nan, covp=np.nan, ints=np.nan)
        flags.append("no_se")
    if row["failures"] > 0.10 * est.size:
        flags.append("failures_over_10pct")
    row["flags"] = ";".join(flags)
    return row


@dataclass(frozen=True, eq=False)
class MetricsReport:
    table: pd.DataFrame
    meta: dict
    estimates: np.ndarray = field(repr=False, default=None)
    ses: np.ndarray = field(repr=False, default=None)

    def row(self, method: str, estimand: str) -> dict:
        t = self.table
        hit = t[(t.method == method) & (t.estimand == estimand)]
        if hit.empty:
            raise KeyError((method, estimand))
        return hit.iloc[0].to_dict()

    def to_csv(self, dest) -> None:
        cols = ["method", "estimand", "bias", "rmse", "ints", "covp", "mcsd", "avese", "failures"]
        head = " ".join(f"{k}={v}" for k, v in self.meta.items())
        lines = [f"# {head}", ",".join(cols)]
        for _, r in self.table.iterrows():
            lines.append(",".join([r.method, r.estimand] + [fmt(r[c]) for c in cols[2:8]] + [str(int(r.failures))]))
        text = "\n".join(lines) + "\n"
        if hasattr(dest, "write"):
            dest.write(text)
        else:
            with open(dest, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)


def run_scenario(cell: ScenarioCell, cfg: SimulationConfig, progress=None) -> MetricsReport:
    """Monte Carlo repeats of every method's full pipeline in one grid cell."""
    truth = true_values_oracle(cfg.generator, cfg.n_oracle)
    jobs = [(cell, cfg, r) for r in range(cfg.repeats)]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as ex:
            results = []
            for r, out in enumerate(ex.map(_run_repeat, jobs)):
                results.append(out)
                if progress:
                    progress(r + 1, cfg.repeats)
    else:
        results = []
        for r, job in enumerate(jobs):
            results.append(_run_repeat(job))
            if progress:
                progress(r + 1, cfg.repeats)
    est = np.array([e for e, _, _ in results])
    se = np.array([s for _, s, _ in results])
    rows = []
    k = 0
    for m in cfg.methods:
        for e in cfg.estimands:
            row = dict(method=m, estimand=e, truth=truth[e])
            row.update(metrics(est[:, k], se[:, k], truth[e], cfg.alpha))
            rows.append(row)
            k += 1
    meta = dict(drimpute=__version__, cell=cell.label, construct=cell.construct, n=cfg.generator.n, repeats=cfg.repeats, B=cfg.B,
                seed=cfg.seed, config=cfg.config_hash())
    return MetricsReport(table=pd.DataFrame(rows), meta=meta, estimates=est, ses=se)


def grid_cells(construct: str = "moderate") -> list:
    return [ScenarioCell(y, p, construct) for y in (True, False) for p in (True, False)]


def method_label(m: str) -> str:
    return LABELS.get(m, m)


# MCI-shaped synthetic trial: 4 annual visits, higher dropout in the active arm.

@dataclass(frozen=True)
class MciConfig:
    n: int = 1000
    time_codes: tuple = (0.0, 1.0, 2.0, 3.0)
    intercept: float = 1.8
    z_coef: float = 0.4
    slope: float = 0.45
    arm_effect: float = 0.0
    arm_time: float = -0.12
    sigma_b: tuple = ((0.35, 0.05), (0.05, 0.25))
    resid_sd: float = 0.5
    hazard_y: float = 1.5
    hazard_arm: tuple = (0.725, -0.239, 2.14)
    hazard_intercept: tuple = (-2.091, -2.873, -5.58)


def generate_mci_like(cfg: MciConfig, rng):
    """Returns (dataset with monotone dropout, full outcomes, truth dict)."""
    n = cfg.n
    t = np.asarray(cfg.time_codes)
    arm = (rng.random(n) < 0.5).astype(float)
    z = rng.standard_normal(n)
    w, V = np.linalg.eigh(np.asarray(cfg.sigma_b))
    b = rng.standard_normal((n, 2)) @ (V * np.sqrt(np.clip(w, 0, None))).T
    e = cfg.resid_sd * rng.standard_normal((n, t.size))
    y = (cfg.intercept + b[:, :1] + cfg.z_coef * z[:, None] + (cfg.slope + b[:, 1:]) * t
         + cfg.arm_effect * arm[:, None] + cfg.arm_time * arm[:, None] * t + e)
    on = np.ones(n, dtype=bool)
    obs = np.ones((n, t.size), dtype=bool)
    u = rng.random((n, t.size - 1))
    for j in range(1, t.size):
        lam = expit(cfg.hazard_intercept[j - 1] + cfg.hazard_y * (y[:, j - 1] - cfg.intercept)
                    + cfg.hazard_arm[j - 1] * arm)
        on = on & ~(u[:, j - 1] < lam)
        obs[:, j] = on
    yo = np.where(obs, y, np.nan)
    ds = LongitudinalDataset(
        subject_ids=tuple(f"S{i + 1:04d}" for i in range(n)),
        time_codes=t,
        y=yo,
        baseline=np.column_stack([z, arm]),
        baseline_names=("z", "arm"),
        groups=np.where(arm == 1, "active", "placebo"),
    )
    truth = {f"lsmean:{tk:g}": cfg.arm_effect + cfg.arm_time * tk for tk in t[1:]}
    truth.update({"coef:t": cfg.slope, "coef:arm:t": cfg.arm_time})
    return ds, y, truth


MCI_SPECS = ModelSpecs(
    hazard="1 + arm + hist",
    imputation="1 + z + arm + hist",
    mean="1 + z + arm + t + arm:t",
    mean_visit="z + visit + arm:visit",
    analysis="1 + z + arm + t + arm:t",
    arm="arm",
    positivity="truncate",
)
MCI_ESTIMANDS = ("coef:t", "coef:arm:t", "lsmean:1", "lsmean:2", "lsmean:3")


def mci_table(ds: LongitudinalDataset, specs: ModelSpecs = MCI_SPECS, methods=("gee_ind", "aipw_i", "aipw_s"),
              B: int = 200, seed=0, threads: int = 1) -> pd.DataFrame:
    """Time and arm-by-time coefficients and per-visit arm differences, with bootstrap SEs.

    GEE-IND fits the analysis model to the observed data; the imputers fit it
    to their completed data.
    """
    pipe = Pipeline(specs, methods, MCI_ESTIMANDS)
    point = pipe(ds)
    se = bootstrap(ds, BootstrapPlan(B=B, seed=seed, threads=threads), pipe).se
    rows = []
    for k, (m, e) in enumerate((m, e) for m in pipe.methods for e in MCI_ESTIMANDS):
        rows.append(dict(method=m, estimand=e, estimate=float(point[k]), se=float(se[k])))
    return pd.DataFrame(rows)


def mci_markdown(table: pd.DataFrame, truth: dict | None = None) -> str:
    """Markdown table with one row per method and (Estimate, SE) pairs per estimand."""
    heads = {"coef:t": "time", "coef:arm:t": "time:arm"}
    ests = list(dict.fromkeys(table.estimand))
    names = [heads.get(e, f"Diff. at t={e.split(':')[1]}") for e in ests]
    lines = ["| Method | " + " | ".join(f"{n} Estimate | {n} SE" for n in names) + " |",
             "|---|" + "---|" * (2 * len(ests))]
    for m, g in table.groupby("method", sort=False):
        vals = []
        for e in ests:
            r = g[g.estimand == e].iloc[0]
            vals += [f"{r.estimate:.3f}", f"{r.se:.3f}"]
        lines.append(f"| {LABELS.get(m, m)} | " + " | ".join(vals) + " |")
    if truth:
        vals = []
        for e in ests:
            vals += [f"{truth[e]:.3f}" if e in truth else "", ""]
        lines.append("| Truth | " + " | ".join(vals) + " |")
    return "\n".join(lines) + "\n"
