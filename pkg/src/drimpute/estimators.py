"""Estimating-equation solvers for the identity link: GEE, weighted GEE and MMRM (ML, unstructured)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import LongitudinalDataset, MissingnessProfile, fmt
from .design import DesignSpec, as_spec
from .errors import ConvergenceError, DataError, FitError

log = logging.getLogger(__name__)

CORRELATIONS = ("independence", "exchangeable", "unstructured")
GEE_TOL = 1e-8
GEE_MAX_ITER = 100
MMRM_MAX_ITER = 200


@dataclass(frozen=True)
class GeeSpec:
    design: DesignSpec
    correlation: str = "independence"
    link: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "design", as_spec(self.design))
        if self.link != "identity":
            raise ValueError("only the identity link is supported")
        if self.correlation not in CORRELATIONS:
            raise ValueError(f"unknown working correlation {self.correlation!r}")
        if self.design.width < 1:
            raise ValueError("empty mean design")


@dataclass(frozen=True, eq=False)
class GeeFit:
    beta: np.ndarray
    names: tuple
    model_cov: np.ndarray
    robust_cov: np.ndarray
    corr: np.ndarray
    phi: float
    sd: np.ndarray
    converged: bool
    n_iter: int
    n_used: int
    fitted: np.ndarray = field(repr=False)
    design: DesignSpec | None = None
    time_codes: np.ndarray | None = field(default=None, repr=False)
    profile_means: dict = field(default_factory=dict, repr=False)

    def coef(self, name, default=None):
        try:
            return float(self.beta[self.names.index(name)])
        except ValueError:
            if default is None:
                raise KeyError(name) from None
            return default


@dataclass(frozen=True, eq=False)
class MmrmFit:
    beta: np.ndarray
    names: tuple
    sigma: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    model_cov: np.ndarray
    robust_cov: np.ndarray
    fitted: np.ndarray = field(repr=False)
    loglik_path: tuple = field(default=(), repr=False)
    grad_norm: float = float("nan")
    design: DesignSpec | None = None
    time_codes: np.ndarray | None = field(default=None, repr=False)
    profile_means: dict = field(default_factory=dict, repr=False)

    def coef(self, name, default=None):
        try:
            return float(self.beta[self.names.index(name)])
        except ValueError:
            if default is None:
                raise KeyError(name) from None
            return default


def _as_data(data):
    """Accept a LongitudinalDataset or anything with ``as_dataset()`` (completed data)."""
    if hasattr(data, "as_dataset"):
        return data.as_dataset()
    return data


def _design3(ds: LongitudinalDataset, spec: DesignSpec):
    full = spec.expand(visits=ds.visit_names())
    X = full.matrix(ds.long_frame, n=ds.n * ds.m)
    return full, X.reshape(ds.n, ds.m, -1)


def _profile_means(ds):
    return {nm: float(ds.baseline[:, c].mean()) for c, nm in enumerate(ds.baseline_names)}


def _working_corr(e, D, kind):
    """Moment estimates of the scale and working correlation from residuals on cells with D > 0.

    Returns (phi, R, sd) with working covariance V = diag(sd) R diag(sd).
    Independence and exchangeable share one scale phi; unstructured uses
    visit-specific scales. Denominators are counts of cells or pairs.
    """
    m = e.shape[1]
    obs = D > 0
    eo = np.where(obs, e, 0.0)
    n_obs = obs.sum()
    phi = float((eo * eo).sum() / n_obs)
    sd = np.full(m, np.sqrt(phi))
    if kind == "independence":
        return phi, np.eye(m), sd
    cross = eo.T @ eo
    pairs = obs.T.astype(float) @ obs.astype(float)
    if kind == "exchangeable":
        off = ~np.eye(m, dtype=bool)
        npair = pairs[off].sum()
        alpha = cross[off].sum() / (npair * phi) if npair > 0 else 0.0
        Rw = np.full((m, m), alpha)
        np.fill_diagonal(Rw, 1.0)
        return phi, Rw, sd
    # unstructured: visit-specific scales, so unequal visit variances cannot push |r| above 1
    scale = np.sqrt(np.diag(cross) / np.maximum(np.diag(pairs), 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        Rw = np.where(pairs > 0, cross / (pairs * np.outer(scale, scale)), 0.0)
    np.fill_diagonal(Rw, 1.0)
    return phi, Rw, scale


def fit_gee(data, spec: GeeSpec, weights=None, tol: float = GEE_TOL, max_iter: int = GEE_MAX_ITER,
            strict: bool = True) -> GeeFit:
    """Solve sum_i X_i' V^-1 W_i (Y_i - X_i beta) = 0.

    W_i is diagonal: the observed indicator, times ``weights`` (N x M) when
    given. V = phi * R(alpha) is the full M x M working covariance. The scale
    and correlation are re-estimated from Pearson residuals between beta updates
    (denominator = number of observed cells or pairs).
    """
    ds = _as_data(data)
    spec = spec if isinstance(spec, GeeSpec) else GeeSpec(as_spec(spec))
    full, X = _design3(ds, spec.design)
    n, m, p = X.shape
    obs = ds.observed
    D = obs.astype(float) if weights is None else np.where(obs, np.asarray(weights, dtype=float), 0.0)
    if np.any(D < 0) or not np.all(np.isfinite(D)):
        raise FitError("invalid occasion weights")
    Y = np.where(obs, ds.y, 0.0)
    used = (D > 0).any(axis=1)
    XD = (X * D[:, :, None]).reshape(-1, p)
    DY = (D * Y).reshape(-1)

    def solve(Vinv):
        # B = sum_i X_i' Vinv D_i X_i, rhs = sum_i X_i' Vinv D_i Y_i
        XV = np.matmul(Vinv.T, X)
        flat = XV.reshape(-1, p)
        B = flat.T @ XD
        rhs = flat.T @ DY
        try:
            return np.linalg.solve(B, rhs), B, XV
        except np.linalg.LinAlgError:
            raise FitError("singular GEE information matrix") from None

    beta, B, XV = solve(np.eye(m))
    phi, Rw, sd = _working_corr(Y - X @ beta, D, "independence")
    converged = spec.correlation == "independence"
    it = 1
    if not converged:
        for it in range(2, max_iter + 1):
            phi, Rw, sd = _working_corr(Y - X @ beta, D, spec.correlation)
            try:
                np.linalg.cholesky(Rw)
                Vinv = np.linalg.inv(Rw * np.outer(sd, sd))
            except np.linalg.LinAlgError:
                raise FitError(f"singular working covariance ({spec.correlation})") from None
            new, B, XV = solve(Vinv)
            step = np.max(np.abs(new - beta))
            beta = new
            if step < tol:
                converged = True
                break
    else:
        B = B / phi
        XV = XV / phi
    if not converged:
        msg = f"GEE did not converge in {max_iter} iterations"
        if strict:
            raise ConvergenceError(msg)
        log.warning(msg)
    resid = Y - X @ beta
    U = np.einsum("ikp,ik->ip", XV, D * resid, optimize=False)
    Binv = np.linalg.inv(B)
    robust = Binv @ (U.T @ U) @ Binv.T
    fitted = X @ beta
    return GeeFit(
        beta=beta,
        names=tuple(full.names),
        model_cov=Binv,
        robust_cov=(robust + robust.T) / 2,
        corr=Rw,
        phi=phi,
        sd=sd,
        converged=converged,
        n_iter=it,
        n_used=int(used.sum()),
        fitted=fitted,
        design=full,
        time_codes=ds.time_codes,
        profile_means=_profile_means(ds),
    )


def fit_wgee(ds: LongitudinalDataset, profile: MissingnessProfile, wt, spec: GeeSpec, **kw) -> GeeFit:
    """Occasion-level inverse-probability weighted GEE, W_i = diag(R_ij / pi_ij)."""
    if wt.fingerprint and wt.fingerprint != ds.fingerprint:
        raise DataError("weight table was computed on a different dataset")
    W = np.where(profile.R == 1, 1.0 / wt.pi[:, : ds.m], 0.0)
    return fit_gee(ds, spec, weights=W, **kw)


def gee_score(data, fit: GeeFit, weights=None) -> np.ndarray:
    """sum_i U_i(beta) at the fitted beta, for checking the estimating equation."""
    ds = _as_data(data)
    _, X = _design3(ds, fit.design)
    obs = ds.observed
    D = obs.astype(float) if weights is None else np.where(obs, weights, 0.0)
    Y = np.where(obs, ds.y, 0.0)
    Vinv = np.linalg.inv(fit.corr * np.outer(fit.sd, fit.sd))
    r = D * (Y - X @ fit.beta)
    return np.einsum("imp,mk,ik->p", X, Vinv, r)


class _PatternStats:
    """Sufficient statistics of the monotone-prefix likelihood, grouped by last visit J."""

    def __init__(self, X, y, J):
        self.blocks = []
        self.n_obs = 0
        for s in np.unique(J):
            rows = J == s
            Xs = X[rows, :s, :]
            ys = y[rows, :s]
            ns, p = Xs.shape[0], Xs.shape[2]
            Xf = Xs.reshape(ns, s * p)
            self.blocks.append((
                int(s),
                int(ns),
                (Xf.T @ Xf).reshape(s, p, s, p).transpose(0, 2, 1, 3).copy(),
                (Xf.T @ ys).reshape(s, p, s).transpose(0, 2, 1).copy(),
                ys.T @ ys,
                rows,
            ))
            self.n_obs += int(rows.sum()) * int(s)

    def profile(self, sigma):
        """Profiled log-likelihood, GLS beta, d loglik / d sigma, GLS information and block inverses."""
        p = self.blocks[0][2].shape[-1]
        m = sigma.shape[0]
        A = np.zeros((p, p))
        b = np.zeros(p)
        Ps = []
        logdet = 0.0
        for s, ns, Sxx, Sxy, Syy, _ in self.blocks:
            c = np.linalg.cholesky(sigma[:s, :s])
            P = np.linalg.inv(sigma[:s, :s])
            Ps.append(P)
            logdet += ns * 2.0 * np.log(np.diag(c)).sum()
            A += (P.ravel() @ Sxx.reshape(s * s, p * p)).reshape(p, p)
            b += P.ravel() @ Sxy.reshape(s * s, p)
        beta = np.linalg.solve(A, b)
        ll = -0.5 * (self.n_obs * np.log(2 * np.pi) + logdet)
        G = np.zeros((m, m))
        for (s, ns, Sxx, Sxy, Syy, _), P in zip(self.blocks, Ps):
            sxyb = Sxy @ beta
            RR = Syy - sxyb.T - sxyb + (Sxx.reshape(-1, p) @ beta).reshape(s, s, p) @ beta
            ll -= 0.5 * np.sum(P * RR)
            G[:s, :s] += -0.5 * (ns * P - P @ RR @ P)
        return ll, beta, G, A, Ps


def _vech_basis(m):
    idx = [(a, b) for a in range(m) for b in range(a + 1)]
    E = np.zeros((len(idx), m, m))
    for k, (a, b) in enumerate(idx):
        E[k, a, b] = E[k, b, a] = 1.0
    return idx, E


def _start_sigma(X, y, obs):
    rows = obs.reshape(-1)
    Xl = X.reshape(-1, X.shape[-1])[rows]
    beta = np.linalg.lstsq(Xl, y.reshape(-1)[rows], rcond=None)[0]
    e = np.where(obs, y - X @ beta, 0.0)
    cnt = obs.T.astype(float) @ obs.astype(float)
    S = np.where(cnt > 0, (e.T @ e) / np.maximum(cnt, 1), 0.0)
    w, V = np.linalg.eigh((S + S.T) / 2)
    floor = max(1e-3 * w.max(), 1e-8) if w.max() > 0 else 1.0
    return (V * np.maximum(w, floor)) @ V.T


def fit_mmrm(ds: LongitudinalDataset, profile: MissingnessProfile, design, max_iter: int = MMRM_MAX_ITER,
             tol: float = 1e-10, strict: bool = True) -> MmrmFit:
    """Multivariate normal ML with unstructured covariance on each subject's observed prefix.

    beta is profiled out by GLS. Sigma is updated by Fisher scoring on its
    distinct elements, halving the step until the proposal is positive
    definite and the log-likelihood does not decrease.
    """
    spec = as_spec(design)
    full, X = _design3(ds, spec)
    n, m, p = X.shape
    obs = profile.R == 1
    y = np.where(obs, ds.y, 0.0)
    stats = _PatternStats(X, y, profile.J)
    idx, E = _vech_basis(m)
    K = len(idx)
    sigma = _start_sigma(X, y, obs)
    ll, beta, G, A, Ps = stats.profile(sigma)
    path = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        score = np.einsum("kab,ab->k", E, G)
        info = np.zeros((K, K))
        for (s, ns, *_), P in zip(stats.blocks, Ps):
            PE = P @ E[:, :s, :s]
            info += 0.5 * ns * (PE.reshape(K, -1) @ PE.transpose(0, 2, 1).reshape(K, -1).T)
        step = np.linalg.solve(info, score)
        D = np.einsum("k,kab->ab", step, E)
        t = 1.0
        for _ in range(60):
            cand = sigma + t * D
            try:
                out = stats.profile(cand)
            except np.linalg.LinAlgError:
                t /= 2
                continue
            if out[0] >= ll - 1e-12 * abs(ll):
                break
            t /= 2
        else:
            break
        sigma = cand
        ll, beta, G, A, Ps = out
        path.append(ll)
        if np.max(np.abs(t * D)) <= tol * (1.0 + np.max(np.abs(sigma))):
            converged = True
            break
    score = np.einsum("kab,ab->k", E, G)
    gnorm = float(np.max(np.abs(score)) / stats.n_obs)
    if not converged and gnorm < 1e-8:
        converged = True
    if not converged:
        msg = f"MMRM covariance optimization did not converge in {max_iter} iterations (|score|={gnorm:.2e})"
        if strict:
            raise ConvergenceError(msg)
        log.warning(msg)
    Ainv = np.linalg.inv(A)
    meat = np.zeros((p, p))
    for (s, ns, *_, rows), P in zip(stats.blocks, Ps):
        Xs = X[rows, :s, :]
        r = y[rows, :s] - Xs @ beta
        U = np.einsum("iap,ab,ib->ip", Xs, P, r)
        meat += U.T @ U
    robust = Ainv @ meat @ Ainv
    return MmrmFit(
        beta=beta,
        names=tuple(full.names),
        sigma=(sigma + sigma.T) / 2,
        loglik=float(ll),
        converged=converged,
        n_iter=it,
        model_cov=Ainv,
        robust_cov=(robust + robust.T) / 2,
        fitted=X @ beta,
        loglik_path=tuple(path),
        grad_norm=gnorm,
        design=full,
        time_codes=ds.time_codes,
        profile_means=_profile_means(ds),
    )


def mean_at_visit(source, k: int, group=None) -> float:
    """Mean of visit k (1-based): a completed column or a fit's model-implied marginal mean."""
    if hasattr(source, "values") and hasattr(source, "imputed"):
        col = np.asarray(source.values)[:, k - 1]
        groups = source.source.groups
    elif hasattr(source, "fitted"):
        col = np.asarray(source.fitted)[:, k - 1]
        groups = None
    else:
        col = np.asarray(source)[:, k - 1]
        groups = None
    if group is not None:
        if isinstance(group, np.ndarray) and group.dtype == bool:
            sel = group
        elif groups is None:
            raise DataError("group filter requested but the data carry no groups")
        else:
            sel = groups == str(group)
        col = col[sel]
    if col.size == 0:
        raise DataError("empty group")
    if np.isnan(col).any():
        raise DataError(f"missing values at visit {k}")
    return float(col.mean())


def lsmean_contrast(fit, t: float, arm: str = "arm", means: dict | None = None) -> np.ndarray:
    """Design-row difference (arm=1 minus arm=0) at time t, other covariates at their means."""
    if arm not in fit.design.references():
        raise DataError(f"contrast references absent term {arm!r}")
    means = dict(fit.profile_means if means is None else means)
    rows = []
    tc = fit.time_codes
    for a in (1.0, 0.0):
        fr = {k: np.array([v]) for k, v in means.items()}
        fr[arm] = np.array([a])
        fr["t"] = np.array([float(t)])
        for j, tj in enumerate(tc):
            fr[f"v{j + 1}"] = np.array([1.0 if np.isclose(tj, t) else 0.0])
        rows.append(fit.design.matrix(fr, n=1)[0])
    return rows[0] - rows[1]


def lsmean_diff(fit, t: float, arm: str = "arm", means: dict | None = None) -> float:
    return float(lsmean_contrast(fit, t, arm, means) @ fit.beta)


def write_fit_summary(fit, dest, header: str | None = None) -> None:
    lines = [f"# {header}"] if header else []
    lines.append("term,estimate,model_se,robust_se")
    mse = np.sqrt(np.clip(np.diag(fit.model_cov), 0, None))
    rse = np.sqrt(np.clip(np.diag(fit.robust_cov), 0, None))
    for k, nm in enumerate(fit.names):
        lines.append(",".join([nm, fmt(fit.beta[k]), fmt(mse[k]), fmt(rse[k])]))
    text = "\n".join(lines) + "\n"
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
