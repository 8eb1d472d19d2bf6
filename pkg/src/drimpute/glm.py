"""Least squares, logistic regression by IRLS, prediction and forward selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .design import DesignSpec, term_name
from .errors import FitError, SeparationError

log = logging.getLogger(__name__)

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 50
SEPARATION_BOUND = 30.0
ALIAS_TOL = 1e-9


@dataclass(frozen=True)
class LinearModelFit:
    coefficients: np.ndarray
    resid_var: float
    names: tuple
    n_used: int
    dropped: tuple = ()
    fitted: np.ndarray | None = field(default=None, repr=False)
    design: DesignSpec | None = None

    def predict(self, X):
        return predict(self, X)


@dataclass(frozen=True)
class LogisticModelFit:
    coefficients: np.ndarray
    converged: bool
    n_used: int
    names: tuple
    n_iter: int = 0
    loglik: float = float("nan")
    fitted: np.ndarray | None = field(default=None, repr=False)
    design: DesignSpec | None = None

    def predict(self, X):
        return predict(self, X)


def _names(names, p):
    return tuple(names) if names is not None else tuple(f"x{j}" for j in range(p))


def _qr_aliased(X):
    """QR of X and indices of columns that are (numerically) combinations of earlier ones."""
    Q, R = np.linalg.qr(X)
    d = np.abs(np.diag(R))
    norms = np.sqrt(np.einsum("ij,ij->j", X, X))
    return Q, R, [j for j in range(X.shape[1]) if d[j] <= ALIAS_TOL * max(norms[j], 1e-300)]


def fit_ols(X, y, w=None, names=None, design=None) -> LinearModelFit:
    """Weighted least squares; aliased columns get coefficient 0 and are recorded."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    names = _names(names, p)
    if w is None:
        use = np.ones(n, dtype=bool)
        sw = None
    else:
        w = np.asarray(w, dtype=float)
        if np.any(w < 0):
            raise FitError("negative regression weights")
        use = w > 0
        sw = np.sqrt(w[use])
    n_eff = int(use.sum())
    if n_eff < p:
        raise FitError(f"n_effective={n_eff} < p={p}: too few rows to fit")
    Xu, yu = X[use], y[use]
    if sw is not None:
        Xu = Xu * sw[:, None]
        yu = yu * sw
    beta = np.zeros(p)
    dropped, keep = [], []
    if p:
        Q, R, dropped = _qr_aliased(Xu)
        keep = [j for j in range(p) if j not in dropped]
        if dropped:
            log.debug("dropping aliased columns %s", [names[j] for j in dropped])
            if keep:
                Q, R = np.linalg.qr(Xu[:, keep])
        if keep:
            beta[keep] = solve_triangular(R, Q.T @ yu)
    resid = yu - Xu @ beta
    rss = float(resid @ resid)
    dof = n_eff - len(keep)
    resid_var = rss / dof if dof > 0 else 0.0
    return LinearModelFit(
        coefficients=beta,
        resid_var=resid_var,
        names=names,
        n_used=n_eff,
        dropped=tuple(names[j] for j in dropped),
        fitted=X @ beta,
        design=design,
    )


def _loglik(eta, r):
    return float(r @ eta - np.logaddexp(0.0, eta).sum())


def fit_logistic(X, r, names=None, design=None, tol=IRLS_TOL, max_iter=IRLS_MAX_ITER) -> LogisticModelFit:
    X = np.asarray(X, dtype=float)
    r = np.asarray(r, dtype=float)
    n, p = X.shape
    names = _names(names, p)
    if n < p:
        raise FitError(f"n={n} < p={p}: too few rows for logistic regression")
    if r.min() == r.max():
        raise FitError(f"single-class response (all {int(r[0])}); logistic model not estimable")
    beta = np.zeros(p)
    eta = np.zeros(n)
    ll = _loglik(eta, r)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prob = expit(eta)
        score = X.T @ (r - prob)
        if np.max(np.abs(score)) < tol:
            converged = True
            it -= 1
            break
        W = prob * (1.0 - prob)
        H = (X * W[:, None]).T @ X
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, score, rcond=None)[0]
        for _ in range(30):
            cand = beta + step
            eta_c = X @ cand
            ll_c = _loglik(eta_c, r)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            step = step / 2.0
        beta, eta, ll = cand, eta_c, ll_c
        big = np.abs(beta)
        if big.max() > SEPARATION_BOUND:
            col = names[int(big.argmax())]
            raise SeparationError(f"complete separation suspected: |coef| > {SEPARATION_BOUND:g} for column {col!r}")
    else:
        prob = expit(eta)
        converged = bool(np.max(np.abs(X.T @ (r - prob))) < tol)
    return LogisticModelFit(
        coefficients=beta,
        converged=converged,
        n_used=n,
        names=names,
        n_iter=it,
        loglik=ll,
        fitted=expit(eta),
        design=design,
    )


def predict(fit, Xnew) -> np.ndarray:
    Xnew = np.atleast_2d(np.asarray(Xnew, dtype=float))
    if Xnew.shape[1] != len(fit.coefficients):
        raise FitError(f"design width {Xnew.shape[1]} does not match fit width {len(fit.coefficients)}")
    eta = Xnew @ fit.coefficients
    if isinstance(fit, LogisticModelFit):
        return expit(eta)
    return eta


def _gram_rss(G, cols):
    """Residual sum of squares and rank for the columns ``cols`` of an augmented Gram matrix [X y]'[X y]."""
    yy = G[-1, -1]
    if not cols:
        return yy, 0
    A = G[np.ix_(cols, cols)]
    b = G[cols, -1]
    w, V = np.linalg.eigh(A)
    keep = w > ALIAS_TOL * max(w.max(), 1e-300) * len(cols)
    proj = V[:, keep].T @ b
    return max(yy - float(proj @ (proj / w[keep])), 0.0), int(keep.sum())


def _aic_gaussian(rss, n, rank):
    return n * np.log(max(rss / n, 1e-300)) + 2.0 * rank


def forward_select(
    base: DesignSpec,
    candidates: Sequence,
    frame: Mapping[str, np.ndarray],
    y,
    criterion: str = "aic",
    family: str = "gaussian",
    w=None,
) -> DesignSpec:
    """Greedy forward selection by AIC (deviance + 2 * parameters).

    Terms from ``candidates`` are added one at a time, always the one with the
    lowest criterion; ties go to the earlier candidate. Stops when no addition
    lowers the criterion.
    """
    if criterion != "aic":
        raise ValueError(f"unsupported selection criterion {criterion!r}")
    y = np.asarray(y, dtype=float)
    n = len(y)
    cands = [tuple(c.split(":")) if isinstance(c, str) else tuple(c) for c in candidates]
    cands = [c for c in cands if c not in base.terms]
    if not cands:
        return base
    every = DesignSpec(base.terms + tuple(dict.fromkeys(cands)))
    X = every.matrix(frame, n=n)
    pos = {t: k for k, t in enumerate(every.terms)}
    chosen = list(base.terms)
    remaining = list(dict.fromkeys(cands))

    if family == "gaussian":
        Z = np.column_stack([X, y])
        G = Z.T @ Z if w is None else (Z * np.asarray(w, dtype=float)[:, None]).T @ Z
        n_eff = n if w is None else int(np.count_nonzero(w))

        def score(terms):
            rss, rank = _gram_rss(G, [pos[t] for t in terms])
            return _aic_gaussian(rss, n_eff, rank)
    elif family == "binomial":
        def score(terms):
            if not terms:
                return _null_criterion(y, family, w)
            f = fit_logistic(X[:, [pos[t] for t in terms]], y)
            return -2.0 * f.loglik + 2.0 * len(terms)
    else:
        raise ValueError(f"unknown family {family!r}")

    current = score(chosen)
    while remaining:
        best, best_score = None, np.inf
        for c in remaining:
            s = score(chosen + [c])
            if s < best_score:
                best, best_score = c, s
        if not best_score < current:
            break
        chosen.append(best)
        remaining.remove(best)
        current = best_score
        log.debug("forward_select: added %s (aic=%.4f)", term_name(best), best_score)
    return DesignSpec(tuple(chosen))


def _null_criterion(y, family, w):
    n = len(y)
    if family == "gaussian":
        rss = float(y @ y) if w is None else float((w * y * y).sum())
        return n * np.log(max(rss / n, 1e-300))
    return 2.0 * n * np.log(2.0)
