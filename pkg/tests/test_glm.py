from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from drimpute.design import DesignSpec
from drimpute.errors import FitError, SeparationError
from drimpute.glm import fit_logistic, fit_ols, forward_select


@given(st.integers(20, 80), st.integers(1, 5), st.integers(0, 10_000), st.booleans())
def test_ols_matches_normal_equations(n, p, seed, weighted):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p))])
    y = X @ rng.normal(size=p + 1) + rng.normal(size=n)
    w = rng.uniform(0.2, 3.0, n) if weighted else np.ones(n)
    fit = fit_ols(X, y, w=w if weighted else None)
    ref = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * y))
    np.testing.assert_allclose(fit.coefficients, ref, rtol=1e-10, atol=1e-10)


def test_ols_aliased_column_gets_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=30)
    X = np.column_stack([np.ones(30), x, 2 * x])
    fit = fit_ols(X, 1 + x, names=["1", "a", "b"])
    assert fit.dropped == ("b",)
    np.testing.assert_allclose(fit.coefficients, [1, 1, 0], atol=1e-12)


def test_ols_too_few_rows():
    with pytest.raises(FitError, match="too few rows"):
        fit_ols(np.ones((2, 3)), np.ones(2))


def test_logistic_maximizes_likelihood():
    rng = np.random.default_rng(5)
    X = np.column_stack([np.ones(400), rng.normal(size=400)])
    r = (rng.random(400) < 1 / (1 + np.exp(-(X @ [-0.5, 1.2])))).astype(float)
    fit = fit_logistic(X, r)

    def nll(b):
        eta = X @ b
        return -(r * eta - np.logaddexp(0, eta)).sum()

    ref = minimize(nll, np.zeros(2), method="BFGS", options={"gtol": 1e-10}).x
    np.testing.assert_allclose(fit.coefficients, ref, atol=1e-5)
    assert fit.converged and fit.loglik == pytest.approx(-nll(fit.coefficients))
    # local grid around the solution never beats it
    for d in [(1e-3, 0), (-1e-3, 0), (0, 1e-3), (0, -1e-3)]:
        assert nll(fit.coefficients + d) > nll(fit.coefficients)


def test_logistic_separation_and_single_class():
    x = np.linspace(-1, 1, 40)
    X = np.column_stack([np.ones(40), x])
    with pytest.raises(SeparationError):
        fit_logistic(X, (x > 0).astype(float))
    with pytest.raises(FitError, match="single-class"):
        fit_logistic(X, np.zeros(40))


def _aic(X, y):
    n = len(y)
    if X.shape[1] == 0:
        rss = y @ y
    else:
        b = np.linalg.lstsq(X, y, rcond=None)[0]
        rss = np.sum((y - X @ b) ** 2)
    return n * np.log(rss / n) + 2 * X.shape[1]


@given(st.integers(0, 10_000))
def test_forward_select_agrees_with_exhaustive_when_greedy_is_exact(seed):
    rng = np.random.default_rng(seed)
    n = 150
    frame = {f"a{k}": rng.normal(size=n) for k in range(4)}
    beta = rng.choice([0.0, 0.6], size=4)
    y = 1 + sum(b * frame[f"a{k}"] for k, b in enumerate(beta)) + rng.normal(size=n)
    base = DesignSpec.parse("1")
    cands = [f"a{k}" for k in range(4)]
    chosen = forward_select(base, cands, frame, y)
    one = np.ones((n, 1))
    # greedy path reproduced by brute force
    path, current = [], _aic(one, y)
    left = list(cands)
    while left:
        scores = [_aic(np.column_stack([one] + [frame[c] for c in path + [c]]), y) for c in left]
        k = int(np.argmin(scores))
        if not scores[k] < current:
            break
        current = scores[k]
        path.append(left.pop(k))
    assert chosen.names[1:] == path
    # with orthogonal-ish predictors the greedy optimum is within 2 AIC units of the global one
    best = min(_aic(np.column_stack([one] + [frame[c] for c in s]), y)
               for r in range(5) for s in combinations(cands, r))
    assert current - best < 2.0 + 1e-9


def test_forward_select_binomial_picks_signal():
    rng = np.random.default_rng(11)
    n = 600
    frame = {"s": rng.normal(size=n), "noise": rng.normal(size=n)}
    r = (rng.random(n) < 1 / (1 + np.exp(-1.5 * frame["s"]))).astype(float)
    chosen = forward_select(DesignSpec.parse("1"), ["s", "noise"], frame, r, family="binomial")
    assert "s" in chosen.names
