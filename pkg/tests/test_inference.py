import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_monotone
from drimpute.data import dataset_from_arrays
from drimpute.errors import FitError
from drimpute.inference import BootstrapPlan, bootstrap, interval_score, normal_ci, write_replicates_csv


def visit1_mean(ds):
    return [ds.y[:, 0].mean()]


def flaky(ds):
    if ds.y[0, 0] > 0:
        raise FitError("boom")
    return [ds.y[:, 0].mean()]


def test_bootstrap_se_of_mean_matches_formula():
    rng = np.random.default_rng(0)
    ds = dataset_from_arrays(rng.normal(size=(300, 2)))
    res = bootstrap(ds, BootstrapPlan(B=2000, seed=1), visit1_mean)
    target = ds.y[:, 0].std(ddof=1) / np.sqrt(ds.n)
    assert abs(res.se[0] / target - 1) < 0.10


def test_bootstrap_is_deterministic_and_thread_invariant():
    ds = random_monotone(np.random.default_rng(1), n=60)
    a = bootstrap(ds, BootstrapPlan(B=20, seed=(5, 1)), visit1_mean)
    b = bootstrap(ds, BootstrapPlan(B=20, seed=(5, 1), threads=2), visit1_mean)
    np.testing.assert_array_equal(a.replicates, b.replicates)
    c = bootstrap(ds, BootstrapPlan(B=20, seed=(5, 2)), visit1_mean)
    assert not np.array_equal(a.replicates, c.replicates)


def test_bootstrap_failure_budget():
    rng = np.random.default_rng(2)
    ds = dataset_from_arrays(rng.normal(size=(40, 2)))
    with pytest.raises(FitError, match="replicates failed"):
        bootstrap(ds, BootstrapPlan(B=50, seed=0), flaky)
    res = bootstrap(ds, BootstrapPlan(B=50, seed=0, max_fail_frac=1.0), flaky)
    assert res.n_failed == np.isnan(res.replicates[:, 0]).sum() > 0
    assert res.failures == {"FitError": res.n_failed}


def test_plan_rejects_tiny_B():
    with pytest.raises(ValueError):
        BootstrapPlan(B=1)


def test_replicates_csv():
    ds = dataset_from_arrays(np.arange(10.0).reshape(5, 2))
    res = bootstrap(ds, BootstrapPlan(B=3, seed=0), visit1_mean, names=["m"])
    buf = io.StringIO()
    write_replicates_csv(res, buf, header="x")
    lines = buf.getvalue().splitlines()
    assert lines[:2] == ["# x", "replicate,param,estimate"] and len(lines) == 5


def test_normal_ci():
    ci = normal_ci(1.0, 0.5, 0.95)
    assert ci.lower == pytest.approx(1 - 1.959963984540054 * 0.5, abs=1e-12)
    assert ci.upper == pytest.approx(1 + 1.959963984540054 * 0.5, abs=1e-12)
    with pytest.raises(ValueError):
        normal_ci(0, 1, 1.0)
    with pytest.raises(ValueError):
        normal_ci(0, -1)


@given(st.floats(-5, 5), st.floats(0, 3), st.floats(-10, 10), st.sampled_from([0.05, 0.1, 0.2]))
def test_interval_score_direct(lo, width, truth, alpha):
    hi = lo + width
    direct = (hi - lo) + (2 / alpha) * (lo - truth) * (truth < lo) + (2 / alpha) * (truth - hi) * (truth > hi)
    assert interval_score(lo, hi, truth, alpha) == direct


def test_interval_score_examples():
    assert interval_score(0.0, 1.0, 0.5, 0.05) == 1.0
    assert interval_score(0.0, 1.0, 2.0, 0.05) == 1.0 + 40.0
    np.testing.assert_array_equal(interval_score([0, 0], [1, 1], -1.0, 0.1), [21.0, 21.0])
