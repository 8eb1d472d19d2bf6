import io
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from drimpute.data import dataset_from_arrays, profile_from_last, validate_monotone
from drimpute.errors import DataError, PositivityError
from drimpute.simulation import DropoutConfig, GeneratorConfig, apply_dropout, generate_full
from drimpute.weights import (aipw_visit_coefficients, compute_weights, fit_hazards, weight_table,
                              write_weights_csv)


def padded_hazards(rng, n, m, low=0.0, high=0.6):
    lam = np.zeros((n, m + 1))
    lam[:, 1:m] = rng.uniform(low, high, size=(n, m - 1))
    return lam


def identity_errors(lam, J, m):
    """Largest deviations of the weight sum from 1 and of the tail sums from R_k / pi_k."""
    prof = profile_from_last(J, m)
    wt = weight_table(lam, prof.R, eps=1e-12)
    w = aipw_visit_coefficients(wt, prof)
    sum_err = np.max(np.abs(w.sum(axis=1) - 1.0))
    tails = np.cumsum(w[:, ::-1], axis=1)[:, ::-1]
    target = prof.R / wt.pi[:, :m]
    tail_err = np.max(np.abs(tails - target))
    return sum_err, tail_err


@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_weights_sum_to_one_and_tails_match(m, seed):
    rng = np.random.default_rng(seed)
    n = 3 * m
    J = np.tile(np.arange(1, m + 1), 3)
    lam = padded_hazards(rng, n, m, high=rng.uniform(0.05, 0.9))
    sum_err, tail_err = identity_errors(lam, J, m)
    assert sum_err < 1e-10
    assert tail_err < 1e-10


def test_identity_suite_covers_all_patterns_fast():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    cases = 0
    worst = 0.0
    seen = set()
    while cases < 1000:
        for m in (2, 3, 4, 5):
            for j in range(1, m + 1):
                lam = padded_hazards(rng, 1, m, high=0.95)
                worst = max(worst, *identity_errors(lam, np.array([j]), m))
                seen.add((m, j))
                cases += 1
    assert worst < 1e-10
    assert seen == {(m, j) for m in (2, 3, 4, 5) for j in range(1, m + 1)}
    assert time.perf_counter() - t0 < 5.0


def test_weight_table_padding_and_cumulative_product():
    lam = np.array([[0.7, 0.2, 0.5, 0.9]])
    R = np.array([[1, 1, 1]])
    wt = weight_table(lam, R)
    assert wt.lam[0, 0] == 0 and wt.lam[0, -1] == 0
    np.testing.assert_allclose(wt.pi[0], [1.0, 0.8, 0.4, 0.4])


def test_completer_weights_are_inverse_final_probability():
    lam = np.array([[0, 0.2, 0.5, 0]])
    wt = weight_table(lam, np.array([[1, 1, 1]]))
    np.testing.assert_allclose(wt.w[0], [-0.25, -1.25, 2.5])
    assert wt.w[0].sum() == pytest.approx(1.0)


def test_dropout_weight_on_last_visit():
    lam = np.array([[0, 0.2, 0.5, 0]])
    wt = weight_table(lam, np.array([[1, 1, 0]]))
    np.testing.assert_allclose(wt.w[0], [-0.25, 1.25, 0.0])


def test_no_dropout_gives_unit_final_weight():
    lam = np.zeros((4, 4))
    R = np.ones((4, 3), dtype=int)
    wt = weight_table(lam, R)
    np.testing.assert_array_equal(wt.w, np.tile([0.0, 0.0, 1.0], (4, 1)))


def test_positivity_error_names_subjects():
    lam = np.array([[0, 0.5, 0.99, 0], [0, 0.1, 0.1, 0]])
    R = np.array([[1, 1, 1], [1, 1, 1]])
    with pytest.raises(PositivityError) as e:
        weight_table(lam, R, eps=0.01, subject_ids=["a", "b"])
    assert e.value.subjects == ["a"]


def test_positivity_ignores_unobserved_cells():
    lam = np.array([[0, 0.5, 0.99, 0]])
    wt = weight_table(lam, np.array([[1, 1, 0]]), eps=0.01)
    assert wt.n_truncated == 0


def test_truncate_mode_clips_pi():
    lam = np.array([[0, 0.5, 0.99, 0]])
    R = np.array([[1, 1, 1]])
    wt = weight_table(lam, R, eps=0.01, mode="truncate")
    assert wt.n_truncated == 1
    assert wt.pi[0, 2] == pytest.approx(0.01)
    assert wt.w[0].sum() == pytest.approx(1.0)


def test_fit_hazards_pins_visits_without_dropout():
    rng = np.random.default_rng(3)
    y = rng.normal(size=(60, 3))
    y[:20, 2] = np.nan
    ds = dataset_from_arrays(y, {"x": rng.normal(size=60)})
    prof = validate_monotone(ds)
    hms = fit_hazards(ds, prof, "1 + x + hist", pin_no_dropout=True)
    assert hms.models[2] is None
    assert hms.models[3] is not None
    wt = compute_weights(hms, ds, prof)
    assert np.all(wt.lam[:, 1] == 0)
    assert np.all(wt.lam[20:, 2] > 0) and np.all(wt.lam[:, 3] == 0)


def test_hazard_design_rejects_future_outcomes(sim_ds):
    prof = validate_monotone(sim_ds)
    with pytest.raises(DataError, match="future-data reference"):
        fit_hazards(sim_ds, prof, {2: "1 + y2", 3: "1 + y1"})
    with pytest.raises(DataError, match="unknown design reference"):
        fit_hazards(sim_ds, prof, "1 + nothing")


def test_hazards_recover_generating_coefficients():
    full = generate_full(GeneratorConfig(n=40000), np.random.default_rng(8))
    ds = apply_dropout(full, DropoutConfig.moderate(), np.random.default_rng(9))
    prof = validate_monotone(ds)
    hms = fit_hazards(ds, prof, "1 + x2 + hist")
    b2 = hms.models[2].coefficients
    np.testing.assert_allclose(b2, [-7.625, -2.0, 0.5], atol=0.35)
    b3 = hms.models[3].coefficients
    np.testing.assert_allclose(b3[[0, 2, 3]], [-5.225, 0.1, 0.2], atol=0.5)


def test_sim_weights_identities_hold(sim_ds):
    prof = validate_monotone(sim_ds)
    wt = compute_weights(fit_hazards(sim_ds, prof, "1 + x2 + hist"), sim_ds, prof)
    np.testing.assert_allclose(wt.w.sum(axis=1), 1.0, atol=1e-10)
    assert np.all(wt.pi[:, :3] <= 1.0) and np.all(np.diff(wt.pi, axis=1) <= 0)


def test_weights_csv_layout(sim_ds):
    prof = validate_monotone(sim_ds)
    wt = compute_weights(fit_hazards(sim_ds, prof, "1 + x2 + hist"), sim_ds, prof)
    buf = io.StringIO()
    write_weights_csv(wt, sim_ds, prof, buf, header="h")
    lines = buf.getvalue().splitlines()
    assert lines[0] == "# h"
    assert lines[1] == "subject_id,visit,lambda_hat,pi_hat,w"
    assert len(lines) == 2 + sim_ds.n * sim_ds.m
