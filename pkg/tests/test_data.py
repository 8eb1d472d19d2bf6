import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_monotone
from drimpute.data import (dataset_from_arrays, fill_intermediate_gaps, ingest_long_csv, summarize,
                           validate_monotone, write_long_csv)
from drimpute.errors import DataError, NonMonotoneError

CSV = """# produced by hand
subject_id,visit,y,age,arm
a,0,1.5,30,1
a,1,2.0,30,1
a,2,,30,1
b,0,0.5,40,0
b,1,,40,0
b,2,,40,0
"""


def test_ingest_builds_wide_matrix():
    ds = ingest_long_csv(CSV)
    assert ds.subject_ids == ("a", "b")
    np.testing.assert_array_equal(ds.time_codes, [0, 1, 2])
    assert ds.baseline_names == ("age", "arm")
    np.testing.assert_array_equal(ds.observed, [[1, 1, 0], [1, 0, 0]])
    prof = validate_monotone(ds)
    np.testing.assert_array_equal(prof.J, [2, 1])
    np.testing.assert_array_equal(prof.C, [[0, 1, 0], [1, 0, 0]])


def test_round_trip_is_exact():
    rng = np.random.default_rng(0)
    ds = random_monotone(rng, n=40)
    buf = io.StringIO()
    write_long_csv(ds, buf, header="meta")
    back = ingest_long_csv(buf.getvalue())
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.baseline, ds.baseline)
    assert back.subject_ids == ds.subject_ids
    buf2 = io.StringIO()
    write_long_csv(back, buf2, header="meta")
    assert buf2.getvalue() == buf.getvalue()


def test_rows_in_any_order():
    lines = CSV.splitlines()
    shuffled = "\n".join(lines[:2] + lines[2:][::-1]) + "\n"
    ds = ingest_long_csv(shuffled)
    assert ds.subject_ids == ("b", "a")
    np.testing.assert_array_equal(ds.y[1], [1.5, 2.0, np.nan])


@pytest.mark.parametrize("bad, msg", [
    (CSV.replace("a,1,2.0", "a,1,abc"), "non-numeric outcome"),
    (CSV.replace("b,1,,40", "b,0,,40"), "duplicate"),
    (CSV.replace("a,2,,30", "a,2,,31"), "varies within subject"),
    (CSV.replace("b,0,0.5", "b,0,"), "baseline outcome missing"),
    ("subject_id,visit,y\n", "no data rows"),
])
def test_validation_errors(bad, msg):
    with pytest.raises(DataError, match=msg):
        ingest_long_csv(bad)


def test_unknown_schema_column():
    with pytest.raises(DataError, match="unknown schema column"):
        ingest_long_csv(CSV, {"baseline": ["height"]})


def test_non_monotone_lists_subjects():
    y = np.array([[1.0, np.nan, 2.0], [1.0, 2.0, np.nan], [0.0, np.nan, 1.0]])
    ds = dataset_from_arrays(y)
    with pytest.raises(NonMonotoneError) as e:
        validate_monotone(ds)
    assert e.value.subjects == ["1", "3"]
    assert validate_monotone(ds, allow_gaps=True).flagged == ("1", "3")


def test_gap_fill_predicts_and_keeps_observed():
    rng = np.random.default_rng(4)
    n = 200
    x = rng.normal(size=n)
    y = np.column_stack([x, 2 * x + 1, 3 * x])
    y[:5, 1] = np.nan
    ds = dataset_from_arrays(y, {"x": x})
    out = fill_intermediate_gaps(ds)
    np.testing.assert_allclose(out.y[:5, 1], 2 * x[:5] + 1, atol=1e-10)
    np.testing.assert_array_equal(out.y[5:], y[5:])
    assert out.filled[:5, 1].all() and out.filled.sum() == 5
    validate_monotone(out)


def test_gap_fill_noop_on_monotone():
    ds = random_monotone(np.random.default_rng(1))
    assert fill_intermediate_gaps(ds) is ds


def test_summarize_columns_and_dropout():
    ds = ingest_long_csv(CSV, {"group": "arm", "baseline": ["age"]})
    s = summarize(ds)
    assert list(s.columns) == ["group", "visit", "time", "n", "mean", "sd", "dropout_pct",
                               "mean_completers", "mean_dropouts"]
    allrows = s[s.group == "all"]
    np.testing.assert_allclose(allrows.dropout_pct, [0, 50, 100])
    assert allrows["mean"].iloc[0] == pytest.approx(1.0)
    assert set(s.group) == {"all", "0", "1"}


def test_take_duplicates_subjects_with_unique_ids():
    ds = random_monotone(np.random.default_rng(2), n=10)
    b = ds.take(np.array([0, 0, 3]))
    assert b.n == 3 and len(set(b.subject_ids)) == 3
    np.testing.assert_array_equal(b.y[0], b.y[1])


@given(st.integers(2, 6), st.integers(1, 30), st.integers(0, 10_000))
def test_profile_matches_pattern(m, n, seed):
    rng = np.random.default_rng(seed)
    J = rng.integers(1, m + 1, n)
    y = rng.normal(size=(n, m))
    y[np.arange(m)[None, :] >= J[:, None]] = np.nan
    prof = validate_monotone(dataset_from_arrays(y))
    np.testing.assert_array_equal(prof.J, J)
    np.testing.assert_array_equal(prof.R.sum(axis=1), J)
    np.testing.assert_array_equal(prof.C.sum(axis=1), 1)
