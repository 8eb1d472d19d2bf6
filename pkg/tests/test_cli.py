import json
import os

import numpy as np
import pandas as pd
import pytest

from drimpute.cli import main
from drimpute.data import write_long_csv
from drimpute.methods import Pipeline, scenario_specs


@pytest.fixture(scope="module")
def raw_csv(tmp_path_factory, sim_ds):
    p = tmp_path_factory.mktemp("data") / "trial.csv"
    write_long_csv(sim_ds, str(p))
    return str(p)


def read_dir(d):
    return {f: open(os.path.join(d, f), "rb").read() for f in sorted(os.listdir(d))}


def estimates(d):
    return pd.read_csv(os.path.join(d, "estimates.csv"), comment="#").set_index("estimand")


def test_validate(raw_csv, tmp_path):
    assert main(["validate", "--input", raw_csv, "--out", str(tmp_path)]) == 0
    meta = json.load(open(tmp_path / "metadata.json"))
    assert meta["n_subjects"] == 500 and meta["n_visits"] == 3
    head = open(tmp_path / "summary.csv").readline()
    assert head.startswith("# drimpute=") and "seed=0" in head and "config=" in head


@pytest.mark.parametrize("method", ["paik", "aipw-i", "aipw-s", "br-star"])
def test_impute_then_estimate_equals_fused(method, raw_csv, tmp_path, sim_ds):
    imp, est, fused = tmp_path / "imp", tmp_path / "est", tmp_path / "fused"
    assert main(["impute", "--input", raw_csv, "--method", method, "--out", str(imp)]) == 0
    assert main(["estimate", "--input", str(imp / "completed.csv"), "--out", str(est)]) == 0
    assert main(["estimate", "--input", raw_csv, "--method", method, "--out", str(fused)]) == 0
    a, b = estimates(est), estimates(fused)
    coefs = [e for e in a.index if e.startswith("coef:") or e.startswith("lsmean:")]
    np.testing.assert_allclose(a.loc[coefs, "estimate"], b.loc[coefs, "estimate"], rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.loc["mean:3", "estimate"], b.loc["mean:3", "estimate"], atol=1e-12)
    comp = pd.read_csv(imp / "completed.csv", comment="#")
    assert set(comp.provenance) <= {"observed", f"imputed:{method.replace('-', '_')}"}
    assert comp.y.notna().all()


def test_estimate_matches_library_pipeline(raw_csv, tmp_path, sim_ds):
    assert main(["estimate", "--input", raw_csv, "--method", "mmrm", "--out", str(tmp_path)]) == 0
    got = estimates(tmp_path)
    pipe = Pipeline(scenario_specs(True, True), ("mmrm",), tuple(got.index))
    np.testing.assert_allclose(got.estimate.to_numpy(), pipe(sim_ds), atol=1e-12)
    assert (got.se_method == "sandwich").all() and (got.se > 0).all()


def test_bootstrap_output_is_thread_invariant(raw_csv, tmp_path):
    outs = []
    for threads in ("1", "3"):
        d = tmp_path / f"t{threads}"
        assert main(["estimate", "--input", raw_csv, "--method", "aipw-i", "--bootstrap", "6", "--seed", "7",
                     "--threads", threads, "--out", str(d)]) == 0
        outs.append(read_dir(d))
    assert outs[0] == outs[1]
    assert "replicates.csv" in outs[0]


def test_simulate_is_thread_invariant_and_reports(tmp_path):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"repeats": 2, "B": 2, "n_oracle": 100000, "cells": ["Y+P+"],
                               "methods": ["aipw_i", "paik"], "estimands": ["mean:3"]}))
    outs = []
    for threads in ("1", "2"):
        d = tmp_path / f"s{threads}"
        assert main(["simulate", "--config", str(cfg), "--threads", threads, "--seed", "3", "--out", str(d)]) == 0
        outs.append(read_dir(d))
    assert outs[0] == outs[1]
    rep = tmp_path / "rep"
    assert main(["report", "--input", str(tmp_path / "s1"), "--out", str(rep)]) == 0
    assert "| AIPW-I |" in (rep / "report.md").read_text()


def test_exit_code_non_monotone(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("subject_id,visit,y,x\na,0,1,0\na,1,,0\na,2,3,0\nb,0,1,1\nb,1,2,1\nb,2,3,1\n")
    assert main(["validate", "--input", str(p), "--out", str(tmp_path / "o")]) == 2
    err = json.load(open(tmp_path / "o" / "error.json"))
    assert err["error"] == "NonMonotoneError" and err["subjects"] == ["a"]


def test_exit_code_non_numeric(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("subject_id,visit,y\na,0,1\na,1,x\n")
    assert main(["validate", "--input", str(p)]) == 2


def test_exit_code_unknown_config_key(raw_csv, tmp_path):
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"specz": {}}))
    assert main(["estimate", "--input", raw_csv, "--method", "gee", "--config", str(c)]) == 2


def test_exit_code_positivity(raw_csv, tmp_path):
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"specs": {"eps": 0.9}}))
    code = main(["estimate", "--input", raw_csv, "--method", "aipw-i", "--config", str(c),
                 "--out", str(tmp_path / "o")])
    assert code == 3
    assert json.load(open(tmp_path / "o" / "error.json"))["error"] == "PositivityError"


def test_impute_rejects_non_imputer(raw_csv):
    assert main(["impute", "--input", raw_csv, "--method", "mmrm"]) == 2
