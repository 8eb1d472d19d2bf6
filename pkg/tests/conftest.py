import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from drimpute.data import dataset_from_arrays
from drimpute.simulation import SimulationConfig, repeat_data

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def sim_ds():
    """One moderate-construct replicate (n=500, three visits, monotone dropout)."""
    return repeat_data(SimulationConfig(), "moderate", 0)


def random_monotone(rng, n=200, m=3, p_drop=0.2, baseline=("x1", "x2")):
    """Random monotone dataset with baseline covariates and outcome-dependent dropout."""
    x = {nm: rng.normal(size=n) if k == 0 else (rng.random(n) < 0.5).astype(float)
         for k, nm in enumerate(baseline)}
    y = np.empty((n, m))
    y[:, 0] = 1 + sum(x.values()) + rng.normal(size=n)
    for j in range(1, m):
        y[:, j] = 0.5 + 0.8 * y[:, j - 1] + 0.3 * x[baseline[0]] + rng.normal(size=n)
    last = np.full(n, m)
    for i in range(n):
        for j in range(1, m):
            if rng.random() < p_drop:
                last[i] = j
                break
    y = np.where(np.arange(m)[None, :] < last[:, None], y, np.nan)
    return dataset_from_arrays(y, x)


def complete_dataset(rng, n=120, m=3):
    x1 = rng.normal(size=n)
    x2 = (rng.random(n) < 0.5).astype(float)
    t = np.arange(m, dtype=float)
    y = 1 + x1[:, None] + 0.5 * x2[:, None] + t * (1 - x2[:, None]) + rng.normal(size=(n, m))
    return dataset_from_arrays(y, {"x1": x1, "x2": x2}, time_codes=t)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(label, checks):
        failed = [desc for desc, ok in checks if not ok]
        status = "FAIL" if failed else "PASS"
        detail = "; ".join(failed) if failed else f"{len(checks)} checks"
        line = f"{status} {label}: {detail}"
        lines.append(line)
        print(line)
        return not failed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
