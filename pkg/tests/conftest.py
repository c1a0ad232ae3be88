import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scsr.cohort import CohortConfig, ad_atrophy, synth_cohort
from scsr.geometry import build_icosphere, contiguous_roi, define_roi, generate_parcellation
from scsr.neural import MlpModel, TrainConfig, fit_scaler

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def mesh2():
    return build_icosphere(2)


@pytest.fixture(scope="session")
def mesh3():
    return build_icosphere(3)


@pytest.fixture(scope="session")
def parc2(mesh2):
    parc = generate_parcellation(mesh2, 12, seed=3)
    return define_roi(parc, contiguous_roi(mesh2, parc, 2), "ad_roi")


@pytest.fixture(scope="session")
def parc3(mesh3):
    parc = generate_parcellation(mesh3, 34, seed=7)
    return define_roi(parc, contiguous_roi(mesh3, parc, 4), "ad_roi")


@pytest.fixture(scope="session")
def small_cohort(mesh2, parc2):
    cfg = CohortConfig(n_per_group={"CN": 60, "MCI": 10, "AD": 10}, mesh_order=2,
                       atrophy=ad_atrophy("ad_roi", 0.4), seed=11)
    return synth_cohort(cfg, mesh2, parc2)


@pytest.fixture(scope="session")
def tiny_model(small_cohort):
    """Untrained small network with a real scaler; enough for engine plumbing tests."""
    cfg = TrainConfig(hidden=(32, 32, 32), seed=5)
    cn = small_cohort.select("CN")
    return MlpModel.init(small_cohort.p, cfg, fit_scaler(cn))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config._verdicts = []


@pytest.fixture
def verdict(request, capsys):
    """Record, print and assert one acceptance criterion."""

    def record(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        request.config._verdicts.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    verdicts = getattr(config, "_verdicts", [])
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(verdicts):
            terminalreporter.write_line(line)
