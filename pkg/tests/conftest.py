import numpy as np
import pytest

from hydrocal import pipeline, twincase


@pytest.fixture(scope="session")
def small_study(tmp_path_factory):
    """Reduced twin study (4 parameters, 2 gauges, 18 h run)."""
    base = tmp_path_factory.mktemp("twin_small")
    study_path = twincase.write_twin_case(base, variant="small")
    return pipeline.load_study_config(study_path)


@pytest.fixture(scope="session")
def full_study(tmp_path_factory):
    """Paper-shaped twin study (9 parameters, 4 gauges, 36 h run)."""
    base = tmp_path_factory.mktemp("twin_full")
    study_path = twincase.write_twin_case(base, variant="full")
    return pipeline.load_study_config(study_path)


@pytest.fixture(scope="session")
def small_evaluation(small_study):
    """Design + snapshot matrices for the small twin, evaluated once."""
    design = pipeline.make_design(small_study)
    return pipeline.evaluate_doe(small_study, design, workers=1)


@pytest.fixture(scope="session")
def small_roms(small_study, small_evaluation):
    return pipeline.fit_roms(small_study, small_evaluation)


def assert_allclose(actual, desired, rtol=1e-7, atol=0.0):
    np.testing.assert_allclose(actual, desired, rtol=rtol, atol=atol)
