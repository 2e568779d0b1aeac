import sys

import numpy as np
import pytest

from rbmsem import NORMAL, gcm, simulate, spec_from_dict, true_theta, two_factor


def saturated_spec(mean_structure=True):
    """One indicator, one free variance and (optionally) one free mean."""
    doc = {
        "p": 1, "q": 1, "mean_structure": mean_structure,
        "matrices": {"theta": [{"row": 1, "col": 1, "free": "v"}]},
    }
    if mean_structure:
        doc["matrices"]["nu"] = [{"row": 1, "col": 1, "free": "mu"}]
    return spec_from_dict(doc)


@pytest.fixture
def saturated():
    return saturated_spec()


@pytest.fixture(scope="session")
def tf_spec():
    return two_factor()


@pytest.fixture(scope="session")
def gcm_spec():
    return gcm()


@pytest.fixture(scope="session")
def tf_data(tf_spec):
    return simulate(tf_spec, true_theta(tf_spec, "high").values, 100, NORMAL, seed=11)


@pytest.fixture(scope="session")
def gcm_data(gcm_spec):
    return simulate(gcm_spec, true_theta(gcm_spec, "high").values, 60, NORMAL, seed=12)


def admissible_points(spec, truth, k, seed, spread=0.2):
    """Random parameter vectors near ``truth`` that keep variances positive."""
    rng = np.random.default_rng(seed)
    truth = np.asarray(truth, dtype=float)
    scale = np.where(truth == 0, 1.0, np.abs(truth))
    pts = truth + spread * scale * rng.uniform(-1, 1, size=(k, len(truth)))
    mask = spec.variance_mask
    pts[:, mask] = np.abs(pts[:, mask]) + 0.05 * scale[mask]
    return pts


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
