import numpy as np
import pytest

import fracsmooth as fs


@pytest.fixture(scope="session")
def bm():
    return fs.make_model("bm")


@pytest.fixture(scope="session")
def indicator():
    return fs.make_terminal("indicator")


@pytest.fixture(scope="session")
def linear():
    return fs.make_terminal("linear")


def assert_within_se(value, expected, se, n_se=3.0, label=""):
    (slack, z) = ((n_se * se), abs(value - expected) / se if se > 0 else np.inf)
    assert abs(value - expected) <= slack, \
        f"{label}: {value} vs {expected} differs by {z:.2f} SE (allow {n_se})"
