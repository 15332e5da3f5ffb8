import numpy as np
import pytest

from lisco.problems import ProblemKind, gen_instance


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale reproduction tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale reproduction run, only with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def convex_instance():
    return gen_instance(ProblemKind.CONVEX_QP, 6, 2, 4, seed=3)


@pytest.fixture(params=list(ProblemKind), ids=lambda k: k.value)
def any_instance(request):
    return gen_instance(request.param, 6, 2, 3, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
