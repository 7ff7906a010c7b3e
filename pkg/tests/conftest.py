import numpy as np
import pytest

from ditehrnet.network import ModelConfig, build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig.tiny()


@pytest.fixture(scope="session")
def model18():
    return build(ModelConfig.variant_config("18"), seed=0)


@pytest.fixture(scope="session")
def model30():
    return build(ModelConfig.variant_config("30"), seed=0)


def zero_params(module, predicate=lambda name: True):
    """Zero every parameter whose full name satisfies ``predicate``."""
    for owner, pname, full, arr in module.parameter_slots():
        if predicate(full):
            owner._params[pname] = np.zeros_like(arr)


def exact_batchnorm(module):
    """Set eps to 0 in every batch norm so that default statistics give an exact identity."""
    from ditehrnet.nn import BatchNorm2d

    stack = [module]
    while stack:
        m = stack.pop()
        if isinstance(m, BatchNorm2d):
            m.eps = 0.0
        stack.extend(c for _, c in m.children())
    return module


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """``record(criterion, passed, detail)`` prints and stores one verdict line."""

    def record(criterion: str, passed: bool, detail: str) -> bool:
        line = f"criterion {criterion:<3} {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        print(line)
        return passed

    return record
