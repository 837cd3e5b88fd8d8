import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from tenantkv import _kernels


@pytest.fixture
def store_root(tmp_path):
    return str(tmp_path / "store")


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: end-to-end acceptance criteria (slow)")


@pytest.fixture(params=sorted(_kernels.available_impls()))
def kernel_impl(request):
    return _kernels.available_impls()[request.param]
