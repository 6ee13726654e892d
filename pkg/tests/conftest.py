import numpy as np
import pytest

from lczmap import _kernels
from lczmap.raster import RasterGrid

BACKENDS = ["numpy"] + (["numba"] if _kernels.numba_backend is not None else [])

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Each kernel backend in turn."""
    return _kernels.numba_backend if request.param == "numba" else _kernels.numpy_backend


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_grid(data, **kw) -> RasterGrid:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[None]
    return RasterGrid(data, **kw)


class ConstantModel:
    def __init__(self, code: int):
        self.code = code

    def predict_patches(self, patches):
        return np.full(len(patches), self.code, dtype=np.int64)


@pytest.fixture
def detail(request):
    """Append a human-readable measurement to the criterion summary line."""
    def add(text: str):
        request.node.user_properties.append(("detail", text))
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    if rep.when == "call" or failed:
        details = [v for k, v in item.user_properties if k == "detail"]
        prev = _criteria.get(number)
        passed = (not failed) and (prev is None or prev[1])
        if prev is not None and prev[2]:
            details = [prev[2]] + [d for d in details if d not in prev[2]]
        _criteria[number] = (title, passed, "; ".join(details))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed, details = _criteria[number]
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}"
        if details:
            line += f"  [{details}]"
        terminalreporter.write_line(line)
