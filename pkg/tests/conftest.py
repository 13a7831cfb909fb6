import pytest

from exclavefl import _pykernels
from exclavefl.job import load_job, make_demo_job

try:
    from exclavefl import _kernels
except ImportError:  # extension not built
    _kernels = None

ACCEPTANCE_RESULTS: dict = {}

BACKENDS = [pytest.param(_pykernels, id="python")]
if _kernels is not None:
    BACKENDS.append(pytest.param(_kernels, id="cython"))


@pytest.fixture(params=BACKENDS)
def kernels(request):
    return request.param


@pytest.fixture(scope="session")
def demo_job(tmp_path_factory):
    return load_job(make_demo_job(tmp_path_factory.mktemp("job"), seed=11))


@pytest.fixture(scope="session")
def sanitized_job(tmp_path_factory):
    return load_job(make_demo_job(tmp_path_factory.mktemp("sjob"), seed=12, sanitize=True))


@pytest.fixture(scope="session")
def faithful_run(demo_job):
    from exclavefl.orchestrator import run_job

    return run_job(demo_job)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
