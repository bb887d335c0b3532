import os

# latency criteria are defined single-threaded; pin BLAS before numpy loads it
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import pytest  # noqa: E402

_RESULTS: dict[int, tuple[bool, str]] = {}


class CriterionLog:
    """Collects one verdict per acceptance criterion for the end-of-run summary."""

    def record(self, number: int, passed: bool, detail: str):
        _RESULTS[number] = (bool(passed), detail)
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def criteria():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        passed, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
    n_pass = sum(p for p, _ in _RESULTS.values())
    terminalreporter.write_line(f"{n_pass}/{len(_RESULTS)} criteria pass")
