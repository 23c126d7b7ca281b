import pytest

from helpers import ACCEPTANCE_LOG


@pytest.fixture(autouse=True)
def _compiled_backend_default():
    # Tests that switch kernel backends must not leak the choice.
    from stablab import kernels

    before = kernels.BACKEND
    yield
    kernels.use_backend(before)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LOG:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, msg in sorted(ACCEPTANCE_LOG, key=lambda r: int(r[0])):
        line = f"[{status}] {number:>2}. {title}"
        terminalreporter.write_line(line + (f" -- {msg}" if msg else ""))
