import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion: ``criterion(n, ok, detail)``. The
    verdict is printed in the terminal summary and the test fails if not ok."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(n: int, ok: bool, detail: str):
        results[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, f"criterion {n} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
