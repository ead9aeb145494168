import contextlib

import pytest

_RESULTS: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """Context manager recording one acceptance criterion's outcome.

    Usage::

        with criterion(3, "decode round-trip") as note:
            ...
            note("max error 1e-12")
    """

    @contextlib.contextmanager
    def record(number: int, title: str):
        details: list[str] = []
        try:
            yield details.append
        except BaseException as exc:
            details.append(f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            _RESULTS[number] = (title, False, "; ".join(details))
            raise
        _RESULTS[number] = (title, True, "; ".join(details))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, detail = _RESULTS[number]
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)
