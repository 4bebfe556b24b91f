import pytest

_RESULTS = pytest.StashKey()


@pytest.fixture
def acceptance_log(request):
    """Dict the acceptance tests record ``number -> (title, ok, seconds, limit, note)`` into."""
    return request.config.stash.setdefault(_RESULTS, {})


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        title, ok, seconds, limit, note = results[num]
        line = f"[{'PASS' if ok else 'FAIL'}] {num}. {title}  ({seconds:.1f}s, limit {limit:g}s)"
        if note:
            line += f"  {note}"
        terminalreporter.write_line(line)
