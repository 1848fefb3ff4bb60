import pytest

LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[LINES] = []


@pytest.fixture
def criterion(request):
    """Record and echo one ``criterion N: PASS/FAIL`` line."""
    lines = request.config.stash[LINES]
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(name, ok, detail=""):
        line = f"criterion {name}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f"  [{detail}]"
        lines.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
