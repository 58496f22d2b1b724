import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hiddenworld.compiler import bundled_scenarios, compile_episode, read_scenario  # noqa: E402

SCENARIOS = bundled_scenarios()


@pytest.fixture(scope="session")
def compiled_all():
    return {name: compile_episode(read_scenario(name)) for name in SCENARIOS}


@pytest.fixture(scope="session")
def coffee(compiled_all):
    return compiled_all["coffee"]


@pytest.fixture(params=SCENARIOS)
def compiled(request, compiled_all):
    return compiled_all[request.param]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
