import numpy as np
import pytest

from alignkd import tensor as T


@pytest.fixture
def f64():
    with T.precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    class Verdict:
        def __init__(self, name):
            self.name = name
            self.detail = ""
            self.ok = False

        def passed(self, detail=""):
            self.ok, self.detail = True, detail

    holder = []

    def start(name):
        holder.append(Verdict(name))
        return holder[-1]

    yield start
    for v in holder:
        line = f"{'PASS' if v.ok else 'FAIL'}  {v.name}" + (f"  ({v.detail})" if v.detail else "")
        lines.append(line)
        print(line)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
