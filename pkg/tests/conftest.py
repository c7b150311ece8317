import numpy as np
import pytest

from fd3.phantoms import make_phantoms


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def phantom64():
    return make_phantoms(1, 64, seed=11)[0]


def random_image(rng, h=32, w=32):
    return rng.uniform(0.0, 1.0, size=(h, w, 3))


ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record a named acceptance outcome; the summary prints one line per criterion."""
    state = {"name": request.node.name, "detail": ""}

    def note(detail):
        state["detail"] = detail

    yield note
    passed = request.node.rep_call.passed if hasattr(request.node, "rep_call") else False
    ACCEPTANCE_RESULTS.append((state["name"], passed, state["detail"]))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        line = f"{'PASS' if passed else 'FAIL'}  {name}"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
