import pytest

from tbbtrace.synth import build_case


@pytest.fixture(scope="session")
def case_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("case")
    build_case(out)
    return out


CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance criterion as passed unless the test body raises."""
    state = {"detail": ""}

    def _set(detail: str) -> None:
        state["detail"] = detail

    yield _set
    number = request.node.get_closest_marker("criterion").args[0]
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    CRITERIA[number] = (ok, state["detail"] or (rep.longrepr.reprcrash.message if rep and rep.failed else ""))


@pytest.hookimpl(hookwrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
