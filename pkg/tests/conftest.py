import pytest

from helpers import toy_case

_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, text): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        _ACCEPTANCE.append((mark.args[0], status, mark.args[1]))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, text in sorted(_ACCEPTANCE, key=lambda r: int(r[0][2:])):
        terminalreporter.write_line(f"{label} {status}: {text}")


@pytest.fixture
def toy():
    return toy_case()


@pytest.fixture(scope="session")
def ieee39_catalog():
    from faultchain.grid import load_case
    from faultchain.oracle import enumerate_chains
    return enumerate_chains(load_case("case39"), 0.55, 3)


@pytest.fixture
def toy_case_file(tmp_path):
    import json

    from faultchain.grid import case_to_dict
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(case_to_dict(toy_case())))
    return path
