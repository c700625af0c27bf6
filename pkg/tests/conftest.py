import numpy as np
import pytest

from synthetic import write_imdb_tree

# criterion number -> (title, outcomes, details)
_CRITERIA: dict[int, tuple[str, list[str], list[str]]] = {}
_NODES: dict[str, int] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def imdb_tree(tmp_path_factory):
    """A small corpus laid out like the published IMDB archive."""
    return write_imdb_tree(tmp_path_factory.mktemp("imdb"), n_train=40, n_test=20, seed=7)


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            number, title = marker.args
            _CRITERIA.setdefault(number, (title, [], []))
            _NODES[item.nodeid] = number


def pytest_runtest_logreport(report):
    number = _NODES.get(report.nodeid)
    if number is None:
        return
    _, outcomes, details = _CRITERIA[number]
    if report.when == "call" or report.outcome != "passed":
        outcomes.append(report.outcome)
    for key, value in report.user_properties:
        if key == "detail" and report.when == "call":
            details.append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcomes, details = _CRITERIA[number]
        if not outcomes:
            status = "NOT RUN"
        elif "failed" in outcomes:
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        line = f"criterion {number:2d} {status:7s} {title}"
        if details:
            line += f"  [{'; '.join(details)}]"
        terminalreporter.write_line(line)
