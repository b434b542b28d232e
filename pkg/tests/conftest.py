import pytest

from fedveca.config import from_dict


def small_config(**over):
    raw = {
        "dataset": {"n": 400, "d": 5, "n_test": 100},
        "n_clients": 3, "rounds": 8, "eta": 0.01, "batch_size": 16,
    }
    for k, v in over.items():
        if k == "dataset":
            raw["dataset"].update(v)
        else:
            raw[k] = v
    return from_dict(raw)


@pytest.fixture
def small_cfg():
    return small_config()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
