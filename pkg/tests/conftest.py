import pytest

from agsp.datamodel import generate_synthetic


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_small")
    counts = generate_synthetic(root, 24, 32, [0.85, 0.10, 0.05], seed=3)
    return root, counts


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
            terminalreporter.write_line(ACCEPTANCE[key])
