import pytest

from loomfuse.pipeline import FIXTURES, compile_rules, load_fixture


@pytest.fixture(scope="session")
def programs():
    return {name: compile_rules(load_fixture(name)) for name in FIXTURES}
