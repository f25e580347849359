import pytest

from adaptive_endpointing.environment import GeneratorConfig, generate


@pytest.fixture(scope="session")
def small_corpus():
    return generate(GeneratorConfig(seed=7, n_utterances=20_000))


@pytest.fixture(scope="session")
def default_corpus():
    return generate(GeneratorConfig(seed=0, n_utterances=100_000))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if rep.when == "call" and "criterion" in props:
                lines.append((props["criterion"], outcome, props["detail"]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for number, outcome, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {number}: {'PASS' if outcome == 'passed' else 'FAIL'}  {detail}")
