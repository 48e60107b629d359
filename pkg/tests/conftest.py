import pytest

from pedalign import prefgen as pg
from pedalign.fixture import fixture_path
from pedalign.pipeline import RunConfig, load_solution_bank, new_policy
from pedalign.policy import sft_train
from pedalign.schema import load_conversations


@pytest.fixture(scope="session")
def fixture_config():
    return RunConfig.load(fixture_path("config"))


@pytest.fixture(scope="session")
def corpus():
    convs, stats = load_conversations(fixture_path("corpus"))
    assert stats.skipped == 0
    return convs


@pytest.fixture(scope="session")
def bank():
    return load_solution_bank(fixture_path("solutions"))


@pytest.fixture(scope="session")
def splits(corpus, fixture_config):
    return pg.split_dataset(corpus, fixture_config.split)


@pytest.fixture(scope="session")
def sft_policy(fixture_config, splits, bank):
    sft, lhp, _ = splits
    base = new_policy(fixture_config, sft + lhp, bank)
    policy, _ = sft_train(base, pg.supervised_examples(sft), fixture_config.sft)
    return policy


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for a criterion, then assert it."""

    def record(number, title, ok, detail, elapsed, limit=None):
        in_time = limit is None or elapsed < limit
        status = "PASS" if ok and in_time else "FAIL"
        budget = f" (limit {limit:g}s)" if limit is not None else ""
        line = f"[{status}] criterion {number}: {title} | {detail} | {elapsed:.2f}s{budget}"
        request.config._acceptance_lines.append(line)
        print(line)
        assert ok, line
        assert in_time, line

    return record
