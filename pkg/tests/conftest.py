import numpy as np
import pytest

from finsent.model import ModelConfig, init_model
from finsent.tokenizer import build_vocab

import toy_data


@pytest.fixture(scope="session")
def toy_vocab():
    lines = toy_data.corpus_lines() + [e.text for e in toy_data.labeled_examples()]
    lines += [t for t, _ in toy_data.SCORED]
    return build_vocab(lines, target_size=400)


@pytest.fixture
def tiny_config():
    return ModelConfig(num_layers=2, num_heads=2, hidden_size=16, intermediate_size=32, vocab_size=30,
                       max_position=12, dropout_prob=0.0, attention_dropout_prob=0.0)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config, seed=3)


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(5)
    ids = rng.integers(5, 30, size=(3, 12))
    ids[:, 0] = 2
    mask = np.ones((3, 12), dtype=np.int64)
    mask[1, 7:] = 0
    mask[2, 4:] = 0
    ids[mask == 0] = 0
    seg = np.zeros((3, 12), dtype=np.int64)
    seg[0, 6:] = 1
    return ids, mask, seg


# -- acceptance report -----------------------------------------------------------
# Tests marked ``criterion(number, title)`` get one PASS/FAIL line in the terminal
# summary, followed by whatever they stored with ``record_property``.

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "ran": False, "details": []})
    if report.when == "call" or report.failed:
        entry["ran"] = entry["ran"] or report.when == "call"
        entry["passed"] = entry["passed"] and report.passed
    if report.when == "call":
        entry["details"] += [f"{k}={v}" for k, v in report.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["passed"] and e["ran"] else "FAIL"
        details = f"  [{'; '.join(e['details'])}]" if e["details"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {status}  {e['title']}{details}")
