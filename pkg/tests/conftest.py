import numpy as np
import pytest

from tcostlab.market import GbmSpec, ScenarioTree


def one_step_tree(S0, children, probs=None, T=1.0):
    """Explicit one-step tree from a root price and child prices."""
    k = len(children)
    probs = probs if probs is not None else [1.0 / k] * k
    nodes = [{"id": 0, "parent_id": None, "time_index": 0, "S": S0}]
    nodes += [{"id": i + 1, "parent_id": 0, "time_index": 1, "S": s} for i, s in enumerate(children)]
    branches = {"0": [[i + 1, p] for i, p in enumerate(probs)]}
    return ScenarioTree.from_dict({"n_steps": 1, "T": T, "nodes": nodes, "branches": branches})


def flat_first_step_tree():
    """Price does not move over the first step, so trade timing is irrelevant."""
    nodes = [{"id": 0, "parent_id": None, "time_index": 0, "S": 100.0}]
    nodes += [{"id": i, "parent_id": 0, "time_index": 1, "S": 100.0} for i in (1, 2)]
    prices = {3: 112.0, 4: 92.0, 5: 112.0, 6: 92.0}
    nodes += [{"id": i, "parent_id": 1 + (i - 3) // 2, "time_index": 2, "S": s} for i, s in prices.items()]
    br = {"0": [[1, 0.5], [2, 0.5]], "1": [[3, 0.5], [4, 0.5]], "2": [[5, 0.5], [6, 0.5]]}
    return ScenarioTree.from_dict({"n_steps": 2, "T": 1.0, "nodes": nodes, "branches": br})


@pytest.fixture
def gbm():
    return GbmSpec(S0=100.0, mu=0.05, sigma=0.2, T=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion."""

    def log(label, ok, detail=""):
        line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
