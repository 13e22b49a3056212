import numpy as np
import pytest

from kropelab.mdp import Policy, TabularMDP, garnet_policies, generate_garnet


@pytest.fixture
def garnet():
    return generate_garnet(8, 5, 3, seed=3, gamma=0.99)


@pytest.fixture
def garnet_pair(garnet):
    return garnet, garnet_policies(garnet)[1]


def random_mdp(rng: np.random.Generator, n_states: int = 4, n_actions: int = 2,
               gamma: float = 0.9) -> TabularMDP:
    """Dense random MDP, for tests that want no structure at all."""
    p = rng.random((n_states * n_actions, n_states)) + 0.05
    p /= p.sum(axis=1, keepdims=True)
    r = rng.uniform(-1, 1, n_states * n_actions)
    return TabularMDP(n_states, n_actions, r, p, gamma, np.full(n_states, 1.0 / n_states))


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> Policy:
    probs = rng.random((n_states, n_actions)) + 0.05
    return Policy(probs / probs.sum(axis=1, keepdims=True))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
