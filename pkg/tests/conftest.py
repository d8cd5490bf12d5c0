import sys

import numpy as np
import pytest

from ppac.data import build_dataset, intervened_split
from ppac.popularity import build_popularity
from ppac.synthetic import community_interactions, toy_interactions

# toy ids after mapping: u1..u4 -> 0..3, i1..i5 -> 0..4
U1, U2, U3, U4 = 0, 1, 2, 3
I1, I2, I3, I4, I5 = 0, 1, 2, 3, 4


@pytest.fixture
def toy_ds():
    return build_dataset(toy_interactions())


@pytest.fixture
def toy_pop(toy_ds):
    return build_popularity(toy_ds, k=2)


@pytest.fixture(scope="session")
def small_split():
    """A few hundred interactions with every split populated."""
    raw = community_interactions(num_users=60, num_items=80, num_communities=4, mean_degree=12, seed=3)
    return intervened_split(build_dataset(raw), 0.1, 0.1, seed=0)


@pytest.fixture(scope="session")
def small_pop(small_split):
    return build_popularity(small_split, k=10)


def random_dataset(rng, max_users=200, max_items=300, density=None):
    """Random train-only dataset built from dense ids."""
    from ppac.data import RawInteraction

    nu = int(rng.integers(2, max_users + 1))
    ni = int(rng.integers(2, max_items + 1))
    dens = density if density is not None else float(rng.uniform(0.005, 0.08))
    mask = rng.random((nu, ni)) < dens
    mask[np.arange(nu), rng.integers(0, ni, nu)] = True  # every user has one item
    u, i = np.nonzero(mask)
    raw = [RawInteraction(f"u{a}", f"i{b}") for a, b in zip(u.tolist(), i.tolist())]
    return build_dataset(raw)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
