import numpy as np
import pytest

from ltocf.graph import InteractionDataset, build_graph


def random_dataset(num_users, num_items, density=0.3, seed=0, test=None):
    rng = np.random.default_rng(seed)
    mask = rng.random((num_users, num_items)) < density
    mask[0, 0] = True
    return InteractionDataset(num_users, num_items, np.argwhere(mask), test or {})


def random_graph(num_users, num_items, density=0.3, seed=0, kind="normalized-adjacency"):
    return build_graph(random_dataset(num_users, num_items, density, seed), kind)


def stacked(state):
    return np.concatenate([state.users, state.items])


@pytest.fixture
def toy_dataset():
    # 3 users x 3 items with one hold-out item per user
    edges = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 2)]
    return InteractionDataset(3, 3, np.array(edges), {0: {2}, 1: {0}, 2: {1}})


@pytest.fixture
def small_graph():
    return random_graph(5, 5, 0.5, seed=3)
