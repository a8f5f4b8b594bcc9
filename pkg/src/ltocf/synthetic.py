"""Small planted-preference datasets for smoke runs and tests."""

from __future__ import annotations

import numpy as np

from .graph import InteractionDataset

__all__ = ["planted_dataset", "write_dataset"]


def planted_dataset(num_users: int = 50, num_items: int = 50, clusters: int = 5, p_in: float = 0.6,
                    p_out: float = 0.02, test_fraction: float = 0.2, seed: int = 0) -> InteractionDataset:
    """Users and items split into ``clusters`` groups; a user interacts with
    items of its own group with probability ``p_in`` and with any other item
    with probability ``p_out``. Each user's interactions are split at random
    into train/test, keeping at least one training item."""
    rng = np.random.default_rng(seed)
    user_group = np.arange(num_users) % clusters
    item_group = np.arange(num_items) % clusters
    same = user_group[:, None] == item_group[None, :]
    probs = np.where(same, p_in, p_out)
    inter = rng.random((num_users, num_items)) < probs
    train, test = [], {}
    for u in range(num_users):
        items = np.flatnonzero(inter[u])
        if len(items) == 0:
            items = np.array([rng.choice(np.flatnonzero(same[u]))])
        items = rng.permutation(items)
        n_test = int(round(test_fraction * len(items)))
        n_test = min(n_test, len(items) - 1)
        if n_test:
            test[u] = set(int(i) for i in items[:n_test])
        train.extend((u, int(i)) for i in sorted(items[n_test:]))
    return InteractionDataset(num_users, num_items, np.array(train, dtype=np.int64), test)


def write_dataset(ds: InteractionDataset, train_path, test_path) -> None:
    """Write ``train.txt``/``test.txt`` style files."""
    by_user = ds.train_items_by_user()
    with open(train_path, "w", encoding="utf-8") as fh:
        for u, items in enumerate(by_user):
            if len(items):
                fh.write(" ".join(str(x) for x in [u, *items.tolist()]) + "\n")
    with open(test_path, "w", encoding="utf-8") as fh:
        for u in sorted(ds.test_edges_by_user):
            fh.write(" ".join(str(x) for x in [u, *sorted(ds.test_edges_by_user[u])]) + "\n")
