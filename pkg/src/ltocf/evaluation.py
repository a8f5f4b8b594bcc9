"""All-ranking top-K evaluation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .graph import InteractionDataset, InteractionGraph
from .model import ModelParams, layer_combination
from .solvers import SolverConfig, integrate_grid

__all__ = [
    "EvalReport",
    "rank_items",
    "recall_at_k",
    "ndcg_at_k",
    "top_k_block",
    "evaluate_embeddings",
    "evaluate",
]

USER_BLOCK = 1024


@dataclass
class EvalReport:
    recall_at_k: float
    ndcg_at_k: float
    k: int
    users_evaluated: int
    wall_time_train_s: float = 0.0
    wall_time_infer_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties broken by ascending index.

    ``scores`` is 2-D (users x items); excluded entries must already be -inf.
    """
    m = scores.shape[1]
    k = min(k, m)
    if k == 0:
        return np.zeros((scores.shape[0], 0), dtype=np.int64)
    if k < m:
        part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
        kth = np.take_along_axis(scores, part, axis=1).min(axis=1, keepdims=True)
        # everything strictly above the k-th value is in; fill ties by index
        cand_mask = scores >= kth
    else:
        cand_mask = np.ones_like(scores, dtype=bool)
    out = np.empty((scores.shape[0], k), dtype=np.int64)
    for r in range(scores.shape[0]):
        cand = np.flatnonzero(cand_mask[r])
        order = np.lexsort((cand, -scores[r, cand]))
        out[r] = cand[order[:k]]
    return out


def rank_items(final_users: np.ndarray, final_items: np.ndarray, user: int, exclude, k: int) -> list[int]:
    """Top-k candidate items for ``user`` by descending score.

    Excluded items are removed first; with fewer than ``k`` candidates all
    of them are returned in rank order.
    """
    scores = final_items @ final_users[user]
    excluded = np.fromiter(exclude, dtype=np.int64) if len(exclude) else np.zeros(0, np.int64)
    cand = np.setdiff1d(np.arange(final_items.shape[0]), excluded)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]].tolist()


def recall_at_k(ranked, test_items, k: int) -> float:
    hits = sum(1 for item in list(ranked)[:k] if item in test_items)
    return hits / len(test_items)


def _idcg(n: int) -> float:
    return sum(1.0 / math.log2(r + 2) for r in range(n))


def ndcg_at_k(ranked, test_items, k: int) -> float:
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(list(ranked)[:k]) if item in test_items)
    return dcg / _idcg(min(k, len(test_items)))


def top_k_block(final_users, final_items, users, train_items_by_user, k):
    """Ranked top-k lists for a block of users with training items masked."""
    scores = final_users[users] @ final_items.T
    for r, u in enumerate(users):
        scores[r, train_items_by_user[u]] = -np.inf
    ranked = _top_k(scores, k)
    # a user whose candidates run out would otherwise get masked items
    for r, u in enumerate(users):
        masked = len(train_items_by_user[u])
        if final_items.shape[0] - masked < ranked.shape[1]:
            ranked_row = [i for i in ranked[r] if np.isfinite(scores[r, i])]
            ranked[r, : len(ranked_row)] = ranked_row
            ranked[r, len(ranked_row):] = -1
    return ranked


def evaluate_embeddings(final_users, final_items, ds: InteractionDataset, k: int = 20,
                        block: int = USER_BLOCK) -> EvalReport:
    """Mean Recall@k and NDCG@k over users with a non-empty test set."""
    users = np.array(ds.test_users(), dtype=np.int64)
    if len(users) == 0:
        raise ValueError("no users with test items to evaluate")
    train_items = ds.train_items_by_user()
    recall_sum = ndcg_sum = 0.0
    for start in range(0, len(users), block):
        chunk = users[start:start + block]
        ranked = top_k_block(final_users, final_items, chunk, train_items, k)
        for r, u in enumerate(chunk):
            test = ds.test_edges_by_user[int(u)]
            row = [int(i) for i in ranked[r] if i >= 0]
            recall_sum += recall_at_k(row, test, k)
            ndcg_sum += ndcg_at_k(row, test, k)
    return EvalReport(recall_sum / len(users), ndcg_sum / len(users), k, len(users))


def evaluate(params: ModelParams, graph: InteractionGraph, ds: InteractionDataset, solver_cfg: SolverConfig,
             k: int = 20) -> EvalReport:
    """Forward once, then score every test user against all items."""
    tick = time.perf_counter()
    traj = integrate_grid(graph, params, solver_cfg)
    final_u, final_p = layer_combination(traj.snapshots, params.grid)
    report = evaluate_embeddings(final_u, final_p, ds, k)
    report.wall_time_infer_s = time.perf_counter() - tick
    return report
