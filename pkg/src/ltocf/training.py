"""BPR training of initial embeddings and learnable read-out times."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .graph import InteractionDataset, InteractionGraph
from .model import ModelParams, TimeGrid, layer_combination
from .solvers import (
    Dynamics,
    SolverConfig,
    SolverDivergence,
    Trajectory,
    _stack,
    integrate_grid,
    segment_time_tangent,
    segment_vjp,
)

__all__ = [
    "TrainConfig",
    "BprBatch",
    "GradientBundle",
    "BatchSampler",
    "TrainingDiverged",
    "sample_batch",
    "bpr_loss",
    "bpr_loss_and_grad",
    "backward",
    "time_gradient",
    "time_gradient_continuous",
    "apply_time_update",
    "Adam",
    "TrainResult",
    "embedding_step",
    "time_step",
    "train",
    "write_curves",
]

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    lam: float = 1e-4
    lr_embed: float = 1e-4
    lr_time: float = 1e-6
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 10
    seed: int = 2021
    time_margin: float = 1e-3
    eval_every: int = 10
    topk: int = 20
    # one batch per epoch holding every training edge once
    full_batch: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not (self.lr_embed >= 0 and self.lr_time >= 0):
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_epochs < 1 or self.patience < 1 or self.eval_every < 1:
            raise ValueError("max_epochs, patience and eval_every must be positive")
        if not self.time_margin > 0:
            raise ValueError("time_margin must be positive")
        if self.lr_time > self.lr_embed:
            warnings.warn(f"lr_time ({self.lr_time}) exceeds lr_embed ({self.lr_embed})", stacklevel=2)


@dataclass
class BprBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return len(self.users)


@dataclass
class GradientBundle:
    d_e_u0: np.ndarray
    d_e_p0: np.ndarray
    d_t: np.ndarray
    loss_value: float


# -- sampling ------------------------------------------------------------------


class BatchSampler:
    """Uniform BPR triples: user with replacement, positive from its items,
    negative by rejection from the remaining items."""

    def __init__(self, ds: InteractionDataset):
        self.num_items = ds.num_items
        self.items_by_user = ds.train_items_by_user()
        counts = np.array([len(items) for items in self.items_by_user])
        self.eligible = np.flatnonzero((counts >= 1) & (counts < ds.num_items))
        if len(self.eligible) == 0:
            raise ValueError("no user has both a training item and a non-interacted item")
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.flat_items = np.concatenate(self.items_by_user) if counts.sum() else np.zeros(0, np.int64)
        self.counts = counts
        self.keys = np.sort(np.repeat(np.arange(len(counts)), counts) * ds.num_items + self.flat_items)

    def _is_positive(self, users, items):
        keys = users * self.num_items + items
        idx = np.searchsorted(self.keys, keys)
        idx = np.minimum(idx, len(self.keys) - 1)
        return self.keys[idx] == keys

    def sample(self, batch_size: int, rng: np.random.Generator) -> BprBatch:
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        users = self.eligible[rng.integers(len(self.eligible), size=batch_size)]
        picks = (rng.random(batch_size) * self.counts[users]).astype(np.int64)
        pos = self.flat_items[self.offsets[users] + picks]
        neg = rng.integers(self.num_items, size=batch_size)
        bad = self._is_positive(users, neg)
        while bad.any():
            neg[bad] = rng.integers(self.num_items, size=int(bad.sum()))
            bad[bad] = self._is_positive(users[bad], neg[bad])
        return BprBatch(users, pos, neg)

    def full(self, rng: np.random.Generator) -> BprBatch:
        """Every training edge of an eligible user once, each with a fresh negative."""
        users = np.repeat(np.arange(len(self.counts)), self.counts)
        pos = self.flat_items
        keep = np.isin(users, self.eligible)
        users, pos = users[keep], pos[keep]
        neg = rng.integers(self.num_items, size=len(users))
        bad = self._is_positive(users, neg)
        while bad.any():
            neg[bad] = rng.integers(self.num_items, size=int(bad.sum()))
            bad[bad] = self._is_positive(users[bad], neg[bad])
        return BprBatch(users, pos, neg)


def sample_batch(ds: InteractionDataset, batch_size: int, rng: np.random.Generator) -> BprBatch:
    return BatchSampler(ds).sample(batch_size, rng)


# -- loss ----------------------------------------------------------------------


def _regularizer(params: ModelParams, batch: BprBatch) -> float:
    sq = (
        np.sum(params.e_u0[batch.users] ** 2, axis=1)
        + np.sum(params.e_p0[batch.pos] ** 2, axis=1)
        + np.sum(params.e_p0[batch.neg] ** 2, axis=1)
    )
    return float(np.mean(sq))


def bpr_loss(final_users, final_items, batch: BprBatch, params: ModelParams, lam: float) -> float:
    """Mean softplus(r_uj - r_ui) plus lambda times the mean squared norm of
    the participants' initial embeddings."""
    u = final_users[batch.users]
    diff = np.sum(u * final_items[batch.neg], axis=1) - np.sum(u * final_items[batch.pos], axis=1)
    return float(np.mean(np.logaddexp(0.0, diff))) + lam * _regularizer(params, batch)


def bpr_loss_and_grad(final_users, final_items, batch: BprBatch, params: ModelParams, lam: float):
    """Loss, its gradient w.r.t. the final embeddings, and the regularizer
    gradient w.r.t. the initial embeddings."""
    b = len(batch)
    u = final_users[batch.users]
    ip, ineg = final_items[batch.pos], final_items[batch.neg]
    diff = np.sum(u * ineg, axis=1) - np.sum(u * ip, axis=1)
    loss = float(np.mean(np.logaddexp(0.0, diff))) + lam * _regularizer(params, batch)

    sig = (0.5 * (1.0 + np.tanh(0.5 * diff)) / b)[:, None]
    g_users = np.zeros_like(final_users)
    g_items = np.zeros_like(final_items)
    np.add.at(g_users, batch.users, sig * (ineg - ip))
    np.add.at(g_items, batch.pos, -sig * u)
    np.add.at(g_items, batch.neg, sig * u)

    r_users = np.zeros_like(params.e_u0)
    r_items = np.zeros_like(params.e_p0)
    if lam:
        scale = 2.0 * lam / b
        np.add.at(r_users, batch.users, scale * params.e_u0[batch.users])
        np.add.at(r_items, batch.pos, scale * params.e_p0[batch.pos])
        np.add.at(r_items, batch.neg, scale * params.e_p0[batch.neg])
    return loss, (g_users, g_items), (r_users, r_items)


# -- gradients -------------------------------------------------------------------


def _snapshot_cotangents(grid: TimeGrid, g_users, g_items):
    g = np.concatenate([g_users, g_items])
    return [w * g for w in grid.weights], g


def time_gradient(graph: InteractionGraph, trajectory: Trajectory, grid: TimeGrid, g_users, g_items,
                  dynamics: Dynamics | None = None) -> np.ndarray:
    """dL/dt_i through the layer combination only.

    The derivative of each interior snapshot with respect to its time point
    is taken through the solver as actually discretized, then contracted
    (Frobenius inner product) with that snapshot's share of the loss
    gradient. Downstream segments are held fixed.
    """
    if not trajectory.segments:
        raise ValueError("trajectory has no recorded step plan; rerun integrate_grid")
    F = dynamics or Dynamics(graph)
    g = np.concatenate([g_users, g_items])
    d_t = np.zeros(grid.count)
    for i in range(1, grid.count + 1):
        tape = trajectory.segments[i - 1]
        tangent = segment_time_tangent(F, tape, _stack(trajectory.snapshots[i - 1]))
        d_t[i - 1] = grid.weights[i] * float(np.vdot(g, tangent))
    return d_t


def time_gradient_continuous(graph: InteractionGraph, trajectory: Trajectory, grid: TimeGrid,
                             g_users, g_items) -> np.ndarray:
    """Continuous-time form: <a_u, du/dt> + <a_p, dp/dt> at each interior point.

    Agrees with :func:`time_gradient` as the step size goes to zero.
    """
    F = Dynamics(graph)
    g = np.concatenate([g_users, g_items])
    d_t = np.zeros(grid.count)
    for i in range(1, grid.count + 1):
        z = _stack(trajectory.snapshots[i])
        if not trajectory.residual:
            # the snapshot is an increment; the flow itself sits at start + increment
            z = z + _stack(trajectory.snapshots[i - 1])
        d_t[i - 1] = grid.weights[i] * float(np.vdot(g, F(z)))
    return d_t


def backward(graph: InteractionGraph, params: ModelParams, cfg: SolverConfig, batch: BprBatch,
             trajectory: Trajectory, lam: float = 0.0, with_time: bool = True) -> GradientBundle:
    """Exact reverse-mode gradients of the batch BPR loss.

    Embedding gradients run back through the layer combination and every
    recorded solver step. Time gradients use the layer-combination path only.
    """
    if trajectory is None or not trajectory.segments:
        raise ValueError("trajectory has no recorded step plan; rerun integrate_grid")
    grid = params.grid
    final_u, final_p = layer_combination(trajectory.snapshots, grid)
    loss, (g_u, g_p), (r_u, r_p) = bpr_loss_and_grad(final_u, final_p, batch, params, lam)

    F = Dynamics(graph)
    cots, _ = _snapshot_cotangents(grid, g_u, g_p)
    carry = cots[-1]
    for i in range(len(trajectory.segments) - 1, -1, -1):
        pulled = segment_vjp(F, trajectory.segments[i], carry)
        if not trajectory.residual:
            pulled = pulled - carry
        carry = cots[i] + pulled
    n = graph.num_users
    d_u, d_p = carry[:n] + r_u, carry[n:] + r_p
    d_t = time_gradient(graph, trajectory, grid, g_u, g_p, F) if with_time else np.zeros(grid.count)
    if not (np.isfinite(d_u).all() and np.isfinite(d_p).all() and np.isfinite(d_t).all()):
        raise TrainingDiverged("non-finite gradient")
    return GradientBundle(d_u, d_p, d_t, loss)


def apply_time_update(grid: TimeGrid, d_t, lr_time: float, time_margin: float) -> TimeGrid:
    """Gradient step on the interior times, projected to keep them ordered
    with at least ``time_margin`` between neighbours (and from 0 and K)."""
    t = grid.interior - lr_time * np.asarray(d_t, dtype=np.float64)
    bounds = np.concatenate([[0.0], t, [grid.terminal]])
    for i in range(1, len(bounds) - 1):
        bounds[i] = min(max(bounds[i], bounds[i - 1] + time_margin), bounds[i + 1] - time_margin)
    # a neighbour pushed past its predecessor can leave the sequential pass
    # unordered; repair with a forward/backward sweep against the fixed ends
    count = len(t)
    if count and not np.all(np.diff(bounds) > 0):
        for i in range(1, count + 1):
            bounds[i] = max(bounds[i], bounds[i - 1] + time_margin)
        for i in range(count, 0, -1):
            bounds[i] = min(bounds[i], bounds[i + 1] - time_margin)
    return grid.with_interior(bounds[1:-1])


# -- optimizer -------------------------------------------------------------------


class Adam:
    def __init__(self, shapes, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place update of ``params``."""
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- training loop -------------------------------------------------------------------


def embedding_step(graph, params: ModelParams, solver_cfg: SolverConfig, batch: BprBatch, lam: float,
                   optimizer: Adam) -> float:
    traj = integrate_grid(graph, params, solver_cfg)
    grads = backward(graph, params, solver_cfg, batch, traj, lam, with_time=False)
    optimizer.step([params.e_u0, params.e_p0], [grads.d_e_u0, grads.d_e_p0])
    return grads.loss_value


def time_step(graph, params: ModelParams, solver_cfg: SolverConfig, batch: BprBatch, lam: float,
              lr_time: float, time_margin: float) -> np.ndarray:
    """Update interior times with embeddings held fixed. Returns ``d_t``."""
    traj = integrate_grid(graph, params, solver_cfg)
    final_u, final_p = layer_combination(traj.snapshots, params.grid)
    _, (g_u, g_p), _ = bpr_loss_and_grad(final_u, final_p, batch, params, lam)
    d_t = time_gradient(graph, traj, params.grid, g_u, g_p)
    if not np.isfinite(d_t).all():
        raise TrainingDiverged("non-finite time gradient")
    params.grid = apply_time_update(params.grid, d_t, lr_time, time_margin)
    return d_t


@dataclass
class TrainResult:
    params: ModelParams  # best by recall (final params if never evaluated)
    final_params: ModelParams
    curves: list[dict] = field(default_factory=list)
    best_recall: float = float("nan")
    best_ndcg: float = float("nan")
    best_epoch: int = -1
    wall_time_train_s: float = 0.0
    wall_time_infer_s: float = 0.0


def train(ds: InteractionDataset, graph: InteractionGraph, cfg: TrainConfig, solver_cfg: SolverConfig,
          params: ModelParams, on_improve: Callable[[ModelParams, int, dict], None] | None = None,
          evaluate_fn=None) -> TrainResult:
    """Alternating training: an Adam step on the initial embeddings, then a
    plain gradient step on the interior times, per minibatch.

    ``params`` is not modified; the result carries copies. Evaluation runs
    every ``cfg.eval_every`` epochs and on the last epoch; training stops
    after ``cfg.patience`` evaluations without a recall improvement.
    """
    from .evaluation import evaluate

    evaluate_fn = evaluate_fn or evaluate
    params = params.copy()
    params.check_graph(graph)
    margin = cfg.time_margin
    if params.grid.count and margin >= float(np.min(np.diff(params.grid.times))):
        raise ValueError(f"time_margin {margin} not below the smallest initial segment")
    sampler = BatchSampler(ds)
    optimizer = Adam([params.e_u0.shape, params.e_p0.shape], cfg.lr_embed)
    batches_per_epoch = 1 if cfg.full_batch else math.ceil(ds.num_train / cfg.batch_size)
    learn_time = params.grid.learnable and cfg.lr_time > 0 and params.grid.count > 0

    result = TrainResult(params.copy(), params)
    best, stale = -math.inf, 0
    train_time = infer_time = 0.0
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        tick = time.perf_counter()
        losses = []
        for _ in range(batches_per_epoch):
            batch = sampler.full(rng) if cfg.full_batch else sampler.sample(cfg.batch_size, rng)
            try:
                loss = embedding_step(graph, params, solver_cfg, batch, cfg.lam, optimizer)
                if learn_time:
                    time_step(graph, params, solver_cfg, batch, cfg.lam, cfg.lr_time, margin)
            except SolverDivergence as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch}: loss is {loss}")
            losses.append(loss)
        train_time += time.perf_counter() - tick

        row = {"epoch": epoch, "loss": float(np.mean(losses)), "recall": None, "ndcg": None}
        row.update({f"t_{i + 1}": float(t) for i, t in enumerate(params.grid.interior)})
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            tick = time.perf_counter()
            report = evaluate_fn(params.at_checkpoint_precision(), graph, ds, solver_cfg, k=cfg.topk)
            infer_time += time.perf_counter() - tick
            row["recall"], row["ndcg"] = report.recall_at_k, report.ndcg_at_k
            log.info("epoch %d loss %.6f recall@%d %.4f ndcg@%d %.4f", epoch, row["loss"], cfg.topk,
                     report.recall_at_k, cfg.topk, report.ndcg_at_k)
            if report.recall_at_k > best:
                best, stale = report.recall_at_k, 0
                result.params = params.copy()
                result.best_recall, result.best_ndcg, result.best_epoch = report.recall_at_k, report.ndcg_at_k, epoch
                if on_improve is not None:
                    on_improve(params, epoch, row)
            else:
                stale += 1
        result.curves.append(row)
        if stale >= cfg.patience:
            log.info("early stop at epoch %d (best recall %.4f at epoch %d)", epoch, best, result.best_epoch)
            break

    result.final_params = params
    result.wall_time_train_s = train_time
    result.wall_time_infer_s = infer_time
    return result


def write_curves(curves: list[dict], path, time_count: int) -> None:
    header = ["epoch", "loss", "recall", "ndcg"] + [f"t_{i + 1}" for i in range(time_count)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in curves:
            writer.writerow(["" if row.get(key) is None else repr(row[key]) for key in header])
