"""Embeddings, ODE right-hand sides, the learnable time grid and readout."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import InteractionGraph, OperatorKind, GraphError, spmm

__all__ = [
    "DEFAULT_DIM",
    "EmbeddingState",
    "TimeGrid",
    "ModelParams",
    "CheckpointError",
    "init_embeddings",
    "derivative_u",
    "derivative_p",
    "joint_derivative",
    "joint_derivative_transpose",
    "layer_combination",
    "score",
    "score_matrix",
    "lightgcn_forward",
    "save_checkpoint",
    "load_checkpoint",
]

DEFAULT_DIM = 64
CHECKPOINT_MAGIC = b"LTC1"


@dataclass
class EmbeddingState:
    users: np.ndarray
    items: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        if self.users.ndim != 2 or self.items.ndim != 2 or self.users.shape[1] != self.items.shape[1]:
            raise ValueError(
                f"user/item embeddings must be 2-D with a shared width, got {self.users.shape} and {self.items.shape}"
            )
        if self.time < 0:
            raise ValueError(f"negative time {self.time}")

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.users).all() and np.isfinite(self.items).all())


@dataclass
class TimeGrid:
    """Terminal time, interior read-out points and combination weights.

    ``weights`` has ``T + 2`` entries: one for time 0, one per interior
    point and one for the terminal time.
    """

    terminal: float
    interior: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: np.ndarray | None = None
    learnable: bool = True

    def __post_init__(self):
        self.interior = np.asarray(self.interior, dtype=np.float64).reshape(-1)
        if self.weights is None:
            count = len(self.interior) + 2
            self.weights = np.full(count, 1.0 / count)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.validate()

    @classmethod
    def uniform(cls, terminal: float, count: int, learnable: bool = True, weights=None) -> "TimeGrid":
        """Interior points at ``terminal / (count + 1) * i``."""
        interior = terminal / (count + 1) * np.arange(1, count + 1)
        return cls(float(terminal), interior, weights, learnable)

    @property
    def count(self) -> int:
        return len(self.interior)

    @property
    def times(self) -> np.ndarray:
        return np.concatenate([[0.0], self.interior, [self.terminal]])

    def validate(self) -> None:
        if not self.terminal > 0:
            raise ValueError(f"terminal time must be positive, got {self.terminal}")
        if len(self.weights) != self.count + 2:
            raise ValueError(f"expected {self.count + 2} combination weights, got {len(self.weights)}")
        if not np.all(np.diff(self.times) > 0):
            raise ValueError(f"time points not strictly increasing in (0, K): {self.times.tolist()}")

    def with_interior(self, interior) -> "TimeGrid":
        return replace(self, interior=np.array(interior, dtype=np.float64), weights=self.weights.copy())


@dataclass
class ModelParams:
    e_u0: np.ndarray
    e_p0: np.ndarray
    grid: TimeGrid

    @property
    def dim(self) -> int:
        return self.e_u0.shape[1]

    def copy(self) -> "ModelParams":
        grid = replace(self.grid, interior=self.grid.interior.copy(), weights=self.grid.weights.copy())
        return ModelParams(self.e_u0.copy(), self.e_p0.copy(), grid)

    def at_checkpoint_precision(self) -> "ModelParams":
        """Copy with embeddings rounded to float32, as written by :func:`save_checkpoint`."""
        out = self.copy()
        out.e_u0 = out.e_u0.astype(np.float32).astype(np.float64)
        out.e_p0 = out.e_p0.astype(np.float32).astype(np.float64)
        return out

    def check_graph(self, graph: InteractionGraph) -> None:
        if self.e_u0.shape[0] != graph.num_users or self.e_p0.shape[0] != graph.num_items:
            raise GraphError(
                f"embedding shapes {self.e_u0.shape}/{self.e_p0.shape} do not match "
                f"graph with {graph.num_users} users and {graph.num_items} items"
            )


def init_embeddings(num_users: int, num_items: int, dim: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw initial embeddings from N(0, 0.1^2)."""
    if min(num_users, num_items, dim) < 1:
        raise ValueError(f"N, M and D must be positive, got {num_users}, {num_items}, {dim}")
    rng = np.random.default_rng(seed)
    e_u0 = rng.normal(0.0, 0.1, size=(num_users, dim))
    e_p0 = rng.normal(0.0, 0.1, size=(num_items, dim))
    return e_u0, e_p0


def derivative_u(graph: InteractionGraph, p: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
    """du/dt given the item state (``f`` in the co-evolving system).

    The laplacian kind also needs the current user state ``u``.
    """
    out = spmm(graph.adj_u_from_p, p)
    if graph.operator_kind is OperatorKind.LAPLACIAN:
        if u is None:
            raise GraphError("laplacian operator needs the user state")
        out -= u
    return out


def derivative_p(graph: InteractionGraph, u: np.ndarray, p: np.ndarray | None = None) -> np.ndarray:
    """dp/dt given the user state (``g`` in the co-evolving system)."""
    out = spmm(graph.adj_p_from_u, u)
    if graph.operator_kind is OperatorKind.LAPLACIAN:
        if p is None:
            raise GraphError("laplacian operator needs the item state")
        out -= p
    return out


def joint_derivative(graph: InteractionGraph, u: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(du/dt, dp/dt) of the joint state.

    For the adjacency kind this is ``(A p, A^T u)``; the laplacian kind
    subtracts the state itself, giving heat flow with ``I - A`` as the
    graph Laplacian.
    """
    du = spmm(graph.adj_u_from_p, p)
    dp = spmm(graph.adj_p_from_u, u)
    if graph.operator_kind is OperatorKind.LAPLACIAN:
        du -= u
        dp -= p
    return du, dp


def joint_derivative_transpose(graph: InteractionGraph, cu: np.ndarray, cp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of :func:`joint_derivative`."""
    gu = spmm(graph.adj_p_from_u.T, cp)
    gp = spmm(graph.adj_u_from_p.T, cu)
    if graph.operator_kind is OperatorKind.LAPLACIAN:
        gu -= cu
        gp -= cp
    return gu, gp


def layer_combination(states: Sequence[EmbeddingState], grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    if len(states) != grid.count + 2:
        raise ValueError(f"expected {grid.count + 2} states for the grid, got {len(states)}")
    times = [s.time for s in states]
    if not np.allclose(times, grid.times, rtol=0, atol=1e-12):
        raise ValueError(f"state times {times} do not match grid times {grid.times.tolist()}")
    users = sum(w * s.users for w, s in zip(grid.weights, states))
    items = sum(w * s.items for w, s in zip(grid.weights, states))
    return users, items


def score(final_users: np.ndarray, final_items: np.ndarray, user: int, item: int) -> float:
    if not (0 <= user < final_users.shape[0]):
        raise IndexError(f"user index {user} out of range [0, {final_users.shape[0]})")
    if not (0 <= item < final_items.shape[0]):
        raise IndexError(f"item index {item} out of range [0, {final_items.shape[0]})")
    return float(final_users[user] @ final_items[item])


def score_matrix(final_users: np.ndarray, final_items: np.ndarray, users=None) -> np.ndarray:
    """Dense scores for a block of users (all users when ``users`` is None)."""
    rows = final_users if users is None else final_users[np.asarray(users)]
    return rows @ final_items.T


def lightgcn_forward(graph: InteractionGraph, e_u0: np.ndarray, e_p0: np.ndarray, layers: int):
    """Discrete linear propagation with uniform layer combination.

    Used as an independent reference for the Euler/no-residual setting of
    the ODE model.
    """
    if layers < 1:
        raise ValueError("layer count must be >= 1")
    u, p = np.asarray(e_u0, dtype=np.float64), np.asarray(e_p0, dtype=np.float64)
    acc_u, acc_p = u.copy(), p.copy()
    for _ in range(layers):
        u, p = spmm(graph.adj_u_from_p, p), spmm(graph.adj_p_from_u, u)
        acc_u += u
        acc_p += p
    return acc_u / (layers + 1), acc_p / (layers + 1)


def save_checkpoint(params: ModelParams, path) -> None:
    """Write the ``LTC1`` binary checkpoint."""
    n, d = params.e_u0.shape
    m = params.e_p0.shape[0]
    grid = params.grid
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<QQQQ", n, m, d, grid.count))
        fh.write(struct.pack("<d", grid.terminal))
        fh.write(grid.interior.astype("<f8").tobytes())
        fh.write(grid.weights.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(params.e_u0, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(params.e_p0, dtype="<f4").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, learnable: bool = True) -> ModelParams:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(raw) < 44:
        raise CheckpointError(f"{path}: truncated header")
    n, m, d, t = struct.unpack_from("<QQQQ", raw, 4)
    (terminal,) = struct.unpack_from("<d", raw, 36)
    expected = 44 + 8 * t + 8 * (t + 2) + 4 * d * (n + m)
    if len(raw) != expected:
        raise CheckpointError(f"{path}: size {len(raw)} does not match header (expected {expected})")
    off = 44
    interior = np.frombuffer(raw, "<f8", t, off).astype(np.float64)
    off += 8 * t
    weights = np.frombuffer(raw, "<f8", t + 2, off).astype(np.float64)
    off += 8 * (t + 2)
    e_u0 = np.frombuffer(raw, "<f4", n * d, off).reshape(n, d).astype(np.float64)
    off += 4 * n * d
    e_p0 = np.frombuffer(raw, "<f4", m * d, off).reshape(m, d).astype(np.float64)
    return ModelParams(e_u0, e_p0, TimeGrid(terminal, interior, weights, learnable))
