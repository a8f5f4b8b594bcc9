"""Interaction data ingestion and the bipartite propagation operators."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DatasetError",
    "GraphError",
    "OperatorKind",
    "InteractionDataset",
    "InteractionGraph",
    "load_dataset",
    "build_graph",
    "spmm",
    "save_graph_cache",
    "load_graph_cache",
    "save_dataset_index",
    "load_cached",
]

GRAPH_MAGIC = b"LTG1"


class DatasetError(ValueError):
    """Raised for unreadable or malformed interaction files."""


class GraphError(ValueError):
    """Raised when a propagation operator cannot be built or applied."""


class OperatorKind(str, enum.Enum):
    ADJACENCY = "normalized-adjacency"
    LAPLACIAN = "normalized-laplacian"

    @classmethod
    def parse(cls, value: "str | OperatorKind") -> "OperatorKind":
        if isinstance(value, OperatorKind):
            return value
        aliases = {"adj": cls.ADJACENCY, "laplacian": cls.LAPLACIAN}
        if value in aliases:
            return aliases[value]
        return cls(value)


@dataclass
class InteractionDataset:
    num_users: int
    num_items: int
    # (E, 2) int64 array of unique (user, item) pairs, sorted
    train_edges: np.ndarray
    test_edges_by_user: dict[int, set[int]] = field(default_factory=dict)

    def __post_init__(self):
        edges = np.asarray(self.train_edges, dtype=np.int64).reshape(-1, 2)
        self.train_edges = edges
        if edges.size:
            if edges[:, 0].min() < 0 or edges[:, 0].max() >= self.num_users:
                raise DatasetError("user index out of range in train_edges")
            if edges[:, 1].min() < 0 or edges[:, 1].max() >= self.num_items:
                raise DatasetError("item index out of range in train_edges")
            if len(np.unique(edges[:, 0] * self.num_items + edges[:, 1])) != len(edges):
                raise DatasetError("duplicate edge in train_edges")

    @property
    def num_train(self) -> int:
        return len(self.train_edges)

    def train_items_by_user(self) -> list[np.ndarray]:
        """Sorted training item indices for every user (empty arrays for isolated users)."""
        order = np.lexsort((self.train_edges[:, 1], self.train_edges[:, 0]))
        edges = self.train_edges[order]
        bounds = np.searchsorted(edges[:, 0], np.arange(self.num_users + 1))
        return [edges[bounds[u]:bounds[u + 1], 1] for u in range(self.num_users)]

    def test_users(self) -> list[int]:
        return sorted(u for u, items in self.test_edges_by_user.items() if items)


def _parse_interactions(path: Path) -> list[tuple[int, list[int]]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        try:
            ids = [int(tok, 10) for tok in tokens]
        except ValueError:
            raise DatasetError(f"{path}: line {lineno}: malformed token in {line!r}") from None
        if min(ids) < 0:
            raise DatasetError(f"{path}: line {lineno}: negative id")
        rows.append((ids[0], ids[1:]))
    return rows


def load_dataset(train_path, test_path) -> InteractionDataset:
    """Read ``train.txt``/``test.txt`` style files.

    Each line is ``user item item ...``. Counts are taken over both files,
    so a user or item that only appears in the test file still gets an
    index (with an all-zero row in the propagation operator).
    """
    train_rows = _parse_interactions(train_path)
    test_rows = _parse_interactions(test_path)
    if not train_rows:
        raise DatasetError(f"{train_path}: training file is empty")

    max_user = max(u for u, _ in train_rows + test_rows)
    max_item = max((i for _, items in train_rows + test_rows for i in items), default=-1)
    num_users, num_items = max_user + 1, max(max_item + 1, 1)

    pairs = [(u, i) for u, items in train_rows for i in items]
    edges = np.array(sorted(set(pairs)), dtype=np.int64).reshape(-1, 2)

    train_sets: dict[int, set[int]] = {}
    for u, i in edges:
        train_sets.setdefault(int(u), set()).add(int(i))
    test: dict[int, set[int]] = {}
    for u, items in test_rows:
        # test items already seen in training are not candidates under all-ranking
        kept = set(items) - train_sets.get(u, set())
        if kept:
            test.setdefault(u, set()).update(kept)
    return InteractionDataset(num_users, num_items, edges, test)


@dataclass(frozen=True)
class InteractionGraph:
    """Row-compressed propagation matrices in both directions.

    ``adj_u_from_p`` (N x M) maps item embeddings to user derivatives,
    ``adj_p_from_u`` (M x N) is its transpose. Weights are held in float32,
    the precision of the on-disk cache; products are formed in float64.
    """

    adj_u_from_p: sp.csr_matrix
    adj_p_from_u: sp.csr_matrix
    operator_kind: OperatorKind = OperatorKind.ADJACENCY

    @property
    def num_users(self) -> int:
        return self.adj_u_from_p.shape[0]

    @property
    def num_items(self) -> int:
        return self.adj_u_from_p.shape[1]

    @property
    def nnz(self) -> int:
        return self.adj_u_from_p.nnz

    def dense_operator(self) -> np.ndarray:
        """The (N+M) x (N+M) joint generator, for small-graph oracles only."""
        n, m = self.num_users, self.num_items
        op = np.zeros((n + m, n + m))
        op[:n, n:] = self.adj_u_from_p.toarray()
        op[n:, :n] = self.adj_p_from_u.toarray()
        if self.operator_kind is OperatorKind.LAPLACIAN:
            op -= np.eye(n + m)
        return op


def _csr(rows, cols, vals, shape) -> sp.csr_matrix:
    mat = sp.csr_matrix((vals.astype(np.float32), (rows, cols)), shape=shape)
    mat.sort_indices()
    return mat


def build_graph(ds: InteractionDataset, kind="normalized-adjacency") -> InteractionGraph:
    kind = OperatorKind.parse(kind)
    edges = ds.train_edges
    if len(edges) == 0:
        raise GraphError("graph has no training edges")
    users, items = edges[:, 0], edges[:, 1]
    deg_u = np.bincount(users, minlength=ds.num_users).astype(np.float64)
    deg_i = np.bincount(items, minlength=ds.num_items).astype(np.float64)
    weights = 1.0 / np.sqrt(deg_u[users] * deg_i[items])
    forward = _csr(users, items, weights, (ds.num_users, ds.num_items))
    backward = _csr(items, users, weights, (ds.num_items, ds.num_users))
    return InteractionGraph(forward, backward, kind)


def spmm(adj: sp.spmatrix, dense: np.ndarray) -> np.ndarray:
    """Sparse-times-dense product in float64."""
    dense = np.asarray(dense)
    if dense.ndim == 1:
        dense = dense[:, None]
    if adj.shape[1] != dense.shape[0]:
        raise GraphError(f"spmm dimension mismatch: {adj.shape} x {dense.shape}")
    return np.asarray(adj @ dense.astype(np.float64, copy=False))


def save_graph_cache(graph: InteractionGraph, path) -> None:
    """Write the ``LTG1`` cache: header then the user-side CSR arrays.

    The item-side matrix is the transpose and is rebuilt on load.
    """
    adj = graph.adj_u_from_p
    n, m = adj.shape
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(struct.pack("<QQQ", n, m, adj.nnz))
        fh.write(adj.indptr.astype("<u8").tobytes())
        fh.write(adj.indices.astype("<u4").tobytes())
        fh.write(adj.data.astype("<f4").tobytes())


def load_graph_cache(path, kind="normalized-adjacency") -> InteractionGraph:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != GRAPH_MAGIC:
        raise DatasetError(f"{path}: bad magic {raw[:4]!r}, expected {GRAPH_MAGIC!r}")
    if len(raw) < 28:
        raise DatasetError(f"{path}: truncated header")
    n, m, nnz = struct.unpack_from("<QQQ", raw, 4)
    offset = 28
    sizes = [(n + 1) * 8, nnz * 4, nnz * 4]
    if len(raw) != offset + sum(sizes):
        raise DatasetError(f"{path}: size {len(raw)} does not match header (N={n}, M={m}, nnz={nnz})")
    indptr = np.frombuffer(raw, "<u8", n + 1, offset).astype(np.int64)
    offset += sizes[0]
    indices = np.frombuffer(raw, "<u4", nnz, offset).astype(np.int32)
    offset += sizes[1]
    data = np.frombuffer(raw, "<f4", nnz, offset).astype(np.float32)
    forward = sp.csr_matrix((data, indices, indptr), shape=(n, m))
    backward = forward.T.tocsr()
    backward.sort_indices()
    return InteractionGraph(forward, backward, OperatorKind.parse(kind))


def index_path(cache_path) -> Path:
    return Path(str(cache_path) + ".index.json")


def save_dataset_index(ds: InteractionDataset, cache_path) -> Path:
    """Sidecar JSON with counts and test sets; training edges live in the cache."""
    path = index_path(cache_path)
    payload = {
        "num_users": ds.num_users,
        "num_items": ds.num_items,
        "num_train": ds.num_train,
        "test": {str(u): sorted(items) for u, items in sorted(ds.test_edges_by_user.items())},
    }
    path.write_text(json.dumps(payload, separators=(",", ":")), encoding="utf-8")
    return path


def load_cached(cache_path, kind="normalized-adjacency") -> tuple[InteractionDataset, InteractionGraph]:
    """Dataset and graph from a cache written by :func:`save_graph_cache` plus its index."""
    graph = load_graph_cache(cache_path, kind)
    try:
        payload = json.loads(index_path(cache_path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read dataset index {index_path(cache_path)}: {exc}") from exc
    if (payload["num_users"], payload["num_items"]) != (graph.num_users, graph.num_items):
        raise DatasetError(f"index {index_path(cache_path)} disagrees with cache {cache_path} on N/M")
    coo = graph.adj_u_from_p.tocoo()
    edges = np.stack([coo.row, coo.col], axis=1).astype(np.int64)
    test = {int(u): set(items) for u, items in payload["test"].items()}
    return InteractionDataset(graph.num_users, graph.num_items, edges, test), graph
