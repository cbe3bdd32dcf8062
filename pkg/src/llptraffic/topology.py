"""Sensor graph: node identities, adjacency and neighbor queries.

The graph is the only source of "who talks to whom" — every histogram
exchange consults it. Immutable after construction, so it can be shared
freely between per-node workers.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)


class UnknownNodeError(KeyError):
    """Raised when a node id is not part of the graph."""

    def __init__(self, node_id):
        super().__init__(node_id)
        self.node_id = node_id

    def __str__(self):
        return f"unknown node id: {self.node_id!r}"


@dataclass(frozen=True)
class SensorGraph:
    """Undirected sensor graph without self-loops.

    ``adjacency`` is a square boolean matrix indexed in ``node_ids`` order.
    """

    node_ids: tuple
    adjacency: np.ndarray
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        n = len(self.node_ids)
        if adj.shape != (n, n):
            raise ValueError(
                f"adjacency shape {adj.shape} does not match {n} node ids"
            )
        if adj.diagonal().any():
            raise ValueError("adjacency must not contain self-loops")
        if not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be symmetric")
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        object.__setattr__(self, "adjacency", adj)
        adj.setflags(write=False)
        object.__setattr__(
            self, "_index", {nid: i for i, nid in enumerate(self.node_ids)}
        )

    def __len__(self):
        return len(self.node_ids)

    def index_of(self, node) -> int:
        try:
            return self._index[node]
        except KeyError:
            raise UnknownNodeError(node) from None

    def neighbors(self, node) -> list:
        """Direct neighbors of ``node`` in node-id order (never includes itself)."""
        row = self.adjacency[self.index_of(node)]
        return [self.node_ids[j] for j in np.flatnonzero(row)]

    def degree(self, node) -> int:
        return int(self.adjacency[self.index_of(node)].sum())


def from_edges(node_ids, edges) -> SensorGraph:
    """Build a graph from an iterable of (u, v) node-id pairs."""
    node_ids = tuple(node_ids)
    index = {nid: i for i, nid in enumerate(node_ids)}
    adj = np.zeros((len(node_ids), len(node_ids)), dtype=bool)
    for u, v in edges:
        if u not in index:
            raise UnknownNodeError(u)
        if v not in index:
            raise UnknownNodeError(v)
        if u == v:
            log.warning("dropping self-loop on node %r", u)
            continue
        adj[index[u], index[v]] = True
        adj[index[v], index[u]] = True
    return SensorGraph(node_ids, adj)


def from_weight_matrix(node_ids, weights, threshold: float = 0.0) -> SensorGraph:
    """Binarize a (possibly weighted, asymmetric) matrix into a SensorGraph.

    A cell strictly greater than ``threshold`` becomes an edge; the result is
    symmetrized by logical OR. Self-loops are dropped with a warning.
    """
    w = np.asarray(weights, dtype=float)
    adj = w > threshold
    adj = adj | adj.T
    if adj.diagonal().any():
        log.warning(
            "dropping %d self-loop(s) from adjacency input",
            int(adj.diagonal().sum()),
        )
        np.fill_diagonal(adj, False)
    return SensorGraph(tuple(node_ids), adj)


def load_adjacency_csv(path, threshold: float = 0.0) -> SensorGraph:
    """Load the canonical adjacency CSV (first row/column are node ids)."""
    frame = pd.read_csv(path, index_col=0)
    node_ids = tuple(str(c) for c in frame.columns)
    row_ids = tuple(str(r) for r in frame.index)
    if row_ids != node_ids:
        raise ValueError(
            f"adjacency row ids {row_ids[:5]}... do not match column ids"
        )
    return from_weight_matrix(node_ids, frame.to_numpy(dtype=float), threshold)


def save_adjacency_csv(graph: SensorGraph, path) -> None:
    frame = pd.DataFrame(
        graph.adjacency.astype(int),
        index=list(graph.node_ids),
        columns=list(graph.node_ids),
    )
    frame.to_csv(path)
