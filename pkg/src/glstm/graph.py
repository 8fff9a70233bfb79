"""Undirected region-adjacency graph over superpixel nodes.

Two regions are connected exactly when some pixel of one is 4-adjacent
to a pixel of the other.  Graphs are immutable after construction and
freely shareable; only ``VisitFlags`` carries per-pass mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numerics import ParamStore, Tensor, atomic_write_text, save_params
from .superpixel import SuperpixelMap


class VisitFlags:
    """Per-node booleans q_j, monotone false->true within one layer pass."""

    __slots__ = ("visited",)

    def __init__(self, n: int):
        self.visited = np.zeros(n, dtype=bool)

    def mark(self, i: int) -> None:
        if self.visited[i]:
            raise ContractError(f"node {i} updated twice in one pass")
        self.visited[i] = True

    def all_set(self) -> bool:
        return bool(self.visited.all())


@dataclass
class NodeGraph:
    """Nodes with pooled feature vectors and sorted adjacency lists."""

    adjacency: list[tuple[int, ...]]
    centroids: np.ndarray                  # (R, 2) as (x, y)
    features: list[Tensor] | None = None

    @property
    def node_count(self) -> int:
        return len(self.adjacency)


def build_graph(sp: SuperpixelMap, features: list[Tensor]) -> NodeGraph:
    if len(features) != sp.region_count:
        raise ValueError(f"{len(features)} feature vectors for "
                         f"{sp.region_count} regions")
    lab = sp.labels
    pairs = []
    a, b = lab[:, :-1].ravel(), lab[:, 1:].ravel()
    m = a != b
    pairs.append(np.stack([a[m], b[m]], axis=1))
    a, b = lab[:-1, :].ravel(), lab[1:, :].ravel()
    m = a != b
    pairs.append(np.stack([a[m], b[m]], axis=1))
    edges = np.concatenate(pairs) if pairs else np.empty((0, 2), dtype=int)
    if edges.size:
        edges = np.unique(np.sort(edges, axis=1), axis=0)
    adjacency: list[list[int]] = [[] for _ in range(sp.region_count)]
    for i, j in edges:
        adjacency[int(i)].append(int(j))
        adjacency[int(j)].append(int(i))
    return NodeGraph(adjacency=[tuple(sorted(nb)) for nb in adjacency],
                     centroids=sp.centroids.copy(), features=list(features))


def neighbors(g: NodeGraph, i: int) -> list[int]:
    if not 0 <= i < g.node_count:
        raise ValueError(f"node id {i} out of range [0, {g.node_count})")
    return list(g.adjacency[i])


def mean_degree(g: NodeGraph) -> float:
    if g.node_count == 0:
        return 0.0
    return sum(len(nb) for nb in g.adjacency) / g.node_count


def write_edge_list(path: str, g: NodeGraph) -> None:
    """Plain-text dump: one "i j" pair per line with i < j."""
    lines = []
    for i, nb in enumerate(g.adjacency):
        lines.extend(f"{i} {j}" for j in nb if i < j)
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_edge_list(path: str, node_count: int) -> list[tuple[int, ...]]:
    adjacency: list[set[int]] = [set() for _ in range(node_count)]
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            i, j = (int(t) for t in line.split())
            adjacency[i].add(j)
            adjacency[j].add(i)
    return [tuple(sorted(nb)) for nb in adjacency]


def save_node_features(path: str, g: NodeGraph) -> None:
    """Node features in the parameter-container format, one entry per node."""
    store = ParamStore()
    for i, f in enumerate(g.features or []):
        store.add(f"node{i:05d}", f.data)
    save_params(path, store)
