"""Node updating sequences: confidence-driven plus BFS/DFS alternatives.

The confidence-driven scheme (the default) ranks foreground-assigned
nodes by the confidence of their assigned label, highest first; ties
break toward the smaller centroid x, then smaller y, then smaller id.
Background-assigned nodes follow, ranked by their best foreground
confidence with the same tie-break, so that every node is updated once
per pass.  BFS and DFS expand from the same starting node and differ
only in traversal discipline and child ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import NodeGraph
from .numerics import atomic_write_text
from .superpixel import SuperpixelMap

SCHEMES = ("cds", "bfs-location", "bfs-confidence",
           "dfs-location", "dfs-confidence")


@dataclass
class ConfidenceMap:
    """Per-node label scores (rows post-softmax) with a designated
    background label."""

    scores: np.ndarray        # (R, L)
    background: int = 0

    @property
    def node_count(self) -> int:
        return self.scores.shape[0]

    def assigned(self) -> np.ndarray:
        """Per-node argmax label; ties go to the smaller label id."""
        return np.argmax(self.scores, axis=1)

    def assigned_conf(self) -> np.ndarray:
        return self.scores[np.arange(self.node_count), self.assigned()]

    def max_foreground_conf(self) -> np.ndarray:
        fg = np.ones(self.scores.shape[1], dtype=bool)
        fg[self.background] = False
        return self.scores[:, fg].max(axis=1)

    def validate(self) -> None:
        if self.scores.min() < 0:
            raise ValueError("confidences must be non-negative")
        sums = self.scores.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-9:
            raise ValueError("confidence rows must sum to 1")


@dataclass
class UpdateSchedule:
    """A permutation of node ids plus the scheme that produced it."""

    order: np.ndarray
    scheme: str

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)

    def is_permutation_of(self, n: int) -> bool:
        return self.order.size == n and \
            np.array_equal(np.sort(self.order), np.arange(n))

    def to_text(self) -> str:
        return "\n".join(str(i) for i in self.order) + "\n"

    @classmethod
    def from_text(cls, text: str, scheme: str = "cds") -> "UpdateSchedule":
        ids = [int(t) for t in text.split()]
        return cls(order=np.array(ids, dtype=np.int64), scheme=scheme)


def write_schedule(path: str, sched: UpdateSchedule) -> None:
    atomic_write_text(path, sched.to_text())


def node_confidences(pixel_conf: np.ndarray, sp: SuperpixelMap,
                     background: int = 0) -> ConfidenceMap:
    """Average member-pixel score rows into per-node rows.

    ``pixel_conf`` is (H*W, L) in row-major pixel order (an (H, W, L)
    field is accepted and flattened); each row must sum to 1.
    """
    conf = np.asarray(pixel_conf, dtype=np.float64)
    if conf.ndim == 3:
        conf = conf.reshape(-1, conf.shape[-1])
    n = sp.width * sp.height
    if conf.ndim != 2 or conf.shape[0] != n:
        raise ValueError(f"pixel confidences {conf.shape} do not match "
                         f"{sp.height}x{sp.width} pixels")
    if np.abs(conf.sum(axis=1) - 1.0).max() > 1e-9:
        raise ValueError("pixel confidence rows must sum to 1")
    seg = sp.labels.ravel()
    counts = np.bincount(seg, minlength=sp.region_count)
    rows = np.empty((sp.region_count, conf.shape[1]))
    for j in range(conf.shape[1]):
        rows[:, j] = np.bincount(seg, weights=conf[:, j],
                                 minlength=sp.region_count)
    rows /= counts[:, None]
    return ConfidenceMap(scores=rows, background=background)


def _spatial_key(g: NodeGraph):
    cx, cy = g.centroids[:, 0], g.centroids[:, 1]
    return lambda i: (cx[i], cy[i], i)


def _conf_key(g: NodeGraph, cm: ConfidenceMap):
    maxfg = cm.max_foreground_conf()
    cx, cy = g.centroids[:, 0], g.centroids[:, 1]
    return lambda i: (-maxfg[i], cx[i], cy[i], i)


def cds_order(cm: ConfidenceMap, g: NodeGraph,
              by_label: int | None = None) -> UpdateSchedule:
    """Confidence-driven order: foreground block (assigned-label
    confidence descending), then background block (max foreground
    confidence descending); spatial-left/top/id tie-breaks throughout.

    ``by_label`` switches to ranking every node by that single label's
    confidence instead (the per-label variant), with the same
    tie-breaks and no foreground/background split.
    """
    if cm.node_count != g.node_count:
        raise ValueError("confidence map and graph disagree on node count")
    cx, cy = g.centroids[:, 0], g.centroids[:, 1]
    if by_label is not None:
        conf = cm.scores[:, by_label]
        order = sorted(range(g.node_count),
                       key=lambda i: (-conf[i], cx[i], cy[i], i))
        return UpdateSchedule(order=np.array(order), scheme="cds")

    assigned = cm.assigned()
    aconf = cm.assigned_conf()
    maxfg = cm.max_foreground_conf()
    fg = [i for i in range(g.node_count) if assigned[i] != cm.background]
    bg = [i for i in range(g.node_count) if assigned[i] == cm.background]
    fg.sort(key=lambda i: (-aconf[i], cx[i], cy[i], i))
    bg.sort(key=lambda i: (-maxfg[i], cx[i], cy[i], i))
    return UpdateSchedule(order=np.array(fg + bg, dtype=np.int64),
                          scheme="cds")


def cds_start(cm: ConfidenceMap, g: NodeGraph) -> int:
    """The starting node: head of the confidence-driven order."""
    return int(cds_order(cm, g).order[0])


def _child_key(g: NodeGraph, cm: ConfidenceMap, child_rule: str):
    if child_rule == "location":
        return _spatial_key(g)
    if child_rule == "confidence":
        return _conf_key(g, cm)
    raise ValueError(f"unknown child rule {child_rule!r}")


def bfs_order(g: NodeGraph, child_rule: str, cm: ConfidenceMap,
              start: int | None = None) -> UpdateSchedule:
    """Breadth-first order from the starting node; unvisited children of
    each frontier node are expanded best-first under the child rule.
    Any disconnected remainder restarts at the best remaining node."""
    r = g.node_count
    if start is None:
        start = cds_start(cm, g)
    if not 0 <= start < r:
        raise ValueError(f"start node {start} out of range [0, {r})")
    key = _child_key(g, cm, child_rule)
    seen = np.zeros(r, dtype=bool)
    order: list[int] = []
    queue: list[int] = []
    root = start
    while True:
        seen[root] = True
        order.append(root)
        queue.append(root)
        head = 0
        while head < len(queue):
            u = queue[head]
            head += 1
            for j in sorted((x for x in g.adjacency[u] if not seen[x]), key=key):
                seen[j] = True
                order.append(j)
                queue.append(j)
        if len(order) == r:
            break
        queue = []
        root = min((i for i in range(r) if not seen[i]), key=key)
    return UpdateSchedule(order=np.array(order, dtype=np.int64),
                          scheme=f"bfs-{child_rule}")


def dfs_order(g: NodeGraph, child_rule: str, cm: ConfidenceMap,
              start: int | None = None) -> UpdateSchedule:
    """Depth-first analogue of ``bfs_order`` (preorder, children visited
    best-first under the child rule)."""
    r = g.node_count
    if start is None:
        start = cds_start(cm, g)
    if not 0 <= start < r:
        raise ValueError(f"start node {start} out of range [0, {r})")
    key = _child_key(g, cm, child_rule)
    seen = np.zeros(r, dtype=bool)
    order: list[int] = []
    root = start
    while True:
        seen[root] = True
        order.append(root)
        stack = [iter(sorted(g.adjacency[root], key=key))]
        while stack:
            advanced = False
            for j in stack[-1]:
                if not seen[j]:
                    seen[j] = True
                    order.append(j)
                    stack.append(iter(sorted(g.adjacency[j], key=key)))
                    advanced = True
                    break
            if not advanced:
                stack.pop()
        if len(order) == r:
            break
        root = min((i for i in range(r) if not seen[i]), key=key)
    return UpdateSchedule(order=np.array(order, dtype=np.int64),
                          scheme=f"dfs-{child_rule}")


def make_schedule(scheme: str, cm: ConfidenceMap, g: NodeGraph,
                  cds_label: int | None = None) -> UpdateSchedule:
    if scheme == "cds":
        return cds_order(cm, g, by_label=cds_label)
    if scheme.startswith("bfs-"):
        return bfs_order(g, scheme[4:], cm)
    if scheme.startswith("dfs-"):
        return dfs_order(g, scheme[4:], cm)
    raise ValueError(f"unknown scheduler {scheme!r}; choose from {SCHEMES}")
