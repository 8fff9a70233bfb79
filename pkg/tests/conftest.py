"""Shared input builders for the test suite (inputs only — every test
keeps its oracle logic local and independent of library code)."""

import numpy as np
import pytest
from scipy import ndimage

from glstm.graph import NodeGraph
from glstm.imgio import Image
from glstm.schedule import ConfidenceMap


def random_graph(rng: np.random.Generator, r: int,
                 extra_edges: int | None = None) -> NodeGraph:
    """Random connected graph (random tree + extra edges) with random
    centroids; single-node graphs have no edges."""
    adjacency = [set() for _ in range(r)]
    for i in range(1, r):
        j = int(rng.integers(0, i))
        adjacency[i].add(j)
        adjacency[j].add(i)
    if extra_edges is None:
        extra_edges = r // 2
    for _ in range(extra_edges):
        i, j = (int(v) for v in rng.integers(0, r, size=2))
        if i != j:
            adjacency[i].add(j)
            adjacency[j].add(i)
    return NodeGraph(adjacency=[tuple(sorted(nb)) for nb in adjacency],
                     centroids=rng.uniform(0, 100, size=(r, 2)))


def random_confidences(rng: np.random.Generator, r: int, labels: int,
                       background: int = 0) -> ConfidenceMap:
    raw = rng.uniform(0.05, 1.0, size=(r, labels))
    return ConfidenceMap(scores=raw / raw.sum(axis=1, keepdims=True),
                         background=background)


def textured_image(rng: np.random.Generator, h: int, w: int) -> Image:
    """Smooth random blobs plus a gradient — a natural-image stand-in."""
    arr = ndimage.gaussian_filter(rng.uniform(0, 1, (h, w, 3)), (5, 5, 0))
    arr += rng.uniform(0, 1, (h, w, 3)) * np.linspace(0, 1, w)[None, :, None]
    lo, hi = arr.min(), arr.max()
    return Image.from_array((arr - lo) / (hi - lo))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
