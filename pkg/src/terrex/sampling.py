"""Nearest-neighbour queries and furthest point sampling.

Every distance is evaluated in float64 with the same expression,
``sqrt(dx*dx + dy*dy + dz*dz)``, so results agree bit-for-bit with a plain
double loop. Ties are broken by the lowest point index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from terrex.cloud import PointCloud
from terrex.errors import QueryError

# Relative/absolute slack used when asking the tree for a candidate ball; the
# exact answer is then recomputed over the candidates.
_REL_SLACK = 1e-9
_ABS_SLACK = 1e-12


def point_distances(q, pts: np.ndarray) -> np.ndarray:
    """Distances from one query to each row of ``pts`` (float64)."""
    q = np.asarray(q, dtype=np.float64)
    dx = pts[:, 0] - q[0]
    dy = pts[:, 1] - q[1]
    dz = pts[:, 2] - q[2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense ``(len(a), len(b))`` distance matrix, same arithmetic as above."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dx = b[None, :, 0] - a[:, None, 0]
    dy = b[None, :, 1] - a[:, None, 1]
    dz = b[None, :, 2] - a[:, None, 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def knn_dense(queries: np.ndarray, ref: np.ndarray, k: int):
    """Brute-force kNN for small sets. Returns ``(indices, distances)``."""
    d = pairwise_distances(queries, ref)
    k = min(k, d.shape[1])
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d, order, axis=1)


class KdIndex:
    """Balanced k-d tree over an immutable cloud with exact, tie-stable answers.

    The tree (scipy's cKDTree) only proposes candidates; final distances and
    ordering are recomputed here so answers match brute force exactly.
    """

    def __init__(self, cloud: PointCloud, leaf_size: int = 16):
        if leaf_size < 1:
            raise ValueError("leaf_size must be positive")
        self.points = cloud.as_float64()
        self.leaf_size = leaf_size
        self._tree = None
        if len(self.points):
            self._tree = cKDTree(self.points, leafsize=leaf_size, balanced_tree=True)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def empty(self) -> bool:
        return self._tree is None

    def _check(self):
        if self._tree is None:
            raise QueryError("query against an empty index")

    def knn(self, query, k: int) -> list:
        """``min(k, n)`` nearest points as ``(index, distance)`` pairs, ascending."""
        self._check()
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float64)
        kk = min(k, len(self))
        d, _ = self._tree.query(q, k=kk)
        dk = float(np.atleast_1d(d)[-1])
        cand = np.asarray(
            self._tree.query_ball_point(q, dk * (1 + _REL_SLACK) + _ABS_SLACK),
            dtype=np.int64,
        )
        dist = point_distances(q, self.points[cand])
        order = np.lexsort((cand, dist))[:kk]
        return [(int(cand[i]), float(dist[i])) for i in order]

    def nearest(self, query) -> tuple:
        return self.knn(query, 1)[0]

    def nearest_distance(self, query) -> float:
        return self.nearest(query)[1]

    def nearest_distances(self, queries: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`nearest_distance` over rows of ``queries``."""
        self._check()
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(q) == 0:
            return np.zeros(0)
        d, _ = self._tree.query(q, k=1)
        cands = self._tree.query_ball_point(q, d * (1 + _REL_SLACK) + _ABS_SLACK)
        out = np.empty(len(q))
        for i, cand in enumerate(cands):
            out[i] = point_distances(q[i], self.points[cand]).min()
        return out


def build_index(cloud: PointCloud, leaf_size: int = 16) -> KdIndex:
    return KdIndex(cloud, leaf_size)


def knn(index: KdIndex, query, k: int) -> list:
    return index.knn(query, k)


def nearest_distance(index: KdIndex, query) -> float:
    return index.nearest_distance(query)


@dataclass(frozen=True)
class FpsResult:
    indices: tuple
    count: int

    def __len__(self):
        return len(self.indices)


def fps_indices(pts: np.ndarray, count: int, start: int) -> np.ndarray:
    """Greedy furthest point sampling from a fixed start index."""
    n = pts.shape[0]
    count = min(count, n)
    sel = np.empty(count, dtype=np.int64)
    sel[0] = start
    mind = point_distances(pts[start], pts)
    mind[start] = -1.0
    for j in range(1, count):
        i = int(np.argmax(mind))
        sel[j] = i
        np.minimum(mind, point_distances(pts[i], pts), out=mind)
        mind[i] = -1.0  # stays negative under later minimum()
    return sel


def fps_start(n: int, seed: int) -> int:
    return int(np.random.default_rng(seed).integers(n))


def furthest_point_sample(cloud: PointCloud, count: int, seed: int) -> FpsResult:
    if len(cloud) == 0:
        raise QueryError("furthest point sampling on an empty cloud")
    if count < 1:
        raise ValueError("count must be >= 1")
    pts = cloud.as_float64()
    sel = fps_indices(pts, count, fps_start(len(pts), seed))
    return FpsResult(tuple(int(i) for i in sel), count)
