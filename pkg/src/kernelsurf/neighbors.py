"""Nearest-neighbor index shared by normal estimation, metrics, masking and tsdf.

Thin wrapper over scipy's cKDTree; exact nearest neighbors, immutable after
construction.
"""

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput


class NeighborIndex:
    def __init__(self, points: np.ndarray):
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if points.shape[0] == 0:
            raise EmptyInput("cannot index an empty point set")
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return self.points.shape[0]

    def nearest(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Indices and Euclidean distances of the nearest point per query.

        Distances are recomputed from the returned indices with the plain
        numpy norm so they are bitwise comparable to a brute-force scan.
        """
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        _, idx = self._tree.query(q, k=1)
        idx = np.atleast_1d(idx).astype(np.int64)
        dist = np.linalg.norm(q - self.points[idx], axis=1)
        return idx, dist

    def knn(self, queries: np.ndarray, k: int) -> np.ndarray:
        """Indices of the k nearest points per query, shape (m, k)."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(k, len(self))
        _, idx = self._tree.query(q, k=k)
        return np.atleast_2d(idx).astype(np.int64)

    def min_distance(self, queries: np.ndarray) -> np.ndarray:
        return self.nearest(queries)[1]
