"""Core geometric value types: oriented point clouds and triangle meshes.

Both types are immutable containers of numpy arrays, validated on
construction and safe to share across threads.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyInput, SizeMismatch

_UNIT_TOL = 1e-6


def _as_points(a, name: str) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise SizeMismatch(f"{name} must have shape (n, 3), got {a.shape}")
    return a


@dataclass(frozen=True)
class OrientedPointCloud:
    """Point positions with optional unit normals, sensor origins and weights.

    All arrays are parallel (same length n >= 1). Normals are renormalized
    on construction so the unit-length invariant always holds; weights must
    lie in [0, 1].
    """

    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    sensor_origins: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = _as_points(self.positions, "positions")
        if pos.shape[0] == 0:
            raise EmptyInput("point cloud has zero points")
        if not np.all(np.isfinite(pos)):
            raise SizeMismatch("positions contain non-finite coordinates")
        object.__setattr__(self, "positions", pos)
        n = pos.shape[0]

        if self.normals is not None:
            nrm = _as_points(self.normals, "normals")
            if nrm.shape[0] != n:
                raise SizeMismatch("normals length differs from positions")
            if not np.all(np.isfinite(nrm)):
                raise SizeMismatch("normals contain non-finite values")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(lengths < _UNIT_TOL):
                raise SizeMismatch("normals contain (near-)zero vectors")
            if np.any(np.abs(lengths - 1.0) > _UNIT_TOL):
                nrm = nrm / lengths[:, None]
            object.__setattr__(self, "normals", nrm)

        if self.sensor_origins is not None:
            org = _as_points(self.sensor_origins, "sensor_origins")
            if org.shape[0] != n:
                raise SizeMismatch("sensor_origins length differs from positions")
            object.__setattr__(self, "sensor_origins", org)

        if self.weights is not None:
            w = np.ascontiguousarray(self.weights, dtype=np.float64).reshape(-1)
            if w.shape[0] != n:
                raise SizeMismatch("weights length differs from positions")
            if np.any(~np.isfinite(w)) or np.any(w < 0.0) or np.any(w > 1.0):
                raise SizeMismatch("weights must lie in [0, 1]")
            object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def with_normals(self, normals: np.ndarray) -> "OrientedPointCloud":
        return OrientedPointCloud(self.positions, normals, self.sensor_origins, self.weights)

    def with_weights(self, weights: Optional[np.ndarray]) -> "OrientedPointCloud":
        return OrientedPointCloud(self.positions, self.normals, self.sensor_origins, weights)

    def select(self, index) -> "OrientedPointCloud":
        """Sub-cloud at the given indices / boolean mask."""
        pick = lambda a: None if a is None else a[index]
        return OrientedPointCloud(
            self.positions[index], pick(self.normals), pick(self.sensor_origins), pick(self.weights)
        )


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle set with optional per-vertex RGB colors in [0, 1]."""

    vertices: np.ndarray
    triangles: np.ndarray
    vertex_colors: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size:
            if t.min() < 0 or t.max() >= v.shape[0]:
                raise SizeMismatch("triangle index out of range")
            degen = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
            if np.any(degen):
                raise SizeMismatch(f"{int(degen.sum())} degenerate triangles with repeated indices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.vertex_colors is not None:
            c = np.ascontiguousarray(self.vertex_colors, dtype=np.float64).reshape(-1, 3)
            if c.shape[0] != v.shape[0]:
                raise SizeMismatch("vertex_colors length differs from vertices")
            if c.size and (c.min() < 0.0 or c.max() > 1.0):
                raise SizeMismatch("vertex_colors must lie in [0, 1]")
            object.__setattr__(self, "vertex_colors", c)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def is_empty(self) -> bool:
        return self.triangles.shape[0] == 0

    def face_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edge_incidence(self) -> dict:
        """Map from undirected edge (i, j) with i < j to its triangle count."""
        counts: dict = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (int(a), int(b)) if a < b else (int(b), int(a))
                counts[key] = counts.get(key, 0) + 1
        return counts
