"""Isosurface extraction: dual marching cubes over the hierarchy's finest level.

Dual vertices sit at voxel centers; every 2x2x2 block of existing finest
voxels forms one dual cell which is triangulated with the standard
marching-cubes tables and linear edge interpolation. Because the field is
evaluated exactly at the centers (it is defined everywhere), level
transitions need no stitching logic: in mixed-cell mode a missing finest
corner is simply covered by its coarsest existing ancestor's center.
"""

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE
from .errors import EmptyFieldWarning, InvalidConfig, InvalidFit, SizeMismatch
from .geometry import OrientedPointCloud, TriangleMesh
from .hierarchy import VoxelHierarchy
from .kernels import FitResult, KernelModel, field_matrix
from .neighbors import NeighborIndex

_CORNERS = np.asarray(CORNER_OFFSETS, dtype=np.int64)


@dataclass
class ExtractionConfig:
    mask_mode: str = "none"  # none | distance | loaded
    mask_tau: float = 0.0
    color: bool = False
    iso_value: float = 0.0
    mixed_cells: bool = False  # default: finest-level dual cells only

    def __post_init__(self):
        if self.mask_mode not in ("none", "distance", "loaded"):
            raise InvalidConfig(f"unknown mask mode {self.mask_mode!r}")
        if self.mask_mode == "distance" and self.mask_tau <= 0.0:
            raise InvalidConfig("distance mask requires tau > 0")


def _corner_cover(hier: VoxelHierarchy, ijk: np.ndarray, mixed: bool):
    """Resolve finest-lattice corners to (exists, position) arrays.

    Positions default to finest-lattice centers; in mixed mode a corner
    covered only by a coarser voxel takes that voxel's center instead.
    """
    level = np.where(hier.lookup(1, ijk) >= 0, 1, 0)
    if mixed:
        cur = ijk.copy()
        for lv in range(2, hier.levels + 1):
            cur = cur >> 1
            missing = level == 0
            if not np.any(missing):
                break
            found = hier.lookup(lv, cur[missing]) >= 0
            lv_col = np.zeros(int(missing.sum()), dtype=np.int64)
            lv_col[found] = lv
            level[missing] = lv_col
    pos = hier.origin + (ijk.astype(np.float64) + 0.5) * hier.width(1)
    for lv in range(2, hier.levels + 1):
        sel = level == lv
        if np.any(sel):
            w = hier.width(lv)
            pos[sel] = hier.origin + ((ijk[sel] >> (lv - 1)).astype(np.float64) + 0.5) * w
    return level > 0, pos


def extract(
    model: KernelModel,
    fit: Optional[FitResult],
    hier: VoxelHierarchy,
    cfg: Optional[ExtractionConfig] = None,
    cloud: Optional[OrientedPointCloud] = None,
    field_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    mask_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> TriangleMesh:
    """Extract the iso-surface of the fitted field as a triangle mesh.

    ``field_fn`` overrides the kernel field with an arbitrary scalar field
    (oracle hook); ``mask_fn`` supplies a loaded mask as a boolean keep
    predicate over vertex positions. The distance mask needs ``cloud``.
    """
    cfg = cfg or ExtractionConfig()
    if field_fn is None:
        if fit is None:
            raise InvalidFit("extraction needs a fit or a field override")
        if fit.alpha.shape[0] != hier.total_voxels:
            raise InvalidFit(
                f"{fit.alpha.shape[0]} coefficients for {hier.total_voxels} voxels"
            )
        field_fn = lambda pts: field_matrix(model, pts) @ fit.alpha
    if cfg.mask_mode == "distance" and cloud is None:
        raise InvalidConfig("distance mask requires the input cloud")
    if cfg.mask_mode == "loaded" and mask_fn is None:
        raise InvalidConfig("loaded mask requires mask_fn")

    voxels = hier.ijk(1)
    if cfg.mixed_cells:
        # coarser leaves participate: expand each onto the finest lattice
        parts = [voxels] if voxels.shape[0] else []
        for lv in range(2, hier.levels + 1):
            leaves = hier.ijk(lv)[hier.leaf_flags(lv)]
            if leaves.shape[0] == 0:
                continue
            span = 1 << (lv - 1)
            offs = np.stack(
                np.meshgrid(*[np.arange(span)] * 3, indexing="ij"), axis=-1
            ).reshape(-1, 3)
            parts.append(((leaves << (lv - 1))[:, None, :] + offs[None, :, :]).reshape(-1, 3))
        if parts:
            voxels = np.unique(np.concatenate(parts), axis=0)
    if voxels.shape[0] == 0:
        warnings.warn("hierarchy has no finest-level voxels", EmptyFieldWarning)
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    # candidate dual cells: every cell touching at least one existing voxel
    anchors = np.unique(np.concatenate([voxels - off for off in _CORNERS]), axis=0)

    # unique corner lattice points, evaluated once; corners without a voxel
    # are still evaluated (the field is mesh-free) but never witness a
    # crossing on their own, which keeps the support boundary out of the mesh
    corners = (anchors[:, None, :] + _CORNERS[None, :, :]).reshape(-1, 3)
    uniq, inv = np.unique(corners, axis=0, return_inverse=True)
    exists, pos = _corner_cover(hier, uniq, cfg.mixed_cells)
    values = np.asarray(field_fn(pos), dtype=np.float64).reshape(-1)
    finite = np.isfinite(values)  # merged fields may be undefined outside masks
    inside = finite & (values < cfg.iso_value)

    # a cell is processed when its corner values are defined, it straddles
    # the iso-value, and it is anchored by at least one real voxel; the
    # anchoring requirement keeps the decaying far field (which only ever
    # touches zero from one side two rings away from any voxel) unmeshed
    cell_corner = inv.reshape(-1, 8)
    complete = finite[cell_corner].all(axis=1)
    anchored = exists[cell_corner].any(axis=1)
    case = np.zeros(cell_corner.shape[0], dtype=np.int64)
    for bit in range(8):
        case |= inside[cell_corner[:, bit]].astype(np.int64) << bit
    crossing = complete & anchored & (case > 0) & (case < 255)
    cell_corner, case = cell_corner[crossing], case[crossing]
    if cell_corner.shape[0] == 0:
        warnings.warn("field has no sign change; empty mesh", EmptyFieldWarning)
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    # per-crossing-cell triangulation with globally deduplicated edge vertices
    vert_ids: dict = {}
    vert_pos = []
    triangles = []
    iso = cfg.iso_value
    for cell, cs in zip(cell_corner, case):
        edges = EDGE_TABLE[cs]
        local = {}
        for e in range(12):
            if not edges & (1 << e):
                continue
            a, b = EDGE_CORNERS[e]
            ka, kb = int(cell[a]), int(cell[b])
            key = (ka, kb) if ka < kb else (kb, ka)
            vid = vert_ids.get(key)
            if vid is None:
                f1, f2 = values[key[0]], values[key[1]]
                t = (iso - f1) / (f2 - f1)
                vert_ids[key] = vid = len(vert_pos)
                vert_pos.append(pos[key[0]] + t * (pos[key[1]] - pos[key[0]]))
            local[e] = vid
        tri = TRI_TABLE[cs]
        for t0 in range(0, len(tri), 3):
            # table winding faces the negative side; flip so face normals
            # point along increasing field values (outward for SDF-like f)
            ids = (local[tri[t0]], local[tri[t0 + 2]], local[tri[t0 + 1]])
            if ids[0] != ids[1] and ids[1] != ids[2] and ids[0] != ids[2]:
                triangles.append(ids)

    if not triangles:
        warnings.warn("field has no sign change; empty mesh", EmptyFieldWarning)
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    verts = np.asarray(vert_pos)
    tris = np.asarray(triangles, dtype=np.int64)

    keep = None
    if cfg.mask_mode == "distance":
        keep = NeighborIndex(cloud.positions).min_distance(verts) <= cfg.mask_tau
    elif cfg.mask_mode == "loaded":
        keep = np.asarray(mask_fn(verts), dtype=bool).reshape(-1)
    if keep is not None and not np.all(keep):
        verts, tris = _trim(verts, tris, keep)

    return TriangleMesh(verts, tris)


def _trim(verts: np.ndarray, tris: np.ndarray, keep: np.ndarray):
    """Drop masked vertices and every triangle touching one; compact indices."""
    tri_keep = keep[tris].all(axis=1)
    tris = tris[tri_keep]
    used = np.zeros(verts.shape[0], dtype=bool)
    if tris.size:
        used[np.unique(tris)] = True
    remap = np.cumsum(used) - 1
    return verts[used], remap[tris] if tris.size else tris


def sample_colors(mesh: TriangleMesh, model: KernelModel, gamma: np.ndarray) -> TriangleMesh:
    """Attach per-vertex colors g(v) = sum gamma_i K(v, c_i), clamped to [0, 1]."""
    gamma = np.ascontiguousarray(gamma, dtype=np.float64)
    if gamma.ndim != 2 or gamma.shape != (model.hierarchy.total_voxels, 3):
        raise SizeMismatch(
            f"gamma must have shape ({model.hierarchy.total_voxels}, 3), got {gamma.shape}"
        )
    if mesh.n_vertices == 0:
        return TriangleMesh(mesh.vertices, mesh.triangles, np.zeros((0, 3)))
    mat = field_matrix(model, mesh.vertices)
    rgb = np.clip(mat @ gamma, 0.0, 1.0)
    return TriangleMesh(mesh.vertices, mesh.triangles, rgb)
