"""Out-of-core reconstruction: overlapping chunks merged in implicit form.

Chunks tile the input on a grid snapped to the hierarchy's global lattice,
so voxel centers of overlapping chunks coincide bitwise. Each chunk is
solved independently; the merged field is the soft-mask-weighted average
of the chunk fields and the merged mask is their maximum.
"""

import json
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import AllChunksFailed, ChunkFailedWarning, InvalidConfig
from .extract import ExtractionConfig, extract
from .geometry import OrientedPointCloud, TriangleMesh
from .hierarchy import VoxelHierarchy, _LevelGrid, _pack, _unpack, build_from_input, load_dump
from .kernels import FitResult, KernelModel, field_matrix
from .neighbors import NeighborIndex
from .solver import SolveConfig, solve

logger = logging.getLogger("kernelsurf.outofcore")


@dataclass
class ChunkLayout:
    origin: np.ndarray  # shared lattice origin
    chunk_size: float  # snapped to the coarsest voxel width
    overlap: float
    cells: np.ndarray  # (n_chunks, 3) chunk grid coordinates
    point_indices: List[np.ndarray]  # per chunk: indices into the input cloud

    def __len__(self) -> int:
        return self.cells.shape[0]

    def core_bounds(self, n: int) -> Tuple[np.ndarray, np.ndarray]:
        lo = self.origin + self.cells[n] * self.chunk_size
        return lo, lo + self.chunk_size

    def pad_bounds(self, n: int) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = self.core_bounds(n)
        return lo - self.overlap, hi + self.overlap


def plan_chunks(
    cloud: OrientedPointCloud,
    chunk_size: float,
    overlap: float,
    voxel_size: float,
    levels: int = 4,
) -> ChunkLayout:
    """Grid of overlapping chunks snapped to the global voxel lattice.

    Every point lands in exactly one chunk core and in every padded region
    that covers it. Overlap must be at least 3 voxels (the kernel support
    radius at the finest level) and chunk_size > 2 * overlap.
    """
    if overlap < 3.0 * voxel_size:
        raise InvalidConfig(f"overlap {overlap} below kernel support 3W = {3 * voxel_size}")
    if chunk_size <= 2.0 * overlap:
        raise InvalidConfig(f"chunk_size {chunk_size} must exceed 2 * overlap = {2 * overlap}")
    coarsest = voxel_size * (2.0 ** (levels - 1))
    origin = np.floor(cloud.positions.min(axis=0) / coarsest) * coarsest
    size = max(round(chunk_size / coarsest), 1) * coarsest
    ov = np.ceil(overlap / coarsest) * coarsest
    if size <= 2.0 * ov:
        raise InvalidConfig(
            f"snapped chunk_size {size} must exceed 2 * snapped overlap = {2 * ov}"
        )

    cell_of_point = np.floor((cloud.positions - origin) / size).astype(np.int64)
    cells = np.unique(cell_of_point, axis=0)
    indices = []
    pos = cloud.positions
    for cell in cells:
        lo = origin + cell * size - ov
        hi = origin + (cell + 1) * size + ov
        inside = np.all((pos >= lo) & (pos <= hi), axis=1)
        indices.append(np.flatnonzero(inside))
    return ChunkLayout(origin, float(size), float(ov), cells, indices)


@dataclass
class ChunkResult:
    """One chunk's fitted field plus everything needed to merge it."""

    cell: Tuple[int, int, int]
    model: KernelModel
    fit: FitResult
    pad_lo: np.ndarray
    pad_hi: np.ndarray
    mask_tau: float
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    _index: Optional[NeighborIndex] = None

    def local(self, x: np.ndarray) -> np.ndarray:
        """Apply the inverse chunk transform (translation only)."""
        return x - self.translation

    def mask(self, x: np.ndarray) -> np.ndarray:
        """Soft [0, 1] mask: 1 within tau of the chunk's points, linear
        ramp to 0 over [tau, 2 tau], and 0 outside the padded box."""
        x = self.local(np.asarray(x, dtype=np.float64).reshape(-1, 3))
        out = np.zeros(x.shape[0])
        inside = np.all((x >= self.pad_lo) & (x <= self.pad_hi), axis=1)
        if np.any(inside) and self._index is not None:
            d = self._index.min_distance(x[inside])
            tau = self.mask_tau
            out[inside] = np.clip((2.0 * tau - d) / tau, 0.0, 1.0)
        return out

    def field(self, x: np.ndarray) -> np.ndarray:
        x = self.local(np.asarray(x, dtype=np.float64).reshape(-1, 3))
        return field_matrix(self.model, x) @ self.fit.alpha


def merge_eval(chunks: Sequence[ChunkResult], x: np.ndarray):
    """Mask-weighted average field and max mask over covering chunks.

    Returns (f, mask); f is NaN wherever no chunk contributes. The result
    does not depend on the order of ``chunks`` (accumulation is sorted).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    num = np.zeros(x.shape[0])
    den = np.zeros(x.shape[0])
    mask = np.zeros(x.shape[0])
    for chunk in sorted(chunks, key=lambda c: c.cell):
        phi = chunk.mask(x)
        touched = phi > 0.0
        if not np.any(touched):
            continue
        f_k = chunk.field(x[touched])
        num[touched] += phi[touched] * f_k
        den[touched] += phi[touched]
        mask = np.maximum(mask, phi)
    covered = den > 0.0
    f = np.full(x.shape[0], np.nan)
    f[covered] = num[covered] / den[covered]
    return f, mask


def _union_finest(chunks: Sequence[ChunkResult], origin, voxel_size) -> VoxelHierarchy:
    """Single-level hierarchy holding the union of all finest leaf voxels."""
    keys = np.unique(
        np.concatenate([_pack(c.model.hierarchy.ijk(1)) for c in chunks])
    )
    grid = _LevelGrid(keys, _unpack(keys), 1)
    return VoxelHierarchy(origin, voxel_size, 1, 1, {1: grid})


def reconstruct_large(
    cloud: OrientedPointCloud,
    voxel_size: float,
    levels: int = 4,
    adaptive_depth: int = 2,
    chunk_size: float = 51.2,
    overlap: Optional[float] = None,
    mask_tau: Optional[float] = None,
    solve_cfg: Optional[SolveConfig] = None,
    feature_value: Sequence[float] = (1.0,),
    layout: Optional[ChunkLayout] = None,
    workers: int = 1,
    persist_dir: Optional[str] = None,
    trim: bool = True,
) -> TriangleMesh:
    """Chunked reconstruction: solve per chunk, extract once from the merge.

    Failed (non-converged) chunks are excluded with a warning; the final
    mesh is trimmed where the merged mask is at most 0.5 unless ``trim``
    is disabled.
    """
    overlap = 6.0 * voxel_size if overlap is None else overlap
    mask_tau = 2.0 * voxel_size if mask_tau is None else mask_tau
    solve_cfg = solve_cfg or SolveConfig()
    if layout is None:
        layout = plan_chunks(cloud, chunk_size, overlap, voxel_size, levels)

    def run_chunk(n: int) -> Optional[ChunkResult]:
        cell = tuple(int(v) for v in layout.cells[n])
        sub = cloud.select(layout.point_indices[n])
        pad_lo, pad_hi = layout.pad_bounds(n)
        fit = hier = None
        if persist_dir:
            fit, hier = _load_chunk(persist_dir, cell)
        if fit is None:
            hier = build_from_input(
                sub, voxel_size, levels, adaptive_depth, origin=layout.origin
            )
            model = KernelModel.constant(hier, feature_value)
            fit = solve(model, sub, solve_cfg)
            if persist_dir:
                _save_chunk(persist_dir, cell, hier, fit)
        else:
            model = KernelModel.constant(hier, feature_value)
        if not fit.converged:
            warnings.warn(
                f"chunk {cell}: solve stopped at residual {fit.final_residual:.2e}",
                ChunkFailedWarning,
            )
            return None
        result = ChunkResult(cell, model, fit, pad_lo, pad_hi, mask_tau)
        result._index = NeighborIndex(sub.positions)
        return result

    order = sorted(range(len(layout)), key=lambda n: tuple(layout.cells[n]))
    if workers <= 1:
        results = [run_chunk(n) for n in order]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_chunk, order))
    chunks = [r for r in results if r is not None]
    if not chunks:
        raise AllChunksFailed("no chunk solve converged")
    logger.info("merged %d/%d chunks", len(chunks), len(layout))

    union = _union_finest(chunks, layout.origin, voxel_size)
    field_fn = lambda pts: merge_eval(chunks, pts)[0]
    if trim:
        cfg = ExtractionConfig(mask_mode="loaded")
        mask_fn = lambda pts: merge_eval(chunks, pts)[1] > 0.5
    else:
        cfg = ExtractionConfig()
        mask_fn = None
    return extract(None, None, union, cfg, field_fn=field_fn, mask_fn=mask_fn)


def _chunk_paths(persist_dir: str, cell) -> Tuple[str, str, str]:
    stem = os.path.join(persist_dir, f"chunk_{cell[0]}_{cell[1]}_{cell[2]}")
    return stem + ".hier", stem + ".alpha.npy", stem + ".meta.json"


def _save_chunk(persist_dir: str, cell, hier: VoxelHierarchy, fit: FitResult) -> None:
    os.makedirs(persist_dir, exist_ok=True)
    hier_path, alpha_path, meta_path = _chunk_paths(persist_dir, cell)
    hier.dump(hier_path)
    np.save(alpha_path, fit.alpha)
    with open(meta_path, "w") as fh:
        json.dump(fit.solver_stats, fh)


def _load_chunk(persist_dir: str, cell):
    hier_path, alpha_path, meta_path = _chunk_paths(persist_dir, cell)
    if not (os.path.exists(hier_path) and os.path.exists(alpha_path) and os.path.exists(meta_path)):
        return None, None
    hier = load_dump(hier_path)
    alpha = np.load(alpha_path)
    with open(meta_path) as fh:
        meta = json.load(fh)
    fit = FitResult(alpha, meta["iterations"], meta["final_residual"], meta["converged"])
    logger.info("chunk %s restored from %s", cell, persist_dir)
    return fit, hier
