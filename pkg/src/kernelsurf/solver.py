"""Sparse fitting solve: assemble G and Q, run Jacobi-preconditioned CG.

The coefficients minimize

    sum_{levels 1..L'} sum_i ||grad f(c_i) - n_i||^2 + sum_j w_j |f(x_j)|^2

which leads to the normal equations (Q^T Q + G^T W G) alpha = Q^T n with
G the kernel Gram matrix at the input points, Q the stacked per-axis
kernel gradients at the constraint voxel centers, n the per-voxel normals
and W a diagonal of optional per-point weights. The system matrix is
precomputed in sparse form (compact supports keep it as sparse as Q) and
is never densified.
"""

import logging
import threading
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import EmptySupportWarning, InvalidConfig, SingularDiagonalWarning, SizeMismatch
from .geometry import OrientedPointCloud
from .kernels import FitResult, KernelModel, field_grad_matrix, field_matrix

logger = logging.getLogger("kernelsurf.solver")


@dataclass
class SolveConfig:
    tolerance: float = 1e-5
    max_iterations: int = 2000
    adaptive_depth: Optional[int] = None  # default: the hierarchy's own L'
    ridge: float = 0.0  # diagonal shift as a fraction of mean(diag(A))

    def __post_init__(self):
        if self.tolerance <= 0.0:
            raise InvalidConfig("tolerance must be positive")
        if self.max_iterations < 1:
            raise InvalidConfig("max_iterations must be >= 1")


class _SystemTracker:
    """Counts live linear-system bytes so out-of-core peak memory is checkable."""

    def __init__(self):
        self._lock = threading.Lock()
        self._live = 0
        self._peak = 0
        self._largest = 0

    def add(self, nbytes: int) -> None:
        with self._lock:
            self._live += nbytes
            self._peak = max(self._peak, self._live)
            self._largest = max(self._largest, nbytes)

    def remove(self, nbytes: int) -> None:
        with self._lock:
            self._live -= nbytes

    def reset(self) -> None:
        with self._lock:
            self._live = 0
            self._peak = 0
            self._largest = 0

    @property
    def peak_bytes(self) -> int:
        with self._lock:
            return self._peak

    @property
    def largest_system_bytes(self) -> int:
        """Size of the biggest single solve's matrices (one chunk's system)."""
        with self._lock:
            return self._largest


system_tracker = _SystemTracker()


def _matrix_bytes(mat: sp.csr_matrix) -> int:
    return mat.data.nbytes + mat.indices.nbytes + mat.indptr.nbytes


def assemble_G(model: KernelModel, cloud: OrientedPointCloud) -> sp.csr_matrix:
    """Gram matrix of kernel values between input points and all voxels."""
    mat = field_matrix(model, cloud.positions)
    empty_rows = int(np.sum(np.diff(mat.indptr) == 0))
    if empty_rows:
        warnings.warn(
            f"{empty_rows} input points have no kernel support", EmptySupportWarning
        )
    return mat


def constraint_centers(model: KernelModel, adaptive_depth: Optional[int] = None) -> np.ndarray:
    """Voxel centers of levels 1..L' where gradient constraints are placed."""
    hier = model.hierarchy
    depth = hier.adaptive_depth if adaptive_depth is None else adaptive_depth
    if not 1 <= depth <= hier.levels:
        raise InvalidConfig(f"adaptive depth {depth} outside [1, {hier.levels}]")
    return np.concatenate([hier.centers(l) for l in range(1, depth + 1)], axis=0)


def constraint_normals(model: KernelModel, adaptive_depth: Optional[int] = None) -> np.ndarray:
    """Per-voxel normals matching ``constraint_centers``, shape (n_v, 3)."""
    hier = model.hierarchy
    depth = hier.adaptive_depth if adaptive_depth is None else adaptive_depth
    return np.concatenate([hier.normals_at(l) for l in range(1, depth + 1)], axis=0)


def assemble_Q(model: KernelModel, adaptive_depth: Optional[int] = None) -> sp.csr_matrix:
    """Kernel-gradient matrix at the constraint centers.

    Rows are constraint-major with (x, y, z) interleaved: rows 3i..3i+2
    belong to constraint point i, matching the stacked normal layout.
    """
    return field_grad_matrix(model, constraint_centers(model, adaptive_depth))


def _pcg(apply_A, b, diag, tolerance, max_iterations):
    """Jacobi-preconditioned conjugate gradient.

    Keeps the best iterate seen; the reported history carries that
    candidate's relative residual, so it is non-increasing even though the
    raw CG residual may wiggle. Convergence tests the raw residual.
    """
    b_norm = np.linalg.norm(b)
    n = b.shape[0]
    if b_norm == 0.0:
        return np.zeros(n), 0, 0.0, True, [0.0]

    if np.any(diag == 0.0):
        warnings.warn(
            f"{int(np.sum(diag == 0.0))} zero preconditioner entries replaced by 1",
            SingularDiagonalWarning,
        )
        diag = np.where(diag == 0.0, 1.0, diag)

    x = np.zeros(n)
    r = b.copy()
    z = r / diag
    p = z.copy()
    rz = float(r @ z)
    best_x, best_res = x.copy(), 1.0
    history = [1.0]
    for it in range(1, max_iterations + 1):
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            logger.warning("solver stall: non-positive curvature at iteration %d", it)
            break
        step = rz / pAp
        x += step * p
        r -= step * Ap
        rel = float(np.linalg.norm(r) / b_norm)
        if rel < best_res:
            best_res = rel
            np.copyto(best_x, x)
        history.append(best_res)
        if it % 25 == 0 or rel <= tolerance:
            logger.debug("solver {iter: %d, residual: %.3e}", it, best_res)
        if rel <= tolerance:
            return x, it, rel, True, history
        z = r / diag
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    logger.warning("solver hit iteration limit: residual %.3e after %d iterations",
                   best_res, len(history) - 1)
    return best_x, len(history) - 1, best_res, False, history


def solve(
    model: KernelModel,
    cloud: OrientedPointCloud,
    cfg: Optional[SolveConfig] = None,
    weights: Optional[np.ndarray] = None,
) -> FitResult:
    """Fit field coefficients to the cloud via the normal equations.

    ``weights`` (or ``cloud.weights`` when absent) scales each point's value
    constraint; the unweighted path is taken when neither is given.
    """
    cfg = cfg or SolveConfig()
    if weights is None:
        weights = cloud.weights
    if weights is not None:
        weights = np.ascontiguousarray(weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != len(cloud):
            raise SizeMismatch("weights length differs from cloud size")
        if weights.min() < 0.0 or weights.max() > 1.0:
            raise InvalidConfig("weights must lie in [0, 1]")

    G = assemble_G(model, cloud)
    Q = assemble_Q(model, cfg.adaptive_depth)
    normals = constraint_normals(model, cfg.adaptive_depth)
    b = Q.T @ normals.reshape(-1)

    # the normal matrix stays as sparse as Q itself (compact supports), so
    # precomputing it once beats re-running four mat-vecs per CG iteration
    Gw = G if weights is None else sp.diags(weights) @ G
    A = (Q.T @ Q + G.T @ Gw).tocsr()
    A.sort_indices()

    tracked = _matrix_bytes(G) + _matrix_bytes(Q) + _matrix_bytes(A)
    system_tracker.add(tracked)
    try:
        diag = A.diagonal()
        if cfg.ridge > 0.0:
            shift = cfg.ridge * float(diag.mean())
            diag = diag + shift
            apply_A = lambda v: A @ v + shift * v
        else:
            apply_A = lambda v: A @ v

        alpha, iters, residual, converged, _ = _pcg(
            apply_A, b, diag, cfg.tolerance, cfg.max_iterations
        )
    finally:
        system_tracker.remove(tracked)
    return FitResult(alpha, iters, residual, converged)


def solve_color(
    model: KernelModel,
    colors: np.ndarray,
    cloud: OrientedPointCloud,
    cfg: Optional[SolveConfig] = None,
    ridge: float = 1e-4,
) -> np.ndarray:
    """Per-channel kernel regression of vertex colors: (Gc^T Gc) gamma = Gc^T t.

    Returns gamma with shape (total_voxels, 3). A ridge of
    ``ridge * mean(diag)`` keeps the system definite on sparsely covered
    hierarchies.
    """
    cfg = cfg or SolveConfig()
    colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(-1, 3)
    if colors.shape[0] != len(cloud):
        raise SizeMismatch("color count differs from cloud size")
    if colors.min() < 0.0 or colors.max() > 1.0:
        raise InvalidConfig("colors must lie in [0, 1]")

    G = assemble_G(model, cloud)
    A = (G.T @ G).tocsr()
    A.sort_indices()
    tracked = _matrix_bytes(G) + _matrix_bytes(A)
    system_tracker.add(tracked)
    try:
        GT = G.T.tocsr()
        diag = A.diagonal()
        shift = ridge * float(diag.mean()) if ridge > 0.0 else 0.0
        diag = diag + shift

        def apply_A(v):
            out = A @ v
            return out + shift * v if shift else out

        gamma = np.zeros((G.shape[1], 3))
        for ch in range(3):
            g, _, _, _, _ = _pcg(apply_A, GT @ colors[:, ch], diag, cfg.tolerance, cfg.max_iterations)
            gamma[:, ch] = g
    finally:
        system_tracker.remove(tracked)
    return gamma


def dump_matrix(mat: sp.spmatrix, path) -> None:
    """Sparse triplet text dump: one 'row col value' line per entry."""
    coo = mat.tocoo()
    with open(path, "w") as fh:
        fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {float(v)!r}\n")
