"""Compactly supported kernel field: B-spline kernel, feature fields, evaluation.

The per-level kernel is K(x, x') = <phi(x), phi(x')> * Kb(x, x') where Kb
is a separable product of squared second-order B-splines of the per-axis
offsets scaled by the level width, and phi is either a constant vector or
an MLP applied to kernel-interpolated per-voxel features. The implicit
field is f(x) = sum_i alpha_i * K(x, c_i) over all hierarchy voxels, which
is a sparse gather because Kb vanishes outside the 1-ring of each voxel.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, InvalidConfig, SizeMismatch

# -- univariate squared B-spline ----------------------------------------------


def bspline(s):
    """Second-order B-spline bump: (s+3/2)^2, -2s^2+3/2, (s-3/2)^2, else 0."""
    s = np.asarray(s, dtype=np.float64)
    out = np.select(
        [
            (s >= -1.5) & (s < -0.5),
            (s >= -0.5) & (s <= 0.5),
            (s > 0.5) & (s <= 1.5),
        ],
        [(s + 1.5) ** 2, -2.0 * s**2 + 1.5, (s - 1.5) ** 2],
        default=0.0,
    )
    return float(out) if out.ndim == 0 else out


def bspline_deriv(s):
    """Derivative of ``bspline``: 2(s+3/2), -4s, 2(s-3/2), else 0."""
    s = np.asarray(s, dtype=np.float64)
    out = np.select(
        [
            (s >= -1.5) & (s < -0.5),
            (s >= -0.5) & (s <= 0.5),
            (s > 0.5) & (s <= 1.5),
        ],
        [2.0 * (s + 1.5), -4.0 * s, 2.0 * (s - 1.5)],
        default=0.0,
    )
    return float(out) if out.ndim == 0 else out


def bezier_kernel(x, x_prime, width: float):
    """Separable kernel prod_axis bspline((x - x')_axis / width).

    Symmetric, zero whenever any axis offset reaches 1.5 * width. Accepts
    single points or (n, 3) arrays.
    """
    if width <= 0.0:
        raise InvalidConfig(f"kernel width must be positive, got {width}")
    s = (np.asarray(x, dtype=np.float64) - np.asarray(x_prime, dtype=np.float64)) / width
    s = s.reshape(-1, 3)
    val = bspline(s[:, 0]) * bspline(s[:, 1]) * bspline(s[:, 2])
    return float(val[0]) if val.shape[0] == 1 and np.ndim(x) == 1 else val


def bezier_kernel_grad(x, x_prime, width: float):
    """Gradient of ``bezier_kernel`` with respect to the first argument."""
    if width <= 0.0:
        raise InvalidConfig(f"kernel width must be positive, got {width}")
    s = (np.asarray(x, dtype=np.float64) - np.asarray(x_prime, dtype=np.float64)) / width
    single = s.ndim == 1
    s = s.reshape(-1, 3)
    px, py, pz = bspline(s[:, 0]), bspline(s[:, 1]), bspline(s[:, 2])
    dx, dy, dz = bspline_deriv(s[:, 0]), bspline_deriv(s[:, 1]), bspline_deriv(s[:, 2])
    grad = np.stack([dx * py * pz, px * dy * pz, px * py * dz], axis=1) / width
    return grad[0] if single else grad


# -- feature fields -----------------------------------------------------------


@dataclass
class MLPWeights:
    """Dense MLP as a list of (weight (out, in), bias (out,), activation) layers."""

    layers: List[Tuple[np.ndarray, np.ndarray, str]]

    def __post_init__(self):
        if not self.layers:
            raise InvalidConfig("MLP needs at least one layer")
        layers = []
        prev_out = None
        for n, (w, b, act) in enumerate(self.layers):
            w = np.ascontiguousarray(w, dtype=np.float64)
            b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1)
            if w.ndim != 2 or b.shape[0] != w.shape[0]:
                raise InvalidConfig(f"layer {n}: weight/bias shapes {w.shape}/{b.shape}")
            if prev_out is not None and w.shape[1] != prev_out:
                raise InvalidConfig(f"layer {n}: input width {w.shape[1]} != {prev_out}")
            if act not in ("relu", "none"):
                raise InvalidConfig(f"layer {n}: unknown activation {act!r}")
            prev_out = w.shape[0]
            layers.append((w, b, act))
        if layers[-1][2] != "none":
            raise InvalidConfig("final MLP activation must be 'none'")
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def forward(self, u: np.ndarray) -> np.ndarray:
        h = np.asarray(u, dtype=np.float64).reshape(-1, self.in_dim)
        for w, b, act in self.layers:
            h = h @ w.T + b
            if act == "relu":
                h = np.maximum(h, 0.0)
        return h

    def forward_with_jacobian(self, u: np.ndarray):
        """Outputs and batched Jacobians d(out)/d(in), shape (m, out, in).

        ReLU uses subgradient 0 at exactly zero preactivation.
        """
        h = np.asarray(u, dtype=np.float64).reshape(-1, self.in_dim)
        m = h.shape[0]
        jac = None
        for w, b, act in self.layers:
            pre = h @ w.T + b
            jac = (
                np.broadcast_to(w, (m,) + w.shape).copy()
                if jac is None
                else np.einsum("oi,mij->moj", w, jac)
            )
            if act == "relu":
                mask = pre > 0.0
                h = np.where(mask, pre, 0.0)
                jac *= mask[:, :, None]
            else:
                h = pre
        return h, jac


@dataclass
class FeatureFieldSpec:
    """Per-level feature field: a constant vector or loaded features + MLP."""

    d: int
    constant: Optional[np.ndarray] = None
    mlp: Optional[MLPWeights] = None
    concat_position: bool = False

    def __post_init__(self):
        if (self.constant is None) == (self.mlp is None):
            raise InvalidConfig("feature field is either constant or learned")
        if self.constant is not None:
            c = np.ascontiguousarray(self.constant, dtype=np.float64).reshape(-1)
            if c.shape[0] != self.d or not np.all(np.isfinite(c)) or not np.any(c != 0.0):
                raise InvalidConfig("constant feature vector must be finite, nonzero, length d")
            self.constant = c
        else:
            if self.mlp.out_dim != self.d:
                raise InvalidConfig(
                    f"MLP output width {self.mlp.out_dim} differs from d={self.d}"
                )

    @property
    def kind(self) -> str:
        return "constant" if self.constant is not None else "learned"

    @staticmethod
    def constant_field(vec) -> "FeatureFieldSpec":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        return FeatureFieldSpec(d=vec.shape[0], constant=vec)

    @staticmethod
    def learned_field(mlp: MLPWeights, concat_position: bool = False) -> "FeatureFieldSpec":
        return FeatureFieldSpec(d=mlp.out_dim, mlp=mlp, concat_position=concat_position)


@dataclass
class FitResult:
    """Solved coefficients over all hierarchy voxels plus solver statistics."""

    alpha: np.ndarray
    iterations: int
    final_residual: float
    converged: bool = True

    def __post_init__(self):
        a = np.ascontiguousarray(self.alpha, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(a)):
            raise SizeMismatch("fit coefficients contain non-finite values")
        self.alpha = a

    @property
    def solver_stats(self) -> dict:
        return {
            "iterations": int(self.iterations),
            "final_residual": float(self.final_residual),
            "converged": bool(self.converged),
        }


class KernelModel:
    """Feature-field specification per level, bound to a voxel hierarchy."""

    def __init__(self, feature_fields: List[FeatureFieldSpec], hierarchy):
        if len(feature_fields) != hierarchy.levels:
            raise DimensionMismatch(
                f"{len(feature_fields)} feature fields for {hierarchy.levels} levels"
            )
        self.feature_fields = list(feature_fields)
        self.hierarchy = hierarchy
        self._phi_center_cache: dict = {}

    @classmethod
    def constant(cls, hierarchy, value=(1.0,)) -> "KernelModel":
        spec = FeatureFieldSpec.constant_field(value)
        return cls([spec] * hierarchy.levels, hierarchy)

    def clear_cache(self) -> None:
        self._phi_center_cache.clear()

    def phi(self, level: int, points: np.ndarray) -> np.ndarray:
        """Feature-field values phi(x) at each point, shape (m, d)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        spec = self.feature_fields[level - 1]
        if spec.kind == "constant":
            return np.tile(spec.constant, (pts.shape[0], 1))
        u = self.hierarchy.interpolate_features(level, pts)
        u = self._check_mlp_input(spec, u, pts)
        return spec.mlp.forward(u)

    def phi_with_jacobian(self, level: int, points: np.ndarray):
        """phi(x) and its spatial Jacobian d(phi)/d(x), shapes (m, d), (m, d, 3)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        spec = self.feature_fields[level - 1]
        m = pts.shape[0]
        if spec.kind == "constant":
            return np.tile(spec.constant, (m, 1)), np.zeros((m, spec.d, 3))
        u = self.hierarchy.interpolate_features(level, pts)
        j_interp = self._interp_jacobian(level, pts)
        u = self._check_mlp_input(spec, u, pts)
        if spec.concat_position:
            eye = np.broadcast_to(np.eye(3), (m, 3, 3))
            j_interp = np.concatenate([j_interp, eye], axis=1)
        phi, j_mlp = spec.mlp.forward_with_jacobian(u)
        return phi, np.einsum("mdi,mij->mdj", j_mlp, j_interp)

    def phi_centers(self, level: int) -> np.ndarray:
        """phi evaluated at this level's own voxel centers (cached)."""
        if level not in self._phi_center_cache:
            self._phi_center_cache[level] = self.phi(level, self.hierarchy.centers(level))
        return self._phi_center_cache[level]

    def _check_mlp_input(self, spec, u, pts):
        if spec.concat_position:
            u = np.concatenate([u, pts], axis=1)
        if u.shape[1] != spec.mlp.in_dim:
            raise DimensionMismatch(
                f"MLP expects input width {spec.mlp.in_dim}, features give {u.shape[1]}"
            )
        return u

    def _interp_jacobian(self, level: int, pts: np.ndarray) -> np.ndarray:
        """Jacobian of the feature interpolation w.r.t. the query point."""
        hier = self.hierarchy
        feats = hier.features_at(level)
        out = np.zeros((pts.shape[0], feats.shape[1], 3))
        rows, cols, s = hier.support_pairs(level, pts)
        if rows.size:
            w = hier.width(level)
            px, py, pz = bspline(s[:, 0]), bspline(s[:, 1]), bspline(s[:, 2])
            dx, dy, dz = bspline_deriv(s[:, 0]), bspline_deriv(s[:, 1]), bspline_deriv(s[:, 2])
            gw = np.stack([dx * py * pz, px * dy * pz, px * py * dz], axis=1) / w
            np.add.at(out, rows, feats[cols][:, :, None] * gw[:, None, :])
        return out


# -- kernel and field evaluation ----------------------------------------------


def eval_phi(model: KernelModel, level: int, x) -> np.ndarray:
    """Feature field at one point (d,) or a batch (m, d)."""
    x = np.asarray(x, dtype=np.float64)
    out = model.phi(level, x)
    return out[0] if x.ndim == 1 else out


def eval_kernel(model: KernelModel, level: int, x, x_prime):
    """K(x, x') = <phi(x), phi(x')> * Kb(x, x') at one pair or batched pairs."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    p1 = model.phi(level, x)
    p2 = model.phi(level, x_prime)
    kb = bezier_kernel(
        x.reshape(-1, 3), np.asarray(x_prime, dtype=np.float64).reshape(-1, 3),
        model.hierarchy.width(level),
    )
    val = np.einsum("ij,ij->i", p1, p2) * np.atleast_1d(kb)
    return float(val[0]) if single else val


def eval_kernel_grad(model: KernelModel, level: int, x, x_prime):
    """Gradient of K(x, x') with respect to x; (3,) or (m, 3)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x.reshape(-1, 3)
    xp = np.asarray(x_prime, dtype=np.float64).reshape(-1, 3)
    width = model.hierarchy.width(level)
    p1, j1 = model.phi_with_jacobian(level, xb)
    p2 = model.phi(level, x_prime)
    kb = np.atleast_1d(bezier_kernel(xb, xp, width))
    gkb = bezier_kernel_grad(xb, xp, width).reshape(-1, 3)
    dot = np.einsum("ij,ij->i", p1, p2)
    grad = dot[:, None] * gkb + np.einsum("mdj,md->mj", j1, p2) * kb[:, None]
    return grad[0] if single else grad


def _check_fit(model: KernelModel, fit: FitResult) -> None:
    if fit.alpha.shape[0] != model.hierarchy.total_voxels:
        raise SizeMismatch(
            f"{fit.alpha.shape[0]} coefficients for {model.hierarchy.total_voxels} voxels"
        )


def field_matrix(model: KernelModel, points: np.ndarray) -> sp.csr_matrix:
    """Sparse matrix of kernel values K(x_i, c_j) over all levels.

    Shape (n_points, total_voxels); columns are grouped by level in the
    hierarchy's canonical voxel order. Row i of (matrix @ alpha) is f(x_i).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hier = model.hierarchy
    m = pts.shape[0]
    rows_all, cols_all, vals_all = [], [], []
    for level in range(1, hier.levels + 1):
        rows, cols, s = hier.support_pairs(level, pts)
        if rows.size == 0:
            continue
        kb = bspline(s[:, 0]) * bspline(s[:, 1]) * bspline(s[:, 2])
        spec = model.feature_fields[level - 1]
        if spec.kind == "constant":
            dot = float(spec.constant @ spec.constant)
            vals = dot * kb
        else:
            phi_x = model.phi(level, pts)
            phi_c = model.phi_centers(level)
            vals = np.einsum("ij,ij->i", phi_x[rows], phi_c[cols]) * kb
        rows_all.append(rows)
        cols_all.append(cols + hier.level_offset(level))
        vals_all.append(vals)
    if not rows_all:
        return sp.csr_matrix((m, hier.total_voxels))
    mat = sp.coo_matrix(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(m, hier.total_voxels),
    ).tocsr()
    mat.sort_indices()
    return mat


def field_grad_matrix(model: KernelModel, points: np.ndarray) -> sp.csr_matrix:
    """Sparse matrix of kernel gradients d K(x_i, c_j) / d x_i.

    Shape (3 * n_points, total_voxels); rows are interleaved per point as
    (x, y, z), so (matrix @ alpha).reshape(-1, 3) stacks the field gradients.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hier = model.hierarchy
    m = pts.shape[0]
    rows_all, cols_all, vals_all = [], [], []
    for level in range(1, hier.levels + 1):
        rows, cols, s = hier.support_pairs(level, pts)
        if rows.size == 0:
            continue
        w = hier.width(level)
        px, py, pz = bspline(s[:, 0]), bspline(s[:, 1]), bspline(s[:, 2])
        dx, dy, dz = bspline_deriv(s[:, 0]), bspline_deriv(s[:, 1]), bspline_deriv(s[:, 2])
        kb = px * py * pz
        gkb = np.stack([dx * py * pz, px * dy * pz, px * py * dz], axis=1) / w
        spec = model.feature_fields[level - 1]
        if spec.kind == "constant":
            dot = float(spec.constant @ spec.constant)
            grads = dot * gkb
        else:
            phi_x, j_x = model.phi_with_jacobian(level, pts)
            phi_c = model.phi_centers(level)
            dot = np.einsum("ij,ij->i", phi_x[rows], phi_c[cols])
            jterm = np.einsum("mdj,md->mj", j_x[rows], phi_c[cols])
            grads = dot[:, None] * gkb + jterm * kb[:, None]
        col_block = cols + hier.level_offset(level)
        for axis in range(3):
            rows_all.append(3 * rows + axis)
            cols_all.append(col_block)
            vals_all.append(grads[:, axis])
    if not rows_all:
        return sp.csr_matrix((3 * m, hier.total_voxels))
    mat = sp.coo_matrix(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(3 * m, hier.total_voxels),
    ).tocsr()
    mat.sort_indices()
    return mat


def eval_field(model: KernelModel, fit: FitResult, x):
    """Implicit field f(x) = sum alpha_i K(x, c_i); scalar or (m,)."""
    _check_fit(model, fit)
    x = np.asarray(x, dtype=np.float64)
    vals = field_matrix(model, x.reshape(-1, 3)) @ fit.alpha
    return float(vals[0]) if x.ndim == 1 else vals


def eval_field_grad(model: KernelModel, fit: FitResult, x):
    """Spatial gradient of the implicit field; (3,) or (m, 3)."""
    _check_fit(model, fit)
    x = np.asarray(x, dtype=np.float64)
    grads = (field_grad_matrix(model, x.reshape(-1, 3)) @ fit.alpha).reshape(-1, 3)
    return grads[0] if x.ndim == 1 else grads
