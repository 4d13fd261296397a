"""kernelsurf: surface reconstruction via hierarchical compactly supported kernels.

Pipeline: oriented points -> sparse voxel hierarchy -> sparse SPD solve for
per-voxel kernel coefficients -> dual marching cubes on the finest level.
"""

from . import errors
from .diagnostics import DenseReference, loss_report, mask_distance, tsdf
from .extract import ExtractionConfig, extract, sample_colors
from .geometry import OrientedPointCloud, TriangleMesh
from .hierarchy import VoxelHierarchy, VoxelKey, build_from_dense, build_from_input
from .kernels import (
    FeatureFieldSpec,
    FitResult,
    KernelModel,
    MLPWeights,
    bezier_kernel,
    bspline,
    bspline_deriv,
    eval_field,
    eval_field_grad,
    eval_kernel,
    eval_kernel_grad,
    eval_phi,
)
from .metrics import chamfer, fscore, metric_report, normal_consistency, sample_mesh
from .model_io import load_model, save_model
from .normals import estimate_normals
from .outofcore import ChunkLayout, merge_eval, plan_chunks, reconstruct_large
from .pointcloud_io import (
    load_mesh,
    load_point_cloud,
    load_point_colors,
    save_mesh,
    save_point_cloud,
)
from .solver import SolveConfig, assemble_G, assemble_Q, solve, solve_color

__version__ = "0.1.0"

__all__ = [
    "DenseReference",
    "ExtractionConfig",
    "FeatureFieldSpec",
    "FitResult",
    "KernelModel",
    "MLPWeights",
    "OrientedPointCloud",
    "SolveConfig",
    "TriangleMesh",
    "VoxelHierarchy",
    "VoxelKey",
    "ChunkLayout",
    "assemble_G",
    "assemble_Q",
    "bezier_kernel",
    "bspline",
    "bspline_deriv",
    "build_from_dense",
    "build_from_input",
    "chamfer",
    "errors",
    "estimate_normals",
    "eval_field",
    "eval_field_grad",
    "eval_kernel",
    "eval_kernel_grad",
    "eval_phi",
    "extract",
    "fscore",
    "load_mesh",
    "load_model",
    "load_point_cloud",
    "load_point_colors",
    "loss_report",
    "mask_distance",
    "merge_eval",
    "metric_report",
    "normal_consistency",
    "plan_chunks",
    "reconstruct_large",
    "sample_colors",
    "sample_mesh",
    "save_mesh",
    "save_model",
    "save_point_cloud",
    "solve",
    "solve_color",
    "tsdf",
]
