"""Command-line entry points: reconstruct, reconstruct-large, evaluate, diagnose.

Failures exit with status 1 and a single machine-parsable line
``{"code": ..., "message": ...}`` on stderr. Log level comes from the
KERNELSURF_LOG environment variable.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from .diagnostics import DenseReference, loss_report
from .errors import InvalidConfig, IoError, KernelSurfError
from .extract import ExtractionConfig, extract, sample_colors
from .hierarchy import build_from_input
from .kernels import KernelModel
from .metrics import metric_report
from .model_io import load_model
from .normals import estimate_normals
from .outofcore import reconstruct_large
from .pointcloud_io import load_mesh, load_point_cloud, load_point_colors, save_mesh
from .solver import SolveConfig, dump_matrix, solve, solve_color

logger = logging.getLogger("kernelsurf")

# dataset presets: finest voxel size, adaptive depth, kernel feature dim
PRESETS = {
    "shapenet": {"voxel_size": 0.02, "adaptive_depth": 1, "feature_dim": 16},
    "abc": {"voxel_size": 0.02, "adaptive_depth": 2, "feature_dim": 4},
    "room": {"voxel_size": 0.01, "adaptive_depth": 2, "feature_dim": 4},
    "carla": {"voxel_size": 0.1, "adaptive_depth": 2, "feature_dim": 4},
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="input point cloud (.xyz or .ply)")
    p.add_argument("--output", help="output mesh path (.obj or .ply)")
    p.add_argument("--voxel-size", type=float, default=0.02)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--adaptive-depth", type=int, default=2)
    p.add_argument("--model", help="kernel model file (default: constant field)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--mask", choices=["none", "distance"], default="none")
    p.add_argument("--mask-tau", type=float, help="default 2 * voxel size")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--max-iters", type=int, default=2000)
    p.add_argument("--color", action="store_true", help="solve and attach vertex colors")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--estimate-normals", type=int, metavar="K", default=16,
                   help="neighborhood size when the input lacks normals")
    p.add_argument("--dump-matrices", metavar="DIR")
    p.add_argument("--config", help="flat key/value file; flags still win")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kernelsurf")
    sub = parser.add_subparsers(dest="command", required=True)

    rec = sub.add_parser("reconstruct", help="fit a cloud and extract a mesh")
    _add_common(rec)

    large = sub.add_parser("reconstruct-large", help="chunked out-of-core reconstruction")
    _add_common(large)
    large.add_argument("--chunk-size", type=float, default=51.2)
    large.add_argument("--overlap", type=float, help="default 6 * voxel size")
    large.add_argument("--persist-dir", help="chunk checkpoint directory")

    ev = sub.add_parser("evaluate", help="compare a predicted mesh to ground truth")
    ev.add_argument("--gt", required=True, help="ground-truth mesh")
    ev.add_argument("--pred", required=True, help="predicted mesh")
    ev.add_argument("--xi", type=float, default=0.01)
    ev.add_argument("--samples", type=int, default=100_000)
    ev.add_argument("--seed", type=int, default=0)

    diag = sub.add_parser("diagnose", help="fit and report diagnostic losses")
    _add_common(diag)
    diag.add_argument("--dense", required=True, help="dense reference cloud")
    diag.add_argument("--epsilon", type=float, help="band radius, default 2 * voxel size")
    diag.add_argument("--loss-samples", type=int, default=4096)
    return parser


def _apply_config_file(parser, argv):
    """Config file values become parser defaults, so explicit flags win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    try:
        with open(known.config) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read config {known.config}: {exc}") from exc
    values = {}
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, val = line.split("=", 1)
        else:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise InvalidConfig(f"bad config line: {raw!r}")
            key, val = parts
        values[key.strip().replace("-", "_")] = val.strip()
    for sub_action in parser._subparsers._group_actions[0].choices.values():
        defaults = {}
        for action in sub_action._actions:
            if action.dest in values:
                raw = values[action.dest]
                if action.type is not None:
                    defaults[action.dest] = action.type(raw)
                elif isinstance(action.const, bool) or isinstance(action.default, bool):
                    defaults[action.dest] = raw.lower() in ("1", "true", "yes")
                else:
                    defaults[action.dest] = raw
        sub_action.set_defaults(**defaults)


def _apply_preset(args) -> None:
    if getattr(args, "preset", None):
        preset = PRESETS[args.preset]
        args.voxel_size = preset["voxel_size"]
        args.adaptive_depth = preset["adaptive_depth"]
        args.feature_dim = preset["feature_dim"]
    else:
        args.feature_dim = 4


def _prepare_cloud(args):
    cloud = load_point_cloud(args.input)
    if not cloud.has_normals:
        logger.info("estimating normals with k=%d", args.estimate_normals)
        cloud = estimate_normals(cloud, args.estimate_normals)
    return cloud


def _solve_config(args) -> SolveConfig:
    return SolveConfig(tolerance=args.tolerance, max_iterations=args.max_iters)


def cmd_reconstruct(args) -> int:
    t0 = time.perf_counter()
    _apply_preset(args)
    if args.voxel_size <= 0.0:
        raise InvalidConfig("--voxel-size must be positive")
    if args.output is None:
        raise InvalidConfig("--output is required")
    cloud = _prepare_cloud(args)
    t_load = time.perf_counter()

    hier = build_from_input(
        cloud, args.voxel_size, args.levels, args.adaptive_depth,
        feature_dim=args.feature_dim,
    )
    model = load_model(args.model, hier) if args.model else KernelModel.constant(hier)
    t_build = time.perf_counter()

    fit = solve(model, cloud, _solve_config(args))
    t_solve = time.perf_counter()
    if args.dump_matrices:
        from .solver import assemble_G, assemble_Q

        os.makedirs(args.dump_matrices, exist_ok=True)
        dump_matrix(assemble_G(model, cloud), os.path.join(args.dump_matrices, "G.txt"))
        dump_matrix(assemble_Q(model), os.path.join(args.dump_matrices, "Q.txt"))

    tau = args.mask_tau if args.mask_tau else 2.0 * args.voxel_size
    cfg = ExtractionConfig(mask_mode=args.mask, mask_tau=tau)
    mesh = extract(model, fit, hier, cfg, cloud=cloud)
    if args.color:
        colors = load_point_colors(args.input)
        gamma = solve_color(model, colors, cloud, _solve_config(args))
        mesh = sample_colors(mesh, model, gamma)
    t_extract = time.perf_counter()

    save_mesh(mesh, args.output)
    stats = fit.solver_stats
    print(
        json.dumps(
            {
                "vertices": mesh.n_vertices,
                "triangles": mesh.n_triangles,
                "voxels": hier.total_voxels,
                "solver": stats,
                "seconds": {
                    "load": round(t_load - t0, 3),
                    "build": round(t_build - t_load, 3),
                    "solve": round(t_solve - t_build, 3),
                    "extract": round(t_extract - t_solve, 3),
                },
            }
        )
    )
    return 0


def cmd_reconstruct_large(args) -> int:
    t0 = time.perf_counter()
    _apply_preset(args)
    if args.voxel_size <= 0.0:
        raise InvalidConfig("--voxel-size must be positive")
    if args.output is None:
        raise InvalidConfig("--output is required")
    cloud = _prepare_cloud(args)
    tau = args.mask_tau if args.mask_tau else 2.0 * args.voxel_size
    mesh = reconstruct_large(
        cloud,
        args.voxel_size,
        levels=args.levels,
        adaptive_depth=args.adaptive_depth,
        chunk_size=args.chunk_size,
        overlap=args.overlap,
        mask_tau=tau,
        solve_cfg=_solve_config(args),
        workers=args.threads,
        persist_dir=args.persist_dir,
        trim=args.mask != "none",
    )
    save_mesh(mesh, args.output)
    print(
        json.dumps(
            {
                "vertices": mesh.n_vertices,
                "triangles": mesh.n_triangles,
                "seconds": round(time.perf_counter() - t0, 3),
            }
        )
    )
    return 0


def cmd_evaluate(args) -> int:
    gt = load_mesh(args.gt)
    pred = load_mesh(args.pred)
    report = metric_report(gt, pred, xi=args.xi, sample_count=args.samples, seed=args.seed)
    print(json.dumps(report))
    return 0


def cmd_diagnose(args) -> int:
    _apply_preset(args)
    if args.voxel_size <= 0.0:
        raise InvalidConfig("--voxel-size must be positive")
    cloud = _prepare_cloud(args)
    dense = load_point_cloud(args.dense)
    if not dense.has_normals:
        dense = estimate_normals(dense, args.estimate_normals)
    eps = args.epsilon if args.epsilon else 2.0 * args.voxel_size
    hier = build_from_input(
        cloud, args.voxel_size, args.levels, args.adaptive_depth,
        feature_dim=args.feature_dim,
    )
    model = load_model(args.model, hier) if args.model else KernelModel.constant(hier)
    fit = solve(model, cloud, _solve_config(args))
    report = loss_report(
        model, fit, DenseReference(dense, eps), sample_count=args.loss_samples, seed=args.seed
    )
    report["solver"] = fit.solver_stats
    print(json.dumps(report))
    return 0


_COMMANDS = {
    "reconstruct": cmd_reconstruct,
    "reconstruct-large": cmd_reconstruct_large,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    level = os.environ.get("KERNELSURF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(name)s %(levelname)s %(message)s")
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = _build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except KernelSurfError as exc:
        print(json.dumps({"code": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
