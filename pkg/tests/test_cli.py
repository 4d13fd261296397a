"""End-to-end CLI behavior: exit codes, outputs, determinism, config files."""

import json

import numpy as np
import pytest

import kernelsurf as ks
from kernelsurf.cli import main
from tests.conftest import sphere_cloud


@pytest.fixture(scope="module")
def sphere_ply(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "sphere.ply"
    ks.save_point_cloud(sphere_cloud(3000, seed=0), path)
    return str(path)


def run(args, capsys):
    code = main(args)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


BASE = ["--voxel-size", "0.1", "--levels", "2", "--adaptive-depth", "1",
        "--max-iters", "3000"]


class TestReconstruct:
    def test_smoke(self, sphere_ply, tmp_path, capsys):
        out = tmp_path / "mesh.ply"
        code, stdout, _ = run(
            ["reconstruct", "--input", sphere_ply, "--output", str(out)] + BASE, capsys
        )
        assert code == 0
        stats = json.loads(stdout)
        assert stats["triangles"] > 100 and stats["solver"]["converged"]
        mesh = ks.load_mesh(out)
        assert np.max(np.abs(np.linalg.norm(mesh.vertices, axis=1) - 1.0)) < 0.1

    def test_missing_file_is_io_error(self, tmp_path, capsys):
        code, _, stderr = run(
            ["reconstruct", "--input", str(tmp_path / "nope.ply"), "--output",
             str(tmp_path / "m.ply")], capsys,
        )
        assert code == 1
        assert json.loads(stderr)["code"] == "IoError"

    def test_zero_voxel_size_is_invalid_config(self, sphere_ply, tmp_path, capsys):
        code, _, stderr = run(
            ["reconstruct", "--input", sphere_ply, "--output", str(tmp_path / "m.ply"),
             "--voxel-size", "0"], capsys,
        )
        assert code == 1
        assert json.loads(stderr)["code"] == "InvalidConfig"

    def test_byte_identical_reruns(self, sphere_ply, tmp_path, capsys):
        m1, m2 = tmp_path / "a.ply", tmp_path / "b.ply"
        for out in (m1, m2):
            code, _, _ = run(
                ["reconstruct", "--input", sphere_ply, "--output", str(out)] + BASE,
                capsys,
            )
            assert code == 0
        assert m1.read_bytes() == m2.read_bytes()

    def test_normals_estimated_when_absent(self, tmp_path, capsys):
        cloud = sphere_cloud(2000, seed=1, sensors=True)
        bare = ks.OrientedPointCloud(cloud.positions, sensor_origins=cloud.sensor_origins)
        path = tmp_path / "bare.xyz"
        np.savetxt(path, bare.positions)
        code, stdout, _ = run(
            ["reconstruct", "--input", str(path), "--output", str(tmp_path / "m.obj"),
             "--estimate-normals", "12"] + BASE, capsys,
        )
        assert code == 0
        assert json.loads(stdout)["triangles"] > 100

    def test_mask_flag(self, sphere_ply, tmp_path, capsys):
        code, stdout, _ = run(
            ["reconstruct", "--input", sphere_ply, "--output", str(tmp_path / "m.ply"),
             "--mask", "distance"] + BASE, capsys,
        )
        assert code == 0
        assert json.loads(stdout)["triangles"] > 100

    def test_dump_matrices(self, sphere_ply, tmp_path, capsys):
        dump_dir = tmp_path / "mats"
        code, _, _ = run(
            ["reconstruct", "--input", sphere_ply, "--output", str(tmp_path / "m.ply"),
             "--dump-matrices", str(dump_dir)] + BASE, capsys,
        )
        assert code == 0
        assert (dump_dir / "G.txt").exists() and (dump_dir / "Q.txt").exists()

    def test_model_file_used(self, sphere_ply, tmp_path, capsys):
        # build a constant-field model file against the same hierarchy shape
        cloud = ks.load_point_cloud(sphere_ply)
        hier = ks.build_from_input(cloud, 0.1, 2, 1)
        model_path = tmp_path / "model.ksm"
        ks.save_model(ks.KernelModel.constant(hier), model_path)
        code, stdout, _ = run(
            ["reconstruct", "--input", sphere_ply, "--output", str(tmp_path / "m.ply"),
             "--model", str(model_path)] + BASE, capsys,
        )
        assert code == 0

    def test_config_file_defaults_and_flag_override(self, sphere_ply, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("voxel-size 0.12\nlevels 2\nadaptive-depth 1\nmax-iters 3000\n")
        out = tmp_path / "m.ply"
        code, stdout, _ = run(
            ["reconstruct", "--input", sphere_ply, "--output", str(out),
             "--config", str(cfg)], capsys,
        )
        assert code == 0
        voxels_cfg = json.loads(stdout)["voxels"]
        # explicit flag wins over the file value
        code, stdout, _ = run(
            ["reconstruct", "--input", sphere_ply, "--output", str(out),
             "--config", str(cfg), "--voxel-size", "0.2"], capsys,
        )
        assert code == 0
        assert json.loads(stdout)["voxels"] < voxels_cfg


class TestColor:
    def test_colored_cloud_yields_colored_mesh(self, tmp_path, capsys):
        cloud = sphere_cloud(2500, seed=5)
        colors = np.zeros((len(cloud), 3))
        colors[:, 0] = (cloud.positions[:, 2] + 1.0) / 2.0
        path = tmp_path / "colored.ply"
        ks.save_point_cloud(cloud, path, colors=colors)
        out = tmp_path / "m.ply"
        code, _, _ = run(
            ["reconstruct", "--input", str(path), "--output", str(out), "--color"] + BASE,
            capsys,
        )
        assert code == 0
        mesh = ks.load_mesh(out)
        assert mesh.vertex_colors is not None
        # red channel tracks height
        top = mesh.vertices[:, 2] > 0.7
        bottom = mesh.vertices[:, 2] < -0.7
        assert mesh.vertex_colors[top, 0].mean() > mesh.vertex_colors[bottom, 0].mean() + 0.4

    def test_preset_values(self):
        from kernelsurf.cli import PRESETS

        assert PRESETS["shapenet"] == {"voxel_size": 0.02, "adaptive_depth": 1, "feature_dim": 16}
        assert PRESETS["abc"] == {"voxel_size": 0.02, "adaptive_depth": 2, "feature_dim": 4}
        assert PRESETS["room"] == {"voxel_size": 0.01, "adaptive_depth": 2, "feature_dim": 4}
        assert PRESETS["carla"] == {"voxel_size": 0.1, "adaptive_depth": 2, "feature_dim": 4}


class TestEvaluate:
    def test_self_comparison_is_perfect(self, tmp_path, capsys):
        mesh = ks.TriangleMesh(
            np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float),
            np.array([[0, 1, 2], [1, 3, 2]]),
        )
        path = tmp_path / "m.ply"
        ks.save_mesh(mesh, path)
        code, stdout, _ = run(
            ["evaluate", "--gt", str(path), "--pred", str(path), "--samples", "5000"],
            capsys,
        )
        assert code == 0
        report = json.loads(stdout)
        assert report["chamfer"]["dc"] == 0.0
        assert report["fscore"]["f"] == 100.0
        assert report["fscore"]["xi"] == 0.01  # default threshold
        assert report["normal_consistency"] == 1.0

    def test_malformed_pred_mesh(self, tmp_path, capsys):
        good = tmp_path / "good.ply"
        ks.save_mesh(
            ks.TriangleMesh(np.eye(3), np.array([[0, 1, 2]])), good
        )
        bad = tmp_path / "bad.ply"
        bad.write_text("this is not a mesh\n")
        code, _, stderr = run(["evaluate", "--gt", str(good), "--pred", str(bad)], capsys)
        assert code == 1
        assert json.loads(stderr)["code"] == "ParseError"


class TestReconstructLarge:
    def test_smoke(self, tmp_path, capsys):
        rng = np.random.default_rng(2)
        xy = rng.uniform(0, 6.0, (20_000, 2))
        pos = np.column_stack([xy, 0.1 * np.sin(xy[:, 0])])
        grad = np.column_stack([-0.1 * np.cos(xy[:, 0]), np.zeros(len(xy)), np.ones(len(xy))])
        normals = grad / np.linalg.norm(grad, axis=1)[:, None]
        path = tmp_path / "terrain.ply"
        ks.save_point_cloud(ks.OrientedPointCloud(pos, normals), path)
        out = tmp_path / "terrain_mesh.ply"
        code, stdout, _ = run(
            ["reconstruct-large", "--input", str(path), "--output", str(out),
             "--voxel-size", "0.1", "--levels", "2", "--adaptive-depth", "1",
             "--chunk-size", "3.2", "--overlap", "0.4", "--max-iters", "3000",
             "--mask", "distance", "--threads", "1"],
            capsys,
        )
        assert code == 0
        assert json.loads(stdout)["triangles"] > 500


class TestDiagnose:
    def test_report_json(self, sphere_ply, tmp_path, capsys):
        code, stdout, _ = run(
            ["diagnose", "--input", sphere_ply, "--dense", sphere_ply,
             "--loss-samples", "256"] + BASE, capsys,
        )
        assert code == 0
        report = json.loads(stdout)
        for key in ("surface", "tsdf", "normal", "outside", "min_surf", "solver"):
            assert key in report
        assert report["outside"] is None  # sphere file has no sensor origins
