import numpy as np
import pytest

from kernelsurf import KernelModel, OrientedPointCloud, build_from_input


def sphere_cloud(n, seed=0, radius=1.0, noise=0.0, sensors=False):
    """Uniform sphere samples with exact outward normals."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]
    pos = radius * v
    if noise > 0.0:
        pos = pos + rng.normal(0.0, noise, (n, 3))
    origins = 2.0 * radius * v if sensors else None
    return OrientedPointCloud(pos, v, sensor_origins=origins)


def plane_cloud(n, seed=0, extent=1.0, z=0.0, sensors=False):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-extent, extent, (n, 2))
    pos = np.column_stack([xy, np.full(n, z)])
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    origins = pos + np.array([0.0, 0.0, 5.0]) if sensors else None
    return OrientedPointCloud(pos, normals, sensor_origins=origins)


@pytest.fixture(scope="session")
def small_sphere_model():
    """A modest fitted-ready sphere hierarchy shared by kernel/solver tests."""
    cloud = sphere_cloud(1500, seed=7)
    hier = build_from_input(cloud, 0.15, 3, 2)
    return cloud, hier, KernelModel.constant(hier)
