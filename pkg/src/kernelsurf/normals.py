"""Normal estimation for point clouds without normals.

Each normal is the smallest-eigenvalue eigenvector of the covariance of
the k nearest neighbors. Orientation comes from sensor origins when
available, otherwise from greedy propagation along a minimum spanning
tree of the k-NN graph weighted by normal disagreement.
"""

import warnings

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree

from .errors import DegenerateNeighborhoodWarning, TooFewPoints
from .geometry import OrientedPointCloud
from .neighbors import NeighborIndex


def estimate_normals(cloud: OrientedPointCloud, k: int = 16) -> OrientedPointCloud:
    """Attach PCA plane normals estimated from each point's k neighbors.

    Clouds that already carry normals are returned unchanged.
    """
    if cloud.has_normals:
        return cloud
    pts = cloud.positions
    n = pts.shape[0]
    if k < 3:
        raise TooFewPoints(f"neighbor count k={k} must be >= 3")
    if n < k + 1:
        raise TooFewPoints(f"need at least k+1={k + 1} points, got {n}")

    index = NeighborIndex(pts)
    nbr = index.knn(pts, k + 1)[:, 1:]  # drop self

    # smallest-eigenvalue eigenvector of each neighborhood covariance
    nb_pts = pts[nbr]  # (n, k, 3)
    centered = nb_pts - nb_pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]

    degenerate = np.linalg.norm(centered, axis=2).max(axis=1) < 1e-12
    if np.any(degenerate):
        warnings.warn(
            f"{int(degenerate.sum())} degenerate neighborhoods (coincident points)",
            DegenerateNeighborhoodWarning,
        )
        normals[degenerate] = np.array([0.0, 0.0, 1.0])
    normals /= np.linalg.norm(normals, axis=1)[:, None]

    if cloud.sensor_origins is not None:
        to_sensor = cloud.sensor_origins - pts
        flip = np.einsum("ij,ij->i", normals, to_sensor) < 0.0
        normals[flip] *= -1.0
    else:
        normals = _propagate_orientation(pts, normals, nbr)

    return cloud.with_normals(normals)


def _propagate_orientation(pts: np.ndarray, normals: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    """Greedy sign propagation along an MST of the k-NN graph.

    Edge weight 1 - |<n_i, n_j>| keeps propagation on smooth paths; each
    connected component is seeded from its lowest-index point.
    """
    n = pts.shape[0]
    rows = np.repeat(np.arange(n), nbr.shape[1])
    cols = nbr.reshape(-1)
    agree = np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols]))
    weights = 1.0 - agree + 1e-9  # strictly positive so MST keeps every edge
    graph = sp.coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()
    graph = graph.maximum(graph.T)  # undirected: keep edge union
    mst = minimum_spanning_tree(graph)
    und = mst + mst.T

    n_comp, labels = connected_components(und, directed=False)
    out = normals.copy()
    for comp in range(n_comp):
        members = np.flatnonzero(labels == comp)
        seed = members[0]
        order, pred = breadth_first_order(und, seed, directed=False)
        for node in order:
            parent = pred[node]
            if parent < 0:
                continue
            if np.dot(out[node], out[parent]) < 0.0:
                out[node] *= -1.0
    return out
