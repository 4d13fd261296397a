"""Diagnostic losses of a fitted field against a dense reference cloud.

These are the supervision terms evaluated as plain Monte-Carlo scalars
over seeded samples; nothing here feeds back into the fit.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyReference, InvalidConfig
from .geometry import OrientedPointCloud
from .kernels import FitResult, KernelModel, eval_field, eval_field_grad
from .neighbors import NeighborIndex


@dataclass(frozen=True)
class DenseReference:
    """Dense oriented reference cloud with a near-surface band radius."""

    cloud: OrientedPointCloud
    epsilon: float

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise InvalidConfig("epsilon must be positive")
        if self.cloud.normals is None:
            raise EmptyReference("dense reference requires normals")
        object.__setattr__(self, "_index", None)

    def index(self) -> NeighborIndex:
        if self._index is None:
            object.__setattr__(self, "_index", NeighborIndex(self.cloud.positions))
        return self._index


def tsdf(x, ref: DenseReference, trunc: Optional[float] = None):
    """Point-to-plane signed distance to the nearest dense point, clamped.

    Sign comes from the nearest point's normal; truncation defaults to the
    reference band radius epsilon. Accepts one point or an (m, 3) batch.
    """
    trunc = ref.epsilon if trunc is None else trunc
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    idx, _ = ref.index().nearest(pts)
    nearest = ref.cloud.positions[idx]
    normal = ref.cloud.normals[idx]
    d = np.einsum("ij,ij->i", pts - nearest, normal)
    d = np.clip(d, -trunc, trunc)
    return float(d[0]) if single else d


def mask_distance(x, cloud: OrientedPointCloud, tau: float):
    """True where the distance to the cloud is at most tau (closed ball)."""
    if tau <= 0.0:
        raise InvalidConfig("tau must be positive")
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    dist = NeighborIndex(cloud.positions).min_distance(pts.reshape(-1, 3))
    keep = dist <= tau
    return bool(keep[0]) if single else keep


def _sample_band(rng, ref: DenseReference, index: NeighborIndex, count: int) -> np.ndarray:
    """Rejection-sample points within epsilon of the dense cloud."""
    pts = ref.cloud.positions
    eps = ref.epsilon
    out = []
    have = 0
    for _ in range(200):
        need = count - have
        if need <= 0:
            break
        seeds = pts[rng.integers(0, pts.shape[0], need)]
        cand = seeds + rng.normal(0.0, 0.5 * eps, (need, 3))
        keep = index.min_distance(cand) <= eps
        kept = cand[keep]
        out.append(kept)
        have += kept.shape[0]
    if have == 0:
        raise EmptyReference("band sampling produced no points")
    return np.concatenate(out, axis=0)[:count]


def loss_report(
    model: KernelModel,
    fit: FitResult,
    ref: DenseReference,
    sample_count: int = 4096,
    beta: float = 0.1,
    eta: float = 0.5,
    seed: int = 0,
    trunc: Optional[float] = None,
) -> dict:
    """Five scalar diagnostics of the fitted field.

    surface:  mean |f| over dense points;
    tsdf:     mean |f - tsdf| over samples in the epsilon band;
    normal:   mean 1 - <grad f / |grad f|, n> over dense points;
    outside:  mean exp(-beta |f|) over point-to-sensor segment samples
              (None when the reference has no sensor origins);
    min_surf: mean (eta/pi) / (eta^2 + f^2) over band samples.

    Same seed => identical report.
    """
    rng = np.random.default_rng(seed)
    pts = ref.cloud.positions
    normals = ref.cloud.normals
    index = ref.index()

    take = min(sample_count, pts.shape[0])
    pick = rng.choice(pts.shape[0], take, replace=False)
    f_surf = eval_field(model, fit, pts[pick])
    l_surf = float(np.mean(np.abs(f_surf)))

    band = _sample_band(rng, ref, index, sample_count)
    f_band = eval_field(model, fit, band)
    l_tsdf = float(np.mean(np.abs(f_band - tsdf(band, ref, trunc))))
    l_min_surf = float(np.mean((eta / np.pi) / (eta**2 + f_band**2)))

    grads = eval_field_grad(model, fit, pts[pick])
    gnorm = np.linalg.norm(grads, axis=1)
    ok = gnorm >= 1e-12
    skipped = int(np.sum(~ok))
    if np.any(ok):
        cos = np.einsum("ij,ij->i", grads[ok] / gnorm[ok, None], normals[pick][ok])
        l_normal = float(np.mean(1.0 - cos))
    else:
        l_normal = None

    l_outside = None
    if ref.cloud.sensor_origins is not None:
        origins = ref.cloud.sensor_origins
        pick_o = rng.integers(0, pts.shape[0], sample_count)
        seg = origins[pick_o] - pts[pick_o]
        seg_len = np.linalg.norm(seg, axis=1)
        usable = seg_len > ref.epsilon
        if np.any(usable):
            t_lo = ref.epsilon / seg_len[usable]
            t = t_lo + (1.0 - t_lo) * rng.random(usable.sum())
            outside = pts[pick_o][usable] + t[:, None] * seg[usable]
            f_out = eval_field(model, fit, outside)
            l_outside = float(np.mean(np.exp(-beta * np.abs(f_out))))

    return {
        "surface": l_surf,
        "tsdf": l_tsdf,
        "normal": l_normal,
        "outside": l_outside,
        "min_surf": l_min_surf,
        "beta": beta,
        "eta": eta,
        "seed": seed,
        "sample_count": sample_count,
        "skipped_normal_samples": skipped,
    }
