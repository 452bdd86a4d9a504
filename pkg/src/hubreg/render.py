"""Average of registered volumes rendered in the common space."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.ndimage import map_coordinates

from .transforms import HalfTransform, invert_points
from .volume_io import Volume

logger = logging.getLogger(__name__)


def sample_trilinear(v: Volume, points) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear samples of ``v`` at ``(N, 3)`` mm positions and the mask of
    points that fall within the voxel-center lattice."""
    idx = v.mm_to_index(points)
    dims = np.asarray(v.dims)
    tol = 1e-9
    inside = np.all((idx >= -tol) & (idx <= dims - 1 + tol), axis=1)
    coords = np.clip(idx, 0, dims - 1)[:, ::-1].T
    values = map_coordinates(v.array().astype(float), coords, order=1, mode="nearest")
    return values, inside


def common_bounds(volumes, transforms, samples=5) -> tuple[np.ndarray, np.ndarray]:
    """Common-space bounding box of every volume, from a lattice of
    ``samples**3`` points spanning each volume's extent."""
    lo, hi = np.full(3, np.inf), np.full(3, -np.inf)
    for v, tau in zip(volumes, transforms):
        a, b = v.bounds()
        axes = [np.linspace(a[k], b[k], samples) for k in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        q = tau.apply(pts)
        lo, hi = np.minimum(lo, q.min(axis=0)), np.maximum(hi, q.max(axis=0))
    return lo, hi


def render_average(volumes, transforms: list[HalfTransform], spacing=2.0, bounds=None,
                   threads=1) -> tuple[Volume, np.ndarray]:
    """Average the volumes in the common space.

    Each output voxel ``q`` takes the mean, over images whose preimage
    ``tau^-1(q)`` lands inside the image, of the trilinear sample there.
    Voxels where any inversion fails are masked (set to 0). Returns the
    rendered volume and the ``(nz, ny, nx)`` boolean mask of valid voxels.
    """
    if len(volumes) != len(transforms) or not volumes:
        raise ValueError("need one transform per volume")
    lo, hi = common_bounds(volumes, transforms) if bounds is None else map(np.asarray, bounds)
    step = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
    shape = np.maximum(np.floor((hi - lo) / step + 1e-9).astype(int) + 1, 1)
    nx, ny, nz = (int(s) for s in shape)
    xs = lo[0] + step[0] * np.arange(nx)
    ys = lo[1] + step[1] * np.arange(ny)

    def slab(k):
        z = lo[2] + step[2] * k
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        q = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=1)
        total = np.zeros(len(q))
        hits = np.zeros(len(q))
        failed = np.zeros(len(q), dtype=bool)
        for v, tau in zip(volumes, transforms):
            p, ok = invert_points(tau, q)
            vals, inside = sample_trilinear(v, p)
            use = inside & ok
            total[use] += vals[use]
            hits[use] += 1
            failed |= ~ok
        out = np.where(hits > 0, total / np.maximum(hits, 1), 0.0)
        out[failed] = 0.0
        return out.reshape(ny, nx), ~failed.reshape(ny, nx)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            slabs = list(ex.map(slab, range(nz)))
    else:
        slabs = [slab(k) for k in range(nz)]
    data = np.stack([s[0] for s in slabs])
    mask = np.stack([s[1] for s in slabs])
    n_failed = int(mask.size - mask.sum())
    if n_failed > 0.01 * mask.size:
        logger.warning("inversion failed for %d of %d voxels", n_failed, mask.size)
    return Volume.from_array(data.astype(np.float32), tuple(step), tuple(lo)), mask
