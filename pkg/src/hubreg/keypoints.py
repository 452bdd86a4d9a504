"""Scale-space blob keypoints on 3D volumes.

Detection uses box-filter approximations of the Hessian evaluated on the
integral volume; responses are ``|det H|`` of the scale-normalized Hessian,
kept only where the Hessian is definite (a bright or dark blob rather than
a saddle or the rim around a blob). Descriptors are upright: 2x2x2
subregions of Haar responses, ``(sum dx, sum dy, sum dz, sum |dx|, sum |dy|,
sum |dz|)`` each, 48 values, unit-normalized.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume_io import IntegralVolume, Volume, box_sums, build_integral

logger = logging.getLogger(__name__)

KP_MAGIC = b"FROGKP01"
DESCRIPTOR_LENGTH = 48


class KeypointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Keypoint:
    position: np.ndarray
    scale: float
    laplacian_sign: int
    response: float
    descriptor: np.ndarray | None
    image_id: int = 0


@dataclass
class KeypointSet:
    """Keypoints of one image, stored column-wise.

    ``positions`` and ``scales`` are in mm. ``descriptors`` is ``None`` until
    :func:`describe` runs.
    """

    positions: np.ndarray
    scales: np.ndarray
    signs: np.ndarray
    responses: np.ndarray
    descriptors: np.ndarray | None = None
    image_id: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        self.scales = np.asarray(self.scales, dtype=float).reshape(n)
        self.signs = np.asarray(self.signs, dtype=np.int8).reshape(n)
        self.responses = np.asarray(self.responses, dtype=float).reshape(n)
        if self.descriptors is not None:
            desc = np.asarray(self.descriptors, dtype=float)
            self.descriptors = desc.reshape(n, desc.shape[-1] if desc.ndim == 2 else -1)

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> Keypoint:
        desc = None if self.descriptors is None else self.descriptors[i]
        return Keypoint(self.positions[i], float(self.scales[i]), int(self.signs[i]),
                        float(self.responses[i]), desc, self.image_id)

    @property
    def descriptor_length(self) -> int:
        return 0 if self.descriptors is None else self.descriptors.shape[1]

    def subset(self, index) -> "KeypointSet":
        return KeypointSet(self.positions[index], self.scales[index], self.signs[index],
                           self.responses[index],
                           None if self.descriptors is None else self.descriptors[index],
                           self.image_id)

    @classmethod
    def empty(cls, image_id=0, descriptor_length=DESCRIPTOR_LENGTH) -> "KeypointSet":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0),
                   np.zeros((0, descriptor_length)), image_id)


@dataclass
class DetectorParams:
    octaves: int = 3
    scales_per_octave: int = 4
    response_threshold: float = 0.0
    max_keypoints: int = 20000
    descriptor_length: int = DESCRIPTOR_LENGTH

    def __post_init__(self):
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if self.scales_per_octave < 3:
            raise ValueError("scales_per_octave must be >= 3")
        if self.max_keypoints < 1:
            raise ValueError("max_keypoints must be >= 1")
        if self.descriptor_length != DESCRIPTOR_LENGTH:
            raise ValueError(f"the built-in descriptor has length {DESCRIPTOR_LENGTH}")


def filter_size(octave: int, level: int) -> int:
    """Box filter side in voxels: 9, 15, 21, 27 then 15, 27, 39, 51, ..."""
    return 3 * ((2 ** (octave + 1)) * (level + 1) + 1)


def filter_scale(size) -> float:
    """Gaussian scale (voxels) matched by a box filter of ``size``.

    Three lobes of width ``l = size / 3`` smoothed by ``l``-wide boxes have a
    second moment of about ``(l / 2)^2`` along the derivative axis and
    ``l^2 / 3`` across it; ``size / 5.4`` sits between the two.
    """
    return np.asarray(size, dtype=float) / 5.4


# --------------------------------------------------------------------------
# detection


def _hessian_responses(table, shape, size, step):
    """Box-filter Hessian on the sampling lattice of one filter size.

    Returns ``(det, trace, valid, definite)`` arrays shaped like the lattice
    ``(ceil(nz/step), ceil(ny/step), ceil(nx/step))``; ``valid`` marks
    centers whose filter fits inside the volume.
    """
    nz, ny, nx = shape
    lobe = size // 3
    h = (lobe - 1) // 2
    radius = (size - 1) // 2
    cz = np.arange(0, nz, step)[:, None, None]
    cy = np.arange(0, ny, step)[None, :, None]
    cx = np.arange(0, nx, step)[None, None, :]
    valid = ((cz >= radius) & (cz < nz - radius) & (cy >= radius) & (cy < ny - radius)
             & (cx >= radius) & (cx < nx - radius))

    def clip(c, lo, hi, n):
        return np.clip(c + lo, 0, n - 1), np.clip(c + hi, 0, n - 1)

    def box(dz, dy, dx):
        z0, z1 = clip(cz, dz[0], dz[1], nz)
        y0, y1 = clip(cy, dy[0], dy[1], ny)
        x0, x1 = clip(cx, dx[0], dx[1], nx)
        vol = (dz[1] - dz[0] + 1) * (dy[1] - dy[0] + 1) * (dx[1] - dx[0] + 1)
        return box_sums(table, z0, z1, y0, y1, x0, x1) / vol

    wide = (-(lobe - 1), lobe - 1)
    centre = (-h, h)
    before = (-h - lobe, -h - 1)
    after = (h + 1, h + lobe)

    dxx = box(wide, wide, before) - 2.0 * box(wide, wide, centre) + box(wide, wide, after)
    dyy = box(wide, before, wide) - 2.0 * box(wide, centre, wide) + box(wide, after, wide)
    dzz = box(before, wide, wide) - 2.0 * box(centre, wide, wide) + box(after, wide, wide)

    pos = (1, lobe)
    neg = (-lobe, -1)
    # quadrant centers sit (lobe+1)/2 from the axis; rescale to the lobe^2
    # normalization of the pure second derivatives
    mix = (lobe / (lobe + 1.0)) ** 2

    def cross(axis_a, axis_b):
        def q(sa, sb):
            spans = [centre, centre, centre]
            spans[axis_a] = sa
            spans[axis_b] = sb
            return box(*spans)
        return mix * (q(pos, pos) + q(neg, neg) - q(pos, neg) - q(neg, pos))

    # axis order for box(): (z, y, x)
    dxy = cross(2, 1)
    dxz = cross(2, 0)
    dyz = cross(1, 0)
    det = (dxx * dyy * dzz + 2.0 * dxy * dyz * dxz
           - dxx * dyz ** 2 - dyy * dxz ** 2 - dzz * dxy ** 2)
    trace = dxx + dyy + dzz
    # blob-like = definite Hessian (Sylvester's criterion, either sign)
    minor2 = dxx * dyy - dxy * dxy
    definite = (minor2 > 0) & (dxx * det > 0) & (dxx * trace > 0)
    return det, trace, valid, definite


def _refine(stack, s, z, y, x):
    """Quadratic sub-sample offset ``(ds, dz, dy, dx)`` clamped to +-0.5."""
    c = stack[s, z, y, x]
    idx = np.array([s, z, y, x])
    grad = np.zeros(4)
    hess = np.zeros((4, 4))
    for a in range(4):
        e = np.zeros(4, dtype=int)
        e[a] = 1
        p = stack[tuple(idx + e)]
        m = stack[tuple(idx - e)]
        grad[a] = 0.5 * (p - m)
        hess[a, a] = p - 2.0 * c + m
        for b in range(a + 1, 4):
            f = np.zeros(4, dtype=int)
            f[b] = 1
            v = 0.25 * (stack[tuple(idx + e + f)] - stack[tuple(idx + e - f)]
                        - stack[tuple(idx - e + f)] + stack[tuple(idx - e - f)])
            hess[a, b] = hess[b, a] = v
    try:
        off = -np.linalg.solve(hess, grad)
    except np.linalg.LinAlgError:
        return np.zeros(4)
    if not np.all(np.isfinite(off)):
        return np.zeros(4)
    return np.clip(off, -0.5, 0.5)


def detect(v: Volume, params: DetectorParams | None = None, iv: IntegralVolume | None = None,
           image_id: int = 0) -> KeypointSet:
    """Blob keypoints of ``v`` without descriptors, strongest first."""
    params = params or DetectorParams()
    iv = iv or build_integral(v)
    table = iv.table()
    shape = v.array().shape
    smallest = filter_size(0, 0)
    if min(shape) < smallest:
        raise ValueError(f"volume {v.dims} is smaller than the {smallest}-voxel filter")
    arr = v.array()
    span = float(arr.max()) - float(arr.min())
    floor = max(params.response_threshold, (1e-2 * span) ** 3)
    spacing = np.asarray(v.spacing)
    mean_spacing = float(np.prod(spacing) ** (1.0 / 3.0))

    found = []  # (response, z, y, x, scale_vox, sign)
    for octave in range(params.octaves):
        step = 2 ** octave
        sizes = [filter_size(octave, k) for k in range(params.scales_per_octave)]
        if sizes[2] > min(shape):
            break
        layers, traces, masks = [], [], []
        for size in sizes:
            if size > min(shape):
                break
            det, trace, valid, definite = _hessian_responses(table, shape, size, step)
            layers.append(np.where(valid & definite, np.abs(det), 0.0))
            traces.append(trace)
            masks.append(valid)
        if len(layers) < 3:
            break
        stack = np.stack(layers)
        peak = ndimage.maximum_filter(stack, size=3, mode="constant", cval=0.0)
        # the whole 3x3x3x3 neighbourhood must be computable, otherwise the
        # filter's border masquerades as a maximum
        full = ndimage.minimum_filter(np.stack(masks), size=3, mode="constant", cval=False)
        cand = (stack == peak) & (stack > floor) & full
        cand[0] = False
        cand[-1] = False
        cand[:, 0] = cand[:, -1] = False
        cand[:, :, 0] = cand[:, :, -1] = False
        cand[:, :, :, 0] = cand[:, :, :, -1] = False
        ss, zz, yy, xx = np.nonzero(cand)
        order = np.lexsort((xx, yy, zz, ss, -stack[ss, zz, yy, xx]))
        kept = set()
        for k in order:
            s, z, y, x = int(ss[k]), int(zz[k]), int(yy[k]), int(xx[k])
            # equal-valued neighbors on a plateau: keep the first only
            if any((s + a, z + b, y + c, x + d) in kept
                   for a in (-1, 0, 1) for b in (-1, 0, 1)
                   for c in (-1, 0, 1) for d in (-1, 0, 1)):
                continue
            kept.add((s, z, y, x))
            off = _refine(stack, s, z, y, x)
            size = sizes[s] + off[0] * (sizes[1] - sizes[0])
            found.append((
                float(stack[s, z, y, x]),
                (z + off[1]) * step, (y + off[2]) * step, (x + off[3]) * step,
                float(filter_scale(size)),
                1 if traces[s][z, y, x] > 0 else -1,
            ))

    if not found:
        kps = KeypointSet.empty(image_id)
        kps.descriptors = None
        return kps
    rec = np.array(found, dtype=float)
    ijk = rec[:, [3, 2, 1]]
    pos = np.asarray(v.origin) + spacing * ijk
    lo, hi = v.bounds()
    pos = np.clip(pos, lo, hi)
    scales = rec[:, 4] * mean_spacing
    order = np.lexsort((pos[:, 0], pos[:, 1], pos[:, 2], -rec[:, 0]))
    order = _suppress_across_octaves(pos, scales, order)
    order = order[:params.max_keypoints]
    return KeypointSet(pos[order], scales[order],
                       rec[order, 5].astype(np.int8), rec[order, 0], None, image_id)


def _suppress_across_octaves(pos, scales, order):
    """Drop detections of the same blob from overlapping octaves.

    Walking in ``order`` (strongest first), a keypoint is dropped when an
    already kept one lies closer than the smaller of the two scales and the
    scales differ by less than a factor 2.
    """
    tree = cKDTree(pos)
    alive = np.ones(len(pos), dtype=bool)
    kept = []
    for k in order:
        if not alive[k]:
            continue
        kept.append(k)
        for j in tree.query_ball_point(pos[k], scales[k]):
            if j != k and abs(np.log(scales[j] / scales[k])) < np.log(2.0) \
                    and np.linalg.norm(pos[j] - pos[k]) < min(scales[j], scales[k]):
                alive[j] = False
    return np.asarray(kept, dtype=np.int64)


# --------------------------------------------------------------------------
# description


def _descriptor_geometry(scale_vox):
    step = 2 * max(1, int(round(scale_vox / 2.0)))
    offsets = ((np.arange(8) - 3.5) * step).astype(int)
    return step, offsets


def describe(iv: IntegralVolume, kps: KeypointSet, volume: Volume, chunk=1024) -> KeypointSet:
    """Attach descriptors; keypoints whose support leaves the volume are dropped."""
    if len(kps) == 0:
        out = kps.subset(np.arange(0))
        out.descriptors = np.zeros((0, DESCRIPTOR_LENGTH))
        return out
    table = iv.table()
    nz, ny, nx = volume.array().shape
    n = np.array([nx, ny, nz])
    mean_spacing = float(np.prod(volume.spacing) ** (1.0 / 3.0))
    centre = np.rint(volume.mm_to_index(kps.positions)).astype(int)
    scale_vox = kps.scales / mean_spacing

    keep = np.zeros(len(kps), dtype=bool)
    desc = np.zeros((len(kps), DESCRIPTOR_LENGTH))
    steps = np.array([_descriptor_geometry(s)[0] for s in scale_vox])
    for step in np.unique(steps):
        group = np.nonzero(steps == step)[0]
        _, offsets = _descriptor_geometry(step)
        reach = int(np.max(np.abs(offsets))) + step
        inside = np.all((centre[group] - reach >= 0) & (centre[group] + reach <= n - 1), axis=1)
        group = group[inside]
        for start in range(0, len(group), chunk):
            sel = group[start:start + chunk]
            desc[sel] = _haar_descriptors(table, centre[sel], offsets, step)
            keep[sel] = True

    norms = np.linalg.norm(desc, axis=1)
    keep &= norms > 0
    desc[keep] /= norms[keep, None]
    out = kps.subset(np.nonzero(keep)[0])
    out.descriptors = desc[keep]
    return out


def _haar_descriptors(table, centres, offsets, hw):
    """Raw (unnormalized) descriptors for ``centres`` ``(K, 3)`` (x, y, z)."""
    ox, oy, oz = np.meshgrid(offsets, offsets, offsets, indexing="ij")
    sx = centres[:, 0, None] + ox.reshape(-1)[None, :]
    sy = centres[:, 1, None] + oy.reshape(-1)[None, :]
    sz = centres[:, 2, None] + oz.reshape(-1)[None, :]

    def haar(axis):
        lo = [sz - hw, sy - hw, sx - hw]
        hi = [sz + hw - 1, sy + hw - 1, sx + hw - 1]
        a = 2 - axis  # table axis order is (z, y, x)
        plus_lo = list(lo)
        plus_lo[a] = [sz, sy, sx][a]
        minus_hi = list(hi)
        minus_hi[a] = [sz, sy, sx][a] - 1
        plus = box_sums(table, plus_lo[0], hi[0], plus_lo[1], hi[1], plus_lo[2], hi[2])
        minus = box_sums(table, lo[0], minus_hi[0], lo[1], minus_hi[1], lo[2], minus_hi[2])
        return plus - minus

    d = np.stack([haar(0), haar(1), haar(2)], axis=-1)  # (K, 512, 3)
    k = len(centres)
    # sample (ix, iy, iz) -> subregion (iz//4, iy//4, ix//4)
    d = d.reshape(k, 2, 4, 2, 4, 2, 4, 3)  # ix, iy, iz halves
    sums = d.sum(axis=(2, 4, 6))
    abss = np.abs(d).sum(axis=(2, 4, 6))
    feats = np.concatenate([sums, abss], axis=-1)  # (K, 2x, 2y, 2z, 6)
    return feats.transpose(0, 3, 2, 1, 4).reshape(k, DESCRIPTOR_LENGTH)


def extract(v: Volume, params: DetectorParams | None = None, image_id: int = 0) -> KeypointSet:
    """Detect and describe, then keep the strongest ``max_keypoints``."""
    params = params or DetectorParams()
    iv = build_integral(v)
    # describe more than needed since border keypoints get dropped
    wide = DetectorParams(params.octaves, params.scales_per_octave,
                          params.response_threshold, 2 * params.max_keypoints + 100,
                          params.descriptor_length)
    kps = describe(iv, detect(v, wide, iv, image_id), v)
    return kps.subset(np.arange(min(len(kps), params.max_keypoints)))


# --------------------------------------------------------------------------
# file format


def save_keypoints(path, kps: KeypointSet) -> None:
    d = kps.descriptor_length if kps.descriptors is not None else DESCRIPTOR_LENGTH
    rec = np.dtype([("pos", "<f4", (3,)), ("scale", "<f4"), ("response", "<f4"),
                    ("sign", "i1"), ("desc", "<f4", (d,))])
    arr = np.zeros(len(kps), dtype=rec)
    arr["pos"] = kps.positions
    arr["scale"] = kps.scales
    arr["response"] = kps.responses
    arr["sign"] = kps.signs
    if kps.descriptors is not None:
        arr["desc"] = kps.descriptors
    with open(path, "wb") as fh:
        fh.write(KP_MAGIC)
        fh.write(struct.pack("<II", len(kps), d))
        fh.write(arr.tobytes())


def load_keypoints(path, image_id: int = 0, descriptor_length: int | None = None) -> KeypointSet:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != KP_MAGIC:
        raise KeypointFormatError(f"{path}: not a keypoint file (bad magic)")
    count, d = struct.unpack_from("<II", data, 8)
    if descriptor_length is not None and d != descriptor_length:
        raise KeypointFormatError(f"{path}: descriptor length {d}, expected {descriptor_length}")
    rec = np.dtype([("pos", "<f4", (3,)), ("scale", "<f4"), ("response", "<f4"),
                    ("sign", "i1"), ("desc", "<f4", (d,))])
    if len(data) - 16 != count * rec.itemsize:
        raise KeypointFormatError(f"{path}: truncated or oversized keypoint payload")
    arr = np.frombuffer(data, dtype=rec, count=count, offset=16)
    return KeypointSet(arr["pos"].astype(float), arr["scale"].astype(float),
                       arr["sign"].astype(np.int8), arr["response"].astype(float),
                       arr["desc"].astype(float).reshape(count, d), image_id)
