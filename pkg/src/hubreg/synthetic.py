"""Synthetic groups with planted ground truth.

A template point cloud lives in the common space. Every image gets a random
ground-truth half-transform (linear jitter followed by zero-mean B-spline
layers) and sees the template through its inverse, plus Gaussian position
noise. Planted inlier matches link instances of the same template point;
planted outliers link random points of two different images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .evaluation import LandmarkSet
from .keypoints import DESCRIPTOR_LENGTH, KeypointSet
from .matching import MatchGraph
from .transforms import DIFFEO_FACTOR, HalfTransform, LinearTransform, SplineGrid, invert_points

# each warp layer stays this far below the diffeomorphism bound
LAYER_FRACTION = 0.95 * DIFFEO_FACTOR


@dataclass
class SyntheticSpec:
    seed: int = 0
    n_images: int = 5
    n_points: int = 2000
    noise_sigma: float = 1.0
    outlier_rate: float = 0.0
    warp_spacing: float = 100.0
    max_displacement: float = 35.0
    domain: tuple = ((0.0, 0.0, 0.0), (400.0, 400.0, 400.0))
    scale_jitter: float = 0.05
    translation_jitter: float = 10.0
    n_landmarks: int = 20
    detection_rate: float = 1.0
    pair_fraction: float = 1.0
    descriptor_sigma: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ValueError("outlier_rate must lie in [0, 1)")
        if self.n_images < 1 or self.n_points < 1:
            raise ValueError("need at least one image and one point")
        if self.noise_sigma < 0 or self.max_displacement < 0 or self.warp_spacing <= 0:
            raise ValueError("noise, displacement and spacing must be non-negative")
        if not 0 < self.detection_rate <= 1 or not 0 < self.pair_fraction <= 1:
            raise ValueError("detection_rate and pair_fraction must lie in (0, 1]")
        if not 0 <= self.scale_jitter < 1:
            raise ValueError("scale_jitter must lie in [0, 1)")

@dataclass
class SyntheticGroup:
    spec: SyntheticSpec
    template: np.ndarray
    keypoints: list[KeypointSet]
    template_ids: list[np.ndarray]
    graph: MatchGraph
    is_outlier: np.ndarray
    truth: list[HalfTransform]
    landmarks: list = field(default_factory=list)

    @property
    def point_sets(self) -> list[np.ndarray]:
        return [k.positions for k in self.keypoints]


def _random_layers(spec: SyntheticSpec, rng) -> list[list[SplineGrid]]:
    """Per-image warp layers whose composed displacement peaks near
    ``max_displacement`` (largest Euclidean norm over the domain and images).

    The zero-mean coefficient pattern is scaled so one layer would reach the
    target; when that needs coefficients at or above the diffeomorphism bound
    the same pattern is repeated as ``k`` layers of ``1/k`` the amplitude.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in spec.domain)
    base = SplineGrid.covering(lo, hi, spec.warp_spacing, pad_cells=2)
    raw = rng.uniform(-1.0, 1.0, size=(spec.n_images, base.n_controls, 3))
    raw -= raw.mean(axis=0)
    if spec.n_images < 2 or spec.max_displacement == 0:
        return [[] for _ in range(spec.n_images)]
    axes = [np.linspace(lo[k], hi[k], 17) for k in range(3)]
    probe = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    peak = max(float(np.max(np.linalg.norm(base.displacement(probe, c)[0], axis=1))) for c in raw)
    coeffs = raw * (spec.max_displacement / peak)
    n_layers = max(1, math.ceil(np.max(np.abs(coeffs)) / (LAYER_FRACTION * spec.warp_spacing)))
    coeffs /= n_layers
    return [[SplineGrid(base.origin, base.spacing, base.dims, c) for _ in range(n_layers)]
            for c in coeffs]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticGroup:
    rng = np.random.default_rng(spec.seed)
    lo, hi = (np.asarray(b, dtype=float) for b in spec.domain)
    template = rng.uniform(lo, hi, size=(spec.n_points, 3))
    template_desc = rng.normal(size=(spec.n_points, DESCRIPTOR_LENGTH))
    template_desc /= np.linalg.norm(template_desc, axis=1, keepdims=True)
    template_scale = rng.uniform(2.0, 8.0, size=spec.n_points)
    template_sign = rng.choice(np.array([-1, 1], dtype=np.int8), size=spec.n_points)

    layers = _random_layers(spec, rng)
    truth, keypoints, ids = [], [], []
    for i in range(spec.n_images):
        s = 1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter, 3)
        t = rng.uniform(-spec.translation_jitter, spec.translation_jitter, 3)
        tau = HalfTransform(LinearTransform(s, t), layers[i], image_id=i)
        truth.append(tau)
        keep = np.flatnonzero(rng.random(spec.n_points) < spec.detection_rate)
        pos, ok = invert_points(tau, template[keep], tol=1e-9, max_iter=500)
        if not np.all(ok):
            raise RuntimeError("ground-truth warp could not be inverted")
        pos = pos + rng.normal(scale=spec.noise_sigma, size=pos.shape) if spec.noise_sigma else pos
        desc = template_desc[keep] + rng.normal(scale=spec.descriptor_sigma, size=(keep.size, DESCRIPTOR_LENGTH))
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
        keypoints.append(KeypointSet(pos, template_scale[keep] / np.cbrt(np.prod(s)),
                                     template_sign[keep], np.ones(keep.size), desc, i))
        ids.append(keep)

    counts = np.array([len(k) for k in keypoints])
    offsets = np.concatenate([[0], np.cumsum(counts)])
    ga, gb = [], []
    for i in range(spec.n_images):
        for j in range(i + 1, spec.n_images):
            common, ii, jj = np.intersect1d(ids[i], ids[j], assume_unique=True, return_indices=True)
            take = rng.random(common.size) < spec.pair_fraction
            ga.append(offsets[i] + ii[take])
            gb.append(offsets[j] + jj[take])
    ga = np.concatenate(ga) if ga else np.zeros(0, dtype=np.int64)
    gb = np.concatenate(gb) if gb else np.zeros(0, dtype=np.int64)
    n_in = ga.size

    n_out = int(round(spec.outlier_rate / (1.0 - spec.outlier_rate) * n_in))
    point_image = np.repeat(np.arange(spec.n_images), counts)
    n_total = int(offsets[-1])
    seen = set((ga * n_total + gb).tolist())
    oa, ob = [], []
    while len(oa) < n_out and spec.n_images > 1:
        need = n_out - len(oa)
        pa = rng.integers(0, n_total, size=2 * need + 16)
        pb = rng.integers(0, n_total, size=2 * need + 16)
        for x, y in zip(pa.tolist(), pb.tolist()):
            if point_image[x] == point_image[y]:
                continue
            if point_image[x] > point_image[y]:
                x, y = y, x
            key = x * n_total + y
            if key in seen:
                continue
            seen.add(key)
            oa.append(x)
            ob.append(y)
            if len(oa) == n_out:
                break
    a = np.concatenate([ga, np.asarray(oa, dtype=np.int64)])
    b = np.concatenate([gb, np.asarray(ob, dtype=np.int64)])
    outlier = np.concatenate([np.zeros(n_in, bool), np.ones(len(oa), bool)])
    order = np.lexsort((b, a))
    graph = MatchGraph(counts, a[order], b[order])
    outlier = outlier[order]

    n_lm = min(spec.n_landmarks, spec.n_points)
    landmarks = []
    for i in range(spec.n_images):
        local = {int(t): k for k, t in enumerate(ids[i])}
        entries = [(f"L{c:03d}", keypoints[i].positions[local[c]].copy())
                   for c in range(n_lm) if c in local]
        landmarks.append(LandmarkSet(i, entries))
    return SyntheticGroup(spec, template, keypoints, ids, graph, outlier, truth, landmarks)
