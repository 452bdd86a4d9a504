"""Joint optimization of all half-transforms.

Stage one matches weighted means and variances of matched keypoints to
estimate a per-image anisotropic scale and translation. Stage two runs
fixed-step gradient descent on the weighted match energy over a pyramid of
B-spline grids, keeping the per-control-point sum of coefficients over
images at zero and freezing/composing grids whenever a control point would
move by ``0.4 * spacing`` or more.

The descent step is ``X <- X - alpha * grad / mass`` where ``mass`` is, per
control point, the largest over images of ``sum_p b_j(p) * sum_m s_m^2``
(basis weight times the squared match scaling of every incident match). It
bounds the curvature of the energy along each coefficient, which makes
``alpha`` a dimensionless fraction that does not depend on keypoint density.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .matching import MatchGraph
from .robust import MixtureParams, update_all_weights
from .transforms import DIFFEO_FACTOR, HalfTransform, LinearTransform, SplineGrid

logger = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    levels: tuple[float, ...] = (200.0, 100.0, 50.0)
    iterations_per_level: int = 200
    alpha: float = 0.02
    init_iterations: int = 50
    gamma: float = 0.5
    theta_refresh_period: int = 10
    grid_padding: int = 2
    threads: int = 1

    def __post_init__(self):
        self.levels = tuple(float(g) for g in self.levels)
        if not self.levels or min(self.levels) <= 0:
            raise ValueError("grid spacings must be positive")
        if self.iterations_per_level < 0 or self.init_iterations < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.theta_refresh_period < 1:
            raise ValueError("theta_refresh_period must be >= 1")


class BundleState:
    """Everything the optimizer mutates.

    ``common`` caches the common-space position of every keypoint (global
    indexing of ``graph``); ``base`` holds positions before the active grids,
    so ``common = base + B X`` during a level.
    """

    def __init__(self, point_sets, graph: MatchGraph, transforms=None, threads=1):
        self.points = np.concatenate([np.asarray(p, dtype=float).reshape(-1, 3)
                                      for p in point_sets]) if len(point_sets) else np.zeros((0, 3))
        if len(self.points) != graph.n_points or len(point_sets) != graph.n_images:
            raise ValueError("keypoint sets do not match the graph")
        self.graph = graph
        n = graph.n_images
        self.transforms = transforms or [HalfTransform(image_id=i) for i in range(n)]
        self.thetas: list[MixtureParams | None] = [None] * n
        self.basis: list[sparse.csr_matrix] | None = None
        self.trace: list[dict] = []
        self.theta_history: list[dict] = []
        self.constraint_residuals: list[float] = []
        self.compositions: list[int] = []
        self.iteration = 0
        self.post_init_common = None
        self.basis_t: list[sparse.csr_matrix] | None = None
        self.executor = ThreadPoolExecutor(threads) if threads > 1 else None
        self.common = self.apply_all()
        self.base = self.common.copy()
        self._resid = None

    def positions_changed(self) -> None:
        """Invalidate quantities derived from ``common``."""
        self._resid = None

    def residuals(self) -> np.ndarray:
        """``M (P + B X)``: per-match common-space difference vectors."""
        if self._resid is None:
            self._resid = self.graph.incidence_apply(self.common)
        return self._resid

    @property
    def n_images(self) -> int:
        return self.graph.n_images

    def image_slice(self, i) -> slice:
        o = self.graph.offsets
        return slice(int(o[i]), int(o[i + 1]))

    def map_images(self, fn):
        if self.executor is None:
            return [fn(i) for i in range(self.n_images)]
        return list(self.executor.map(fn, range(self.n_images)))

    def apply_all(self) -> np.ndarray:
        out = np.empty_like(self.points)
        for i, tau in enumerate(self.transforms):
            sl = self.image_slice(i)
            if sl.stop > sl.start:
                out[sl] = tau.apply(self.points[sl])
        return out

    def refresh_weights(self) -> None:
        d = np.sqrt(np.einsum("md,md->m", self.residuals(), self.residuals()))
        self.thetas = update_all_weights(self.graph, self.common, self.thetas, self.executor, d)
        for i, th in enumerate(self.thetas):
            self.theta_history.append({"iter": self.iteration, "image": i,
                                       "s1": th.s1, "s2": th.s2, "r": th.r})

    def match_scaling(self) -> np.ndarray:
        """``s^2`` of every match: ``w * (1/|N(a)| + 1/|N(b)|)``."""
        g = self.graph
        deg = g.degree.astype(float)
        return g.weights * (1.0 / deg[g.a] + 1.0 / deg[g.b])

    def active_coefficients(self) -> list[np.ndarray]:
        return [tau.grids[-1].coeffs for tau in self.transforms]

    def record(self, level: int) -> None:
        d2 = np.einsum("md,md->m", self.residuals(), self.residuals())
        d = np.sqrt(d2)
        w = self.graph.weights
        e = float(self.match_scaling() @ d2) if self.graph.n_matches else 0.0
        self.trace.append({
            "iter": self.iteration,
            "level": level,
            "energy": e,
            "sqrt_energy": math.sqrt(max(e, 0.0)),
            "mean_weighted_distance": float(w @ d / w.sum()) if w.sum() > 0 else 0.0,
        })

    def close(self) -> None:
        if self.executor is not None:
            self.executor.shutdown()
            self.executor = None


# --------------------------------------------------------------------------
# energy and gradient


def energy(state: BundleState) -> float:
    """Sum over matches of ``s^2 * d^2`` at the cached positions."""
    g = state.graph
    if g.n_matches == 0:
        return 0.0
    r = state.residuals()
    return float(np.sum(state.match_scaling() * np.einsum("md,md->m", r, r)))


def energy_by_points(state: BundleState) -> float:
    """Same energy accumulated per keypoint over its neighbours, each
    neighbour term weighted by ``1/|N(p)|``."""
    g = state.graph
    d2 = np.sum(g.incidence_apply(state.common) ** 2, axis=1) if g.n_matches else np.zeros(0)
    total = 0.0
    for p in range(g.n_points):
        nbrs = g.neighbors(p)
        if nbrs.size:
            total += float(np.sum(g.weights[nbrs] * d2[nbrs])) / nbrs.size
    return total


def point_forces(state: BundleState, s2=None) -> np.ndarray:
    """``M^T S^2 M (P + B X)``: per-keypoint energy gradient halves."""
    g = state.graph
    s2 = state.match_scaling() if s2 is None else s2
    return g.transpose_apply(s2[:, None] * state.residuals())


def gradient(state: BundleState, s2=None) -> list[np.ndarray]:
    """Energy gradient with respect to each image's active grid coefficients."""
    if state.basis is None:
        raise RuntimeError("no active grids; start a level first")
    forces = point_forces(state, s2)

    def one(i):
        return 2.0 * (state.basis_t[i] @ forces[state.image_slice(i)])

    return state.map_images(one)


def _basis_matrix(grid: SplineGrid, pts: np.ndarray) -> sparse.csr_matrix:
    idx, val, _ = grid.basis_rows(pts)
    n = len(pts)
    indptr = np.arange(0, 64 * n + 1, 64)
    return sparse.csr_matrix((val.reshape(-1), idx.reshape(-1), indptr),
                             shape=(n, grid.n_controls))


def attach_grids(state: BundleState, template: SplineGrid) -> None:
    """Append a zero copy of ``template`` to every image as its active grid
    and build the basis rows at the current common-space positions."""
    state.base = state.common.copy()
    for tau in state.transforms:
        tau.grids.append(SplineGrid(template.origin, template.spacing, template.dims))

    def build(i):
        return _basis_matrix(state.transforms[i].grids[-1], state.base[state.image_slice(i)])

    state.basis = state.map_images(build)
    state.basis_t = [b.T.tocsr() for b in state.basis]
    state.positions_changed()


def set_coefficients(state: BundleState, coeffs) -> None:
    """Overwrite the active grids' coefficients and update positions."""
    for tau, x in zip(state.transforms, coeffs):
        tau.grids[-1].coeffs[:] = x
    _update_positions(state)


def _push_grids(state: BundleState, spacing: float, padding: int) -> None:
    """Fresh zero grids covering the current common-space bounding box."""
    if len(state.common):
        lo, hi = state.common.min(axis=0), state.common.max(axis=0)
    else:
        lo = hi = np.zeros(3)
    attach_grids(state, SplineGrid.covering(lo, hi, spacing, padding))


def _control_mass(state: BundleState, s2) -> np.ndarray:
    g = state.graph
    per_point = (np.bincount(g.a, s2, g.n_points) + np.bincount(g.b, s2, g.n_points))

    def one(i):
        return state.basis_t[i] @ per_point[state.image_slice(i)]

    mass = np.max(np.stack(state.map_images(one)), axis=0)
    return np.where(mass > 0, mass, 1.0)


def _update_positions(state: BundleState) -> None:
    coeffs = state.active_coefficients()

    def one(i):
        return state.base[state.image_slice(i)] + state.basis[i] @ coeffs[i]

    for i, pos in enumerate(state.map_images(one)):
        state.common[state.image_slice(i)] = pos
    state.positions_changed()


# --------------------------------------------------------------------------
# stage one: scale + translation


def init_linear(state: BundleState, cfg: OptimizerConfig) -> None:
    """Weighted mean/variance matching of matched keypoints, per image."""
    g = state.graph
    n = state.n_images
    lonely = [i for i in range(n) if g.image_matches(i)[0].size == 0]
    for i in lonely:
        logger.warning("image %d has no matches; its linear transform stays identity", i)
    if g.n_matches == 0:
        return
    for k in range(cfg.init_iterations):
        if k % cfg.theta_refresh_period == 0:
            state.refresh_weights()
        w_all = g.weights
        updates = {}
        for i in range(n):
            if i in lonely:
                continue
            ids, own, other = g.image_matches(i)
            w = w_all[ids]
            if w.sum() <= 0:
                continue
            pa, pb = state.common[own], state.common[other]
            mean_a = np.average(pa, axis=0, weights=w)
            mean_b = np.average(pb, axis=0, weights=w)
            var_a = np.average((pa - mean_a) ** 2, axis=0, weights=w)
            var_b = np.average((pb - mean_b) ** 2, axis=0, weights=w)
            with np.errstate(divide="ignore", invalid="ignore"):
                rho = np.where((var_a > 0) & (var_b > 0),
                               (var_b / var_a) ** (cfg.gamma / 2.0), 1.0)
            updates[i] = (rho, mean_a, mean_b)
        for i, (rho, mean_a, mean_b) in updates.items():
            lin = state.transforms[i].linear
            s = lin.s * rho
            t = rho * lin.t + cfg.gamma * (mean_b - mean_a) + mean_a * (1.0 - rho)
            state.transforms[i].linear = LinearTransform(s, t)
            sl = state.image_slice(i)
            state.common[sl] = state.transforms[i].linear.apply(state.points[sl])
        state.positions_changed()
        state.iteration += 1
        state.record(level=0)
    state.base = state.common.copy()


# --------------------------------------------------------------------------
# stage two: B-spline gradient descent


def descend_level(state: BundleState, spacing: float, cfg: OptimizerConfig, level: int = 1) -> int:
    """One pyramid level of projected gradient descent.

    Returns the number of grids composed at this level (1 when the guard
    never fired).
    """
    g = state.graph
    n = state.n_images
    limit = DIFFEO_FACTOR * spacing
    _push_grids(state, spacing, cfg.grid_padding)
    grids_used = 1
    period_start_energy = None
    s2 = mass = None
    for k in range(cfg.iterations_per_level):
        if k % cfg.theta_refresh_period == 0:
            state.refresh_weights()
            s2 = state.match_scaling()
            mass = _control_mass(state, s2)
            e_now = energy(state)
            if period_start_energy is not None and e_now >= period_start_energy and k > 0:
                logger.warning("energy did not decrease over refresh period ending at "
                               "iteration %d (level %d)", state.iteration, level)
            period_start_energy = e_now
        grads = gradient(state, s2)
        coeffs = state.active_coefficients()
        new = [c - cfg.alpha * gr / mass[:, None] for c, gr in zip(coeffs, grads)]
        mean = sum(new) / n
        new = [x - mean for x in new]
        worst = max(float(np.max(np.abs(x))) if x.size else 0.0 for x in new)
        if worst >= limit:
            fresh = all(not np.any(c) for c in coeffs)
            if fresh:
                # a single step already overshoots: shorten it
                shrink = 0.99 * limit / worst
                new = [x * shrink for x in new]
                logger.warning("step clipped by %.3g on a fresh grid (level %d)", shrink, level)
            else:
                for tau in state.transforms:
                    tau.grids[-1].freeze()
                _push_grids(state, spacing, cfg.grid_padding)
                mass = _control_mass(state, s2)
                grids_used += 1
                state.iteration += 1
                state.constraint_residuals.append(0.0)
                state.record(level)
                continue
        state.constraint_residuals.append(float(np.max(np.abs(sum(new)))) if new[0].size else 0.0)
        set_coefficients(state, new)
        state.iteration += 1
        state.record(level)
    for tau in state.transforms:
        tau.grids[-1].freeze()
    state.basis = state.basis_t = None
    return grids_used


@dataclass
class RegistrationResult:
    transforms: list[HalfTransform]
    thetas: list[MixtureParams]
    trace: list[dict]
    theta_history: list[dict]
    compositions: list[int]
    constraint_residuals: list[float]
    common: np.ndarray
    post_init_common: np.ndarray | None
    weights: np.ndarray = field(default=None)


def register(point_sets, graph: MatchGraph, cfg: OptimizerConfig | None = None) -> RegistrationResult:
    """Linear initialization followed by every pyramid level."""
    cfg = cfg or OptimizerConfig()
    state = BundleState(point_sets, graph, threads=cfg.threads)
    try:
        if graph.n_images >= 2 and graph.n_matches == 0:
            raise ValueError("empty match graph: nothing to register")
        if graph.n_images >= 2:
            init_linear(state, cfg)
            state.post_init_common = state.common.copy()
            for level, spacing in enumerate(cfg.levels, start=1):
                used = descend_level(state, spacing, cfg, level)
                state.compositions.append(used)
                logger.info("level %d (%.0f mm): %d grid(s), energy %.6g",
                            level, spacing, used, state.trace[-1]["energy"] if state.trace else 0.0)
            state.refresh_weights()
        else:
            state.thetas = [MixtureParams.missing() for _ in range(graph.n_images)]
    finally:
        state.close()
    return RegistrationResult(state.transforms, state.thetas, state.trace, state.theta_history,
                              state.compositions, state.constraint_residuals, state.common,
                              state.post_init_common, graph.weights.copy())
