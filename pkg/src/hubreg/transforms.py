"""Half-transforms: anisotropic scale + translation, then a stack of cubic
B-spline displacement grids evaluated by true function composition.

Grid convention: for a point ``p`` let ``u = (p - origin) / spacing``,
``i = floor(u)`` and ``f = u - i``. The point is influenced by control points
``i .. i+3`` on each axis with uniform cubic B-spline weights of ``f``, so the
support of a grid with ``dims`` control points per axis is
``origin .. origin + (dims - 3) * spacing``. Coefficients are stored as a
``(c, 3)`` array, control index ``(ix, iy, iz)`` flattened row-major.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DIFFEO_FACTOR = 0.4

# offsets of the 4x4x4 support, ix slowest
_OFF = np.stack(np.meshgrid(np.arange(4), np.arange(4), np.arange(4),
                            indexing="ij"), axis=-1).reshape(64, 3)


class TransformFormatError(ValueError):
    pass


def cubic_bspline_weights(f):
    """Uniform cubic B-spline weights at fractional offset ``f`` -> ``(..., 4)``."""
    f = np.asarray(f, dtype=float)
    g = 1.0 - f
    f2 = f * f
    f3 = f2 * f
    return np.stack([
        g * g * g / 6.0,
        (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0,
        (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0,
        f3 / 6.0,
    ], axis=-1)


def cubic_bspline_derivatives(f):
    """d/df of :func:`cubic_bspline_weights`."""
    f = np.asarray(f, dtype=float)
    g = 1.0 - f
    f2 = f * f
    return np.stack([
        -0.5 * g * g,
        1.5 * f2 - 2.0 * f,
        -1.5 * f2 + f + 0.5,
        0.5 * f2,
    ], axis=-1)


@dataclass
class LinearTransform:
    """``p -> s * p + t`` with componentwise (Hadamard) scale."""

    s: np.ndarray = field(default_factory=lambda: np.ones(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float).reshape(3).copy()
        self.t = np.asarray(self.t, dtype=float).reshape(3).copy()
        if np.any(self.s <= 0):
            raise ValueError(f"scale must be positive, got {self.s}")

    def apply(self, p):
        return np.asarray(p, dtype=float) * self.s + self.t

    def inverse_apply(self, q):
        return (np.asarray(q, dtype=float) - self.t) / self.s


@dataclass
class SplineGrid:
    origin: np.ndarray
    spacing: float
    dims: tuple[int, int, int]
    coeffs: np.ndarray = None
    frozen: bool = False

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3).copy()
        self.spacing = float(self.spacing)
        self.dims = tuple(int(d) for d in self.dims)
        if self.spacing <= 0:
            raise ValueError("grid spacing must be positive")
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ValueError(f"grid needs >= 4 control points per axis, got {self.dims}")
        c = self.n_controls
        if self.coeffs is None:
            self.coeffs = np.zeros((c, 3))
        else:
            self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(c, 3).copy()

    @property
    def n_controls(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @classmethod
    def covering(cls, lo, hi, spacing, pad_cells=2):
        """Grid whose support covers the box ``[lo, hi]`` padded by ``pad_cells``."""
        lo = np.asarray(lo, dtype=float) - pad_cells * spacing
        hi = np.asarray(hi, dtype=float) + pad_cells * spacing
        cells = np.maximum(np.ceil((hi - lo) / spacing - 1e-9).astype(int), 1)
        return cls(lo, spacing, tuple(int(c) + 3 for c in cells))

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        hi = self.origin + (np.asarray(self.dims) - 3) * self.spacing
        return self.origin.copy(), hi

    def freeze(self) -> None:
        self.frozen = True
        self.coeffs.flags.writeable = False

    def _locate(self, points):
        u = (np.atleast_2d(np.asarray(points, dtype=float)) - self.origin) / self.spacing
        upper = np.asarray(self.dims) - 3
        inside = np.all((u >= 0) & (u <= upper), axis=1)
        cell = np.minimum(np.floor(u), upper - 1).astype(np.int64)
        cell = np.clip(cell, 0, upper - 1)
        frac = u - cell
        return cell, frac, inside

    def _flat_index(self, cell):
        _, ny, nz = self.dims
        ijk = cell[:, None, :] + _OFF[None, :, :]
        return (ijk[..., 0] * ny + ijk[..., 1]) * nz + ijk[..., 2]

    def basis_rows(self, points):
        """Sparse B-spline rows for ``points`` ``(N, 3)``.

        Returns ``(index, value, inside)`` with ``index``/``value`` shaped
        ``(N, 64)``; rows of points outside the support are all zero.
        """
        cell, frac, inside = self._locate(points)
        w = cubic_bspline_weights(frac)  # (N, 3, 4)
        val = (w[:, 0, _OFF[:, 0]] * w[:, 1, _OFF[:, 1]] * w[:, 2, _OFF[:, 2]])
        val[~inside] = 0.0
        return self._flat_index(cell), val, inside

    def gradient_rows(self, points):
        """Spatial derivatives of the basis rows, ``(N, 64, 3)`` in 1/mm."""
        cell, frac, inside = self._locate(points)
        w = cubic_bspline_weights(frac)
        dw = cubic_bspline_derivatives(frac) / self.spacing
        wx, wy, wz = w[:, 0, _OFF[:, 0]], w[:, 1, _OFF[:, 1]], w[:, 2, _OFF[:, 2]]
        dx, dy, dz = dw[:, 0, _OFF[:, 0]], dw[:, 1, _OFF[:, 1]], dw[:, 2, _OFF[:, 2]]
        grad = np.stack([dx * wy * wz, wx * dy * wz, wx * wy * dz], axis=-1)
        grad[~inside] = 0.0
        return self._flat_index(cell), grad, inside

    def displacement(self, points, coeffs=None):
        """Displacement at ``points`` and the inside-support mask."""
        coeffs = self.coeffs if coeffs is None else coeffs
        idx, val, inside = self.basis_rows(points)
        disp = np.einsum("nk,nkd->nd", val, coeffs[idx])
        return disp, inside

    def displacement_jacobian(self, points):
        """``(N, 3, 3)`` matrix ``d disp_a / d p_b``."""
        idx, grad, _ = self.gradient_rows(points)
        return np.einsum("nka,nkb->nab", self.coeffs[idx], grad)


def basis_row(p, grid: SplineGrid):
    """Sparse basis row of a single point: ``(indices[64], values[64])``."""
    idx, val, inside = grid.basis_rows(np.asarray(p, dtype=float).reshape(1, 3))
    if not inside[0]:
        raise ValueError(f"point {tuple(np.ravel(p))} is outside the grid support")
    return idx[0], val[0]


def diffeo_ok(grid: SplineGrid) -> bool:
    """Sufficient injectivity condition: every control displacement, on every
    axis, stays below ``0.4 * spacing``."""
    if grid.coeffs.size == 0:
        return True
    return bool(np.max(np.abs(grid.coeffs)) < DIFFEO_FACTOR * grid.spacing)


@dataclass
class HalfTransform:
    """Maps image coordinates (mm) to the common space."""

    linear: LinearTransform = field(default_factory=LinearTransform)
    grids: list[SplineGrid] = field(default_factory=list)
    image_id: int = 0

    def apply(self, points, return_outside=False):
        """Map ``points`` (``(3,)`` or ``(N, 3)``).

        Points that fall outside a grid's support get zero displacement from
        that grid; ``return_outside`` reports them.
        """
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        q = self.linear.apply(np.atleast_2d(pts))
        outside = np.zeros(len(q), dtype=bool)
        for grid in self.grids:
            disp, inside = grid.displacement(q)
            q = q + disp
            outside |= ~inside
        if single:
            q = q[0]
            outside = bool(outside[0])
        return (q, outside) if return_outside else q

    def jacobian(self, points):
        """``(N, 3, 3)`` spatial derivative of :meth:`apply`."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        jac = np.broadcast_to(np.diag(self.linear.s), (len(pts), 3, 3)).copy()
        q = self.linear.apply(pts)
        eye = np.eye(3)
        for grid in self.grids:
            local = eye + grid.displacement_jacobian(q)
            jac = local @ jac
            q = q + grid.displacement(q)[0]
        return jac

    def copy(self) -> "HalfTransform":
        grids = []
        for g in self.grids:
            ng = SplineGrid(g.origin, g.spacing, g.dims, g.coeffs.copy())
            if g.frozen:
                ng.freeze()
            grids.append(ng)
        return HalfTransform(LinearTransform(self.linear.s, self.linear.t), grids,
                             self.image_id)


def apply(tau: HalfTransform, p):
    return tau.apply(p)


def jacobian_determinant(tau: HalfTransform, p):
    """Determinant of the spatial derivative of ``tau`` at ``p``."""
    pts = np.asarray(p, dtype=float)
    det = np.linalg.det(tau.jacobian(pts))
    return float(det[0]) if pts.ndim == 1 else det


def invert_points(tau: HalfTransform, q, tol=1e-4, max_iter=100):
    """Preimages of ``q`` under ``tau``.

    Returns ``(p, converged)``. Grids are undone one at a time in reverse
    order by the fixed-point iteration ``y <- q - d(y)``, which contracts for
    each grid that respects the displacement bound even when the composed
    stack would not; the linear part is then inverted exactly. Points whose
    full residual is still above ``tol`` get a few Newton steps on the whole
    transform.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    y = q.copy()
    for grid in reversed(tau.grids):
        target = y.copy()
        active = np.arange(len(y))
        for _ in range(max_iter):
            disp = grid.displacement(y[active])[0]
            resid = y[active] + disp - target[active]
            done = np.linalg.norm(resid, axis=1) < 0.1 * tol
            active = active[~done]
            if active.size == 0:
                break
            y[active] = target[active] - disp[~done]
    p = tau.linear.inverse_apply(y)
    resid = tau.apply(p) - q
    converged = np.linalg.norm(resid, axis=1) < tol
    for _ in range(20):
        bad = np.flatnonzero(~converged & np.all(np.isfinite(p), axis=1))
        if bad.size == 0:
            break
        try:
            step = np.linalg.solve(tau.jacobian(p[bad]), resid[bad][..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        p[bad] -= step
        resid[bad] = tau.apply(p[bad]) - q[bad]
        converged[bad] = np.linalg.norm(resid[bad], axis=1) < tol
    return p, converged


def invert_point(tau: HalfTransform, q):
    """Single-point inverse; returns ``(p, converged)``."""
    p, ok = invert_points(tau, np.asarray(q, dtype=float).reshape(1, 3))
    return p[0], bool(ok[0])


def sample_cell_points(grid: SplineGrid, per_cell=5):
    """``per_cell**3`` samples in every cell of the grid support."""
    lo, _ = grid.support()
    cells = np.asarray(grid.dims) - 3
    axes = [lo[a] + (np.arange(cells[a] * per_cell) + 0.5) * grid.spacing / per_cell
            for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def _grid_jacobians(grid: SplineGrid, per_cell=5) -> np.ndarray:
    """Determinants of ``I + d(disp)/dp`` at ``per_cell**3`` samples in every
    cell, in the same order as :func:`sample_cell_points`.

    The samples sit at the same fractional offsets in every cell, so each
    derivative is a separable 4-tap filter over the coefficient array.
    """
    from numpy.lib.stride_tricks import sliding_window_view

    frac = (np.arange(per_cell) + 0.5) / per_cell
    w = cubic_bspline_weights(frac)                     # (f, 4)
    dw = cubic_bspline_derivatives(frac) / grid.spacing
    c = grid.coeffs.reshape(*grid.dims, 3)              # (nx, ny, nz, 3)

    def filt(arr, axis, taps):
        win = sliding_window_view(arr, 4, axis=axis)    # window appended last
        out = np.tensordot(win, taps, axes=([-1], [1]))  # fraction appended last
        return np.moveaxis(out, -1, axis + 1)

    # each pass turns one control axis into (cells, fractions)
    cols = []
    for deriv_axis in range(3):
        arr = c
        for axis in range(3):
            taps = dw if axis == deriv_axis else w
            arr = filt(arr, 2 * axis, taps)
        cols.append(arr)                                 # d disp / d p_axis
    jac = np.stack(cols, axis=-1) + np.eye(3)            # (..., 3 comp, 3 axis)
    return np.linalg.det(jac.reshape(-1, 3, 3))


def min_jacobian_on_grids(tau: HalfTransform, per_cell=5):
    """Smallest sampled Jacobian determinant over the support of every grid
    of ``tau``, sampled ``per_cell**3`` times per cell in that grid's own
    input space, times the determinant of the linear part."""
    worst = min((float(np.min(_grid_jacobians(g, per_cell))) for g in tau.grids), default=1.0)
    return worst * float(np.prod(tau.linear.s))


# --------------------------------------------------------------------------
# serialization


def transform_to_dict(tau: HalfTransform) -> dict:
    return {
        "version": FORMAT_VERSION,
        "image_id": int(tau.image_id),
        "linear": {"s": [float(x) for x in tau.linear.s],
                   "t": [float(x) for x in tau.linear.t]},
        "grids": [{
            "origin": [float(x) for x in g.origin],
            "spacing": float(g.spacing),
            "dims": [int(d) for d in g.dims],
            "frozen": bool(g.frozen),
            "coeffs": [float(x) for x in g.coeffs.reshape(-1)],
        } for g in tau.grids],
    }


def transform_from_dict(data: dict) -> HalfTransform:
    if not isinstance(data, dict) or data.get("version") != FORMAT_VERSION:
        raise TransformFormatError(f"unsupported transform version {data.get('version') if isinstance(data, dict) else None!r}")
    try:
        linear = LinearTransform(data["linear"]["s"], data["linear"]["t"])
        grids = []
        for g in data["grids"]:
            dims = tuple(g["dims"])
            coeffs = np.asarray(g["coeffs"], dtype=float)
            if len(dims) != 3 or coeffs.size != 3 * int(np.prod(dims)):
                raise TransformFormatError("grid dims and coefficient count disagree")
            grid = SplineGrid(g["origin"], g["spacing"], dims, coeffs)
            if g.get("frozen", False):
                grid.freeze()
            grids.append(grid)
        return HalfTransform(linear, grids, int(data.get("image_id", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, TransformFormatError):
            raise
        raise TransformFormatError(f"malformed transform: {exc}") from exc


def save_transform(path, tau: HalfTransform) -> None:
    Path(path).write_text(json.dumps(transform_to_dict(tau)))


def load_transform(path) -> HalfTransform:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TransformFormatError(f"{path}: not a transform file") from exc
    return transform_from_dict(data)
