"""Two-component Maxwell mixture over common-space match distances.

Each image gets its own mixture ``r * f(d, s1) + (1 - r) * f(d, s2)`` where
``f`` is the Maxwell (chi with 3 dof) density, fitted by EM. The inlier
posterior of a match under each of its two images is combined with ``min``
into a symmetric weight.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

S_FLOOR = 1e-6
_LOG_NORM = 0.5 * math.log(2.0 / math.pi)


@dataclass
class MixtureParams:
    s1: float
    s2: float
    r: float
    degenerate: bool = False
    absent: bool = False

    def __post_init__(self):
        self.s1 = max(float(self.s1), S_FLOOR)
        self.s2 = max(float(self.s2), S_FLOOR)
        self.r = min(max(float(self.r), 0.0), 1.0)
        if self.s1 > self.s2:
            self.s1, self.s2 = self.s2, self.s1
            self.r = 1.0 - self.r

    @classmethod
    def missing(cls) -> "MixtureParams":
        """Placeholder for an image without matches: every posterior is 1."""
        return cls(1.0, 1.0, 1.0, absent=True)


def maxwell_pdf(d, s):
    d = np.asarray(d, dtype=float)
    if np.any(np.asarray(s) <= 0):
        raise ValueError("Maxwell scale must be positive")
    return np.exp(maxwell_logpdf(d, s))


def maxwell_logpdf(d, s):
    d = np.asarray(d, dtype=float)
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore"):
        return _LOG_NORM + 2.0 * np.log(d) - 3.0 * np.log(s) - d * d / (2.0 * s * s)


def _component_logs(d2, theta: MixtureParams):
    """Log of ``r f(d, s1)`` and ``(1-r) f(d, s2)`` without the shared
    ``log(sqrt(2/pi) d^2)`` term, so ``d = 0`` stays finite."""
    with np.errstate(divide="ignore"):
        la = math.log(theta.r) if theta.r > 0 else -np.inf
        lb = math.log(1.0 - theta.r) if theta.r < 1 else -np.inf
    a = la - 3.0 * math.log(theta.s1) - d2 / (2.0 * theta.s1 ** 2)
    b = lb - 3.0 * math.log(theta.s2) - d2 / (2.0 * theta.s2 ** 2)
    return a, b


def inlier_posterior(d, theta: MixtureParams):
    """Probability that distance ``d`` comes from the inlier component."""
    d = np.asarray(d, dtype=float)
    if theta.absent or theta.r >= 1.0:
        return np.ones_like(d) if d.ndim else 1.0
    if theta.r <= 0.0:
        return np.zeros_like(d) if d.ndim else 0.0
    a, b = _component_logs(d * d, theta)
    # logistic of (a - b), stable in both tails
    out = 0.5 * (1.0 + np.tanh(0.5 * (a - b)))
    return out if d.ndim else float(out)


def match_weight(d, theta_i: MixtureParams, theta_j: MixtureParams):
    return np.minimum(inlier_posterior(d, theta_i), inlier_posterior(d, theta_j))


def default_init(distances) -> MixtureParams:
    d = np.asarray(distances, dtype=float)
    q25, q90 = np.percentile(d, [25.0, 90.0])
    return MixtureParams(q25 / math.sqrt(2.0), q90 / math.sqrt(2.0), 0.5)


def log_likelihood(distances, theta: MixtureParams) -> float:
    d = np.asarray(distances, dtype=float)
    d2 = d * d
    a, b = _component_logs(d2, theta)
    shared = _LOG_NORM + 2.0 * np.log(np.maximum(d, 1e-300))
    return float(np.sum(np.logaddexp(a, b) + shared))


def em_fit(distances, init: MixtureParams | None = None, tol=1e-8, max_iter=200,
           history: list | None = None) -> MixtureParams:
    """Fit ``(s1, s2, r)`` to ``distances`` by EM.

    Stops when the relative log-likelihood change drops below ``tol`` or after
    ``max_iter`` iterations. ``history``, when given, receives the
    log-likelihood after each M-step.
    """
    d = np.asarray(distances, dtype=float).reshape(-1)
    if d.size < 2:
        raise ValueError("EM needs at least 2 distances")
    d2 = d * d
    if np.all(d2 == 0):
        raise ValueError("EM needs distances that are not all zero")
    if np.all(d == d[0]):
        s = math.sqrt(d2[0] / 3.0)
        return MixtureParams(s, s, 1.0, degenerate=True)

    theta = default_init(d) if init is None or init.absent else MixtureParams(init.s1, init.s2, init.r)
    if theta.r in (0.0, 1.0) or theta.s1 == theta.s2:
        # a collapsed start never leaves its fixed point
        fresh = default_init(d)
        theta = MixtureParams(fresh.s1, fresh.s2, 0.5)
    shared = _LOG_NORM + 2.0 * np.log(np.maximum(d, 1e-300))
    prev = None
    for _ in range(max_iter):
        a, b = _component_logs(d2, theta)
        gamma = 0.5 * (1.0 + np.tanh(0.5 * (a - b)))
        g1 = gamma.sum()
        g2 = d.size - g1
        if g1 <= 0.0 or g2 <= 0.0:
            s = math.sqrt(d2.mean() / 3.0)
            theta = MixtureParams(s, s, 1.0, degenerate=True)
            break
        s1 = math.sqrt(float(gamma @ d2) / (3.0 * g1))
        s2 = math.sqrt(float((1.0 - gamma) @ d2) / (3.0 * g2))
        theta = MixtureParams(s1, s2, g1 / d.size)
        a, b = _component_logs(d2, theta)
        ll = float(np.sum(np.logaddexp(a, b) + shared))
        if history is not None:
            history.append(ll)
        if prev is not None and abs(ll - prev) <= tol * abs(prev):
            break
        prev = ll
    if not theta.degenerate:
        theta = _prefer_single(d2, shared, theta)
    return theta


def _prefer_single(d2, shared, theta: MixtureParams) -> MixtureParams:
    """Collapse to one Maxwell when the mixture does not earn its two extra
    parameters (BIC)."""
    s = math.sqrt(float(d2.mean()) / 3.0)
    single = MixtureParams(s, s, 1.0)
    a, b = _component_logs(d2, theta)
    ll_mix = float(np.sum(np.logaddexp(a, b) + shared))
    ll_one = float(np.sum(_component_logs(d2, single)[0] + shared))
    if ll_mix - ll_one < math.log(d2.size):
        return single
    return theta


def match_distances(graph, positions):
    """Common-space distance of every match, given ``(|P|, 3)`` positions."""
    if graph.n_matches == 0:
        return np.zeros(0)
    return np.linalg.norm(positions[graph.a] - positions[graph.b], axis=1)


def update_all_weights(graph, positions, thetas=None, executor=None, distances=None):
    """Refit every image's mixture on its incident match distances and
    recompute all match weights in place.

    ``thetas`` (previous fits, one per image) warm-start EM. ``distances``
    may pass precomputed match distances. Returns the new list of
    :class:`MixtureParams`; images without matches get
    :meth:`MixtureParams.missing`.
    """
    n = graph.n_images
    if thetas is None:
        thetas = [None] * n
    if graph.n_matches == 0:
        return [MixtureParams.missing() for _ in range(n)]
    d = match_distances(graph, positions) if distances is None else distances

    def fit(i):
        ids = graph.image_matches(i)[0]
        if ids.size == 0:
            return MixtureParams.missing()
        di = d[ids]
        if di.size < 2 or np.all(di == 0):
            s = float(np.sqrt(np.mean(di * di) / 3.0))
            return MixtureParams(s, s, 1.0, degenerate=True)
        return em_fit(di, thetas[i])

    if executor is None:
        new = [fit(i) for i in range(n)]
    else:
        new = list(executor.map(fit, range(n)))
    w = np.ones_like(d)
    for i in range(n):
        theta = new[i]
        if theta.absent:
            continue
        ids = graph.image_matches(i)[0]
        w[ids] = np.minimum(w[ids], inlier_posterior(d[ids], theta))
    graph.weights[:] = w
    return new
