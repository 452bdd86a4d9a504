"""Cross-image keypoint matching and the global match graph.

A :class:`MatchGraph` indexes keypoints globally: image ``i``'s point ``k``
has global index ``offsets[i] + k``. Every match is oriented from the lower
image id to the higher one, which fixes the signs of the incidence matrix
(``+1`` on ``a``, ``-1`` on ``b``).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 2000


class MatchFormatError(ValueError):
    pass


@dataclass
class MatchCriteria:
    max_descriptor_distance: float = 1.0
    nn_ratio: float = 0.9
    max_scale_log_ratio: float = math.log(2.0)
    require_same_sign: bool = True

    def __post_init__(self):
        if self.max_descriptor_distance <= 0 or self.max_scale_log_ratio <= 0:
            raise ValueError("match thresholds must be positive")
        if not 0 < self.nn_ratio <= 1:
            raise ValueError("nn_ratio must lie in (0, 1]")


# --------------------------------------------------------------------------
# pairwise matching


def _first_two(d, j, ok):
    """Per row, the two smallest ``(d, j)`` entries where ``ok``."""
    order = np.lexsort((j, d), axis=-1)
    d = np.take_along_axis(d, order, axis=1)
    j = np.take_along_axis(j, order, axis=1)
    ok = np.take_along_axis(ok, order, axis=1)
    rank = np.cumsum(ok, axis=1)
    best = np.full((len(d), 2), -1, dtype=np.int64)
    dist = np.full((len(d), 2), np.inf)
    for slot in range(2):
        hit = ok & (rank == slot + 1)
        has = hit.any(axis=1)
        col = np.argmax(hit, axis=1)
        rows = np.nonzero(has)[0]
        best[rows, slot] = j[rows, col[rows]]
        dist[rows, slot] = d[rows, col[rows]]
    return best, dist, rank[:, -1]


def _two_nearest(query, ref, compatible, brute=None, chunk=1024):
    """Indices and distances of the two nearest compatible references.

    ``compatible(qi, rj)`` -> bool mask over candidate pairs. Missing
    neighbours are reported as index -1 and distance inf. Exact distance
    ties resolve to the lower reference index on both search paths.
    """
    nq, nr = len(query), len(ref)
    best = np.full((nq, 2), -1, dtype=np.int64)
    dist = np.full((nq, 2), np.inf)
    if nq == 0 or nr == 0:
        return best, dist
    if brute is None:
        brute = nr < BRUTE_FORCE_LIMIT
    if brute:
        rj = np.arange(nr)[None, :]
        rsq = np.sum(ref ** 2, axis=1)[None, :]
        for start in range(0, nq, chunk):
            q = query[start:start + chunk]
            qi = np.arange(start, start + len(q))[:, None]
            d = np.sqrt(np.maximum(np.sum(q ** 2, axis=1)[:, None] + rsq - 2.0 * q @ ref.T, 0.0))
            jj = np.broadcast_to(rj, d.shape)
            best[qi[:, 0]], dist[qi[:, 0]], _ = _first_two(d, jj, compatible(qi, jj))
        # the expanded form only ranks; report exact distances
        for slot in range(2):
            rows = np.nonzero(best[:, slot] >= 0)[0]
            dist[rows, slot] = np.linalg.norm(query[rows] - ref[best[rows, slot]], axis=1)
        return best, dist
    tree = cKDTree(ref)
    pending = np.arange(nq)
    k = 8
    while pending.size:
        kk = min(k, nr)
        d, j = tree.query(query[pending], k=kk)
        d = d.reshape(len(pending), kk)
        j = j.reshape(len(pending), kk)
        b2, d2, found = _first_two(d, j, compatible(pending[:, None], j))
        done = (found >= 2) | (kk == nr)
        best[pending[done]] = b2[done]
        dist[pending[done]] = d2[done]
        pending = pending[~done]
        k *= 4
    return best, dist


def _directed(setA, setB, c: MatchCriteria, brute=None):
    """Query every point of A against B; returns accepted (ia, ib, dist)."""
    logA = np.log(setA.scales)
    logB = np.log(setB.scales)
    sa, sb = setA.signs, setB.signs

    def compatible(qi, rj):
        ok = np.abs(logA[qi] - logB[rj]) <= c.max_scale_log_ratio + 1e-12
        if c.require_same_sign:
            ok &= sa[qi] == sb[rj]
        return ok

    best, dist = _two_nearest(setA.descriptors, setB.descriptors, compatible, brute)
    d1, d2 = dist[:, 0], dist[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(np.isinf(d2), 0.0, np.where(d2 > 0, d1 / d2, 1.0))
    keep = (best[:, 0] >= 0) & (d1 <= c.max_descriptor_distance) & (ratio <= c.nn_ratio)
    ia = np.nonzero(keep)[0]
    return ia, best[ia, 0], d1[ia]


def match_pair(setA, setB, c: MatchCriteria | None = None, brute=None):
    """Symmetric nearest-neighbour matches between two keypoint sets.

    Returns ``(idxA, idxB, distance)`` arrays sorted by ``(idxA, idxB)``, the
    union of the A->B and B->A searches with duplicates removed.
    """
    c = c or MatchCriteria()
    if setA.descriptors is None or setB.descriptors is None:
        raise ValueError("keypoints need descriptors before matching")
    if len(setA) and len(setB) and setA.descriptors.shape[1] != setB.descriptors.shape[1]:
        raise ValueError("descriptor lengths differ")
    ia1, ib1, d1 = _directed(setA, setB, c, brute)
    ib2, ia2, d2 = _directed(setB, setA, c, brute)
    ia = np.concatenate([ia1, ia2])
    ib = np.concatenate([ib1, ib2])
    dd = np.concatenate([d1, d2])
    if ia.size == 0:
        return ia.astype(np.int64), ib.astype(np.int64), dd
    key = ia * max(len(setB), 1) + ib
    _, first = np.unique(key, return_index=True)
    return ia[first].astype(np.int64), ib[first].astype(np.int64), dd[first]


# --------------------------------------------------------------------------
# graph


@dataclass
class MatchGraph:
    """Matches between globally indexed keypoints.

    ``a``/``b`` are global point indices with ``a_img < b_img``; ``weights``
    is updated in place by the robust weighting.
    """

    counts: np.ndarray
    a: np.ndarray
    b: np.ndarray
    distances: np.ndarray = None
    weights: np.ndarray = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)]).astype(np.int64)
        self.a = np.asarray(self.a, dtype=np.int64).reshape(-1)
        self.b = np.asarray(self.b, dtype=np.int64).reshape(-1)
        m = len(self.a)
        if len(self.b) != m:
            raise ValueError("a and b must have the same length")
        self.distances = (np.zeros(m) if self.distances is None
                          else np.asarray(self.distances, dtype=float).reshape(m))
        self.weights = (np.ones(m) if self.weights is None
                        else np.asarray(self.weights, dtype=float).reshape(m).copy())
        n_points = int(self.offsets[-1])
        if m and (min(self.a.min(), self.b.min()) < 0 or max(self.a.max(), self.b.max()) >= n_points):
            raise ValueError("match refers to a keypoint outside the graph")
        self.point_image = np.repeat(np.arange(len(self.counts)), self.counts)
        self.a_img = self.point_image[self.a]
        self.b_img = self.point_image[self.b]
        if np.any(self.a_img >= self.b_img):
            raise ValueError("matches must link a lower image id to a higher one")
        if m:
            key = self.a * n_points + self.b
            if np.unique(key).size != m:
                raise ValueError("duplicate matches")
        self._build_adjacency()

    def _build_adjacency(self):
        n = self.n_points
        ends = np.concatenate([self.a, self.b])
        ids = np.concatenate([np.arange(self.n_matches)] * 2)
        order = np.lexsort((ids, ends))
        self.adj_indices = ids[order]
        self.adj_indptr = np.concatenate([[0], np.cumsum(np.bincount(ends, minlength=n))])
        self.degree = np.diff(self.adj_indptr)

    def image_matches(self, image: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Matches incident to ``image``: ``(match ids, own point, other point)``,
        ordered with the matches where ``image`` is the ``a`` side first."""
        cache = self.__dict__.setdefault("_image_matches", {})
        if image not in cache:
            as_a = np.flatnonzero(self.a_img == image)
            as_b = np.flatnonzero(self.b_img == image)
            ids = np.concatenate([as_a, as_b])
            cache[image] = (ids, np.concatenate([self.a[as_a], self.b[as_b]]),
                            np.concatenate([self.b[as_a], self.a[as_b]]))
        return cache[image]

    @property
    def n_images(self) -> int:
        return len(self.counts)

    @property
    def n_points(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_matches(self) -> int:
        return len(self.a)

    def neighbors(self, point: int) -> np.ndarray:
        """Indices of the matches incident to global keypoint ``point``."""
        return self.adj_indices[self.adj_indptr[point]:self.adj_indptr[point + 1]]

    def global_index(self, image: int, index) -> np.ndarray:
        return self.offsets[image] + np.asarray(index)

    def local_index(self, point) -> tuple[np.ndarray, np.ndarray]:
        point = np.asarray(point)
        img = self.point_image[point]
        return img, point - self.offsets[img]

    def incidence_matrix(self) -> sparse.csr_matrix:
        m = self.n_matches
        rows = np.repeat(np.arange(m), 2)
        cols = np.stack([self.a, self.b], axis=1).reshape(-1)
        vals = np.tile([1.0, -1.0], m)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(m, self.n_points))

    def incidence_apply(self, points):
        points = np.asarray(points, dtype=float)
        if points.shape[0] != self.n_points:
            raise ValueError(f"expected {self.n_points} rows, got {points.shape[0]}")
        return points[self.a] - points[self.b]

    def transpose_apply(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.n_matches:
            raise ValueError(f"expected {self.n_matches} rows, got {values.shape[0]}")
        flat = values.reshape(self.n_matches, int(np.prod(values.shape[1:])))
        out = np.empty((self.n_points, flat.shape[1]))
        for k in range(flat.shape[1]):
            out[:, k] = (np.bincount(self.a, flat[:, k], self.n_points)
                         - np.bincount(self.b, flat[:, k], self.n_points))
        return out.reshape((self.n_points,) + values.shape[1:])

    @classmethod
    def from_local(cls, counts, a_img, a_idx, b_img, b_idx, distances=None):
        """Build from per-image indices, reorienting and sorting canonically."""
        counts = np.asarray(counts, dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        a_img, a_idx, b_img, b_idx = (np.asarray(x, dtype=np.int64).reshape(-1)
                                      for x in (a_img, a_idx, b_img, b_idx))
        ga = offsets[a_img] + a_idx
        gb = offsets[b_img] + b_idx
        swap = a_img > b_img
        ga, gb = np.where(swap, gb, ga), np.where(swap, ga, gb)
        d = np.zeros(len(ga)) if distances is None else np.asarray(distances, dtype=float)
        order = np.lexsort((gb, ga))
        return cls(counts, ga[order], gb[order], d[order])


def build_graph(all_sets, c: MatchCriteria | None = None, threads: int = 1) -> MatchGraph:
    """Match every unordered image pair and assemble the graph."""
    c = c or MatchCriteria()
    if len(all_sets) < 2:
        raise ValueError("need at least 2 images")
    pairs = list(combinations(range(len(all_sets)), 2))

    def run(pair):
        i, j = pair
        return match_pair(all_sets[i], all_sets[j], c)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, pairs))
    else:
        results = [run(p) for p in pairs]
    parts = [[], [], [], [], []]
    for (i, j), (ia, ib, d) in zip(pairs, results):
        parts[0].append(np.full(len(ia), i))
        parts[1].append(ia)
        parts[2].append(np.full(len(ia), j))
        parts[3].append(ib)
        parts[4].append(d)
    cat = [np.concatenate(p) if p else np.zeros(0) for p in parts]
    counts = [len(s) for s in all_sets]
    logger.info("matched %d image pairs: %d matches", len(pairs), len(cat[0]))
    return MatchGraph.from_local(counts, *cat)


# --------------------------------------------------------------------------
# file format


def save_matches(path, g: MatchGraph) -> None:
    ia_img, ia = g.local_index(g.a)
    ib_img, ib = g.local_index(g.b)
    lines = [f"# images {g.n_images}",
             "# counts " + " ".join(str(int(c)) for c in g.counts)]
    lines += [f"{int(w)} {int(x)} {int(y)} {int(z)} {float(d)!r}"
              for w, x, y, z, d in zip(ia_img, ia, ib_img, ib, g.distances)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_matches(path) -> MatchGraph:
    n_images = None
    counts = None
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "images":
                n_images = int(parts[1])
            elif parts and parts[0] == "counts":
                counts = [int(x) for x in parts[1:]]
            continue
        parts = line.split()
        if len(parts) != 5:
            raise MatchFormatError(f"{path}:{lineno}: expected 5 fields")
        rows.append(parts)
    if n_images is None or counts is None or len(counts) != n_images:
        raise MatchFormatError(f"{path}: missing or inconsistent header")
    if rows:
        arr = np.array(rows)
        ints = arr[:, :4].astype(np.int64)
        dist = arr[:, 4].astype(float)
    else:
        ints = np.zeros((0, 4), dtype=np.int64)
        dist = np.zeros(0)
    counts_arr = np.asarray(counts)
    for col_img, col_idx in ((0, 1), (2, 3)):
        if np.any(ints[:, col_img] >= n_images) or np.any(ints[:, col_idx] >= counts_arr[ints[:, col_img]] if len(ints) else False):
            raise MatchFormatError(f"{path}: match refers to a missing keypoint")
    return MatchGraph.from_local(counts, ints[:, 0], ints[:, 1], ints[:, 2], ints[:, 3], dist)
