import logging

import numpy as np
import pytest

from conftest import inlier_residual
from hubreg.matching import MatchGraph
from hubreg.optimizer import (BundleState, OptimizerConfig, attach_grids, descend_level, energy,
                              energy_by_points, gradient, init_linear, register, set_coefficients)
from hubreg.synthetic import SyntheticSpec, generate_synthetic
from hubreg.transforms import SplineGrid, min_jacobian_on_grids


def chain_graph(counts, pairs):
    """Graph from (image, index, image, index) tuples."""
    ai, ia, bi, ib = zip(*pairs)
    return MatchGraph.from_local(counts, ai, ia, bi, ib)


def copies_graph(n_img, n_pts):
    pairs = [(i, k, j, k) for i in range(n_img) for j in range(i + 1, n_img) for k in range(n_pts)]
    return chain_graph([n_pts] * n_img, pairs)


def random_instance(rng, n_img=3, max_pts=20, n_matches=40):
    counts = rng.integers(max_pts // 2, max_pts + 1, n_img)
    pts = [rng.uniform(0, 50, (c, 3)) for c in counts]
    offs = np.concatenate([[0], np.cumsum(counts)])
    img = np.repeat(np.arange(n_img), counts)
    keys = set()
    while len(keys) < n_matches:
        a, b = rng.integers(0, offs[-1], 2)
        if img[a] < img[b]:
            keys.add((int(a), int(b)))
    a, b = map(np.array, zip(*sorted(keys)))
    g = MatchGraph(counts, a, b)
    g.weights[:] = rng.uniform(0.1, 1.0, g.n_matches)
    state = BundleState(pts, g)
    lo = state.common.min(axis=0) - 1.0
    span = float(np.max(state.common.max(axis=0) + 1.0 - lo))
    attach_grids(state, SplineGrid(lo, span, (4, 4, 4)))
    set_coefficients(state, [rng.normal(scale=2.0, size=(64, 3)) for _ in range(n_img)])
    return state


def energy_at(state, coeffs):
    set_coefficients(state, coeffs)
    return energy(state)


class TestEnergy:
    def test_registered_is_zero(self, rng):
        p = rng.uniform(0, 10, (15, 3))
        assert energy(BundleState([p, p, p], copies_graph(3, 15))) == 0.0

    def test_single_match(self):
        g = chain_graph([1, 1], [(0, 0, 1, 0)])
        st = BundleState([np.zeros((1, 3)), np.array([[3.0, 0.0, 4.0]])], g)
        assert energy(st) == pytest.approx(2 * 25.0)

    def test_two_forms_agree(self, rng):
        for _ in range(5):
            st = random_instance(rng)
            assert energy_by_points(st) == pytest.approx(energy(st), rel=1e-10)


class TestGradient:
    def test_finite_differences(self, rng):
        st = random_instance(rng)
        grads = gradient(st)
        coeffs = [c.copy() for c in st.active_coefficients()]
        h = 1e-4
        scale = max(np.max(np.abs(g)) for g in grads)
        for i in range(st.n_images):
            for j, d in [(int(rng.integers(64)), int(rng.integers(3))) for _ in range(15)]:
                up = [c.copy() for c in coeffs]
                dn = [c.copy() for c in coeffs]
                up[i][j, d] += h
                dn[i][j, d] -= h
                fd = (energy_at(st, up) - energy_at(st, dn)) / (2 * h)
                assert abs(fd - grads[i][j, d]) <= 1e-5 * max(abs(fd), 1e-3 * scale)

    def test_zero_distance(self, rng):
        p = rng.uniform(0, 10, (10, 3))
        st = BundleState([p, p], copies_graph(2, 10))
        attach_grids(st, SplineGrid.covering(p.min(0), p.max(0), 5.0))
        assert all(not np.any(g) for g in gradient(st))

    def test_common_shift_invariant(self, rng):
        st = random_instance(rng)
        before = gradient(st)
        v = np.array([1.5, -3.0, 0.7])
        set_coefficients(st, [c + v for c in st.active_coefficients()])
        after = gradient(st)
        for a, b in zip(before, after):
            assert np.allclose(a, b, atol=1e-9)
        assert energy(st) == pytest.approx(energy_at(st, [c - v for c in st.active_coefficients()]))


class TestInitLinear:
    def test_identical_sets(self, rng):
        p = rng.uniform(0, 100, (50, 3))
        st = BundleState([p, p], copies_graph(2, 50))
        init_linear(st, OptimizerConfig())
        a, b = (st.transforms[i].apply(p) for i in range(2))
        assert np.max(np.abs(a - b)) < 1e-6

    @pytest.mark.parametrize("outliers", [0.0, 0.3])
    def test_similarity(self, rng, outliers):
        a = rng.uniform(0, 100, (200, 3))
        b = 2.0 * a + np.array([10.0, 0, 0])
        pairs = [(0, k, 1, k) for k in range(200)]
        n_out = int(round(outliers / (1 - outliers) * 200))
        taken = set((k, k) for k in range(200))
        while len(pairs) < 200 + n_out:
            x, y = (int(v) for v in rng.integers(0, 200, 2))
            if (x, y) not in taken:
                taken.add((x, y))
                pairs.append((0, x, 1, y))
        st = BundleState([a, b], chain_graph([200, 200], pairs))
        init_linear(st, OptimizerConfig())
        pa, pb = st.transforms[0].apply(a), st.transforms[1].apply(b)
        diameter = np.linalg.norm(pa.max(0) - pa.min(0))
        assert np.max(np.linalg.norm(pa - pb, axis=1)) < 0.01 * diameter

    def test_image_without_matches(self, rng, caplog):
        p = rng.uniform(0, 10, (5, 3))
        st = BundleState([p, p, p], chain_graph([5, 5, 5], [(0, k, 1, k) for k in range(5)]))
        with caplog.at_level(logging.WARNING):
            init_linear(st, OptimizerConfig())
        assert "image 2 has no matches" in caplog.text
        assert np.array_equal(st.transforms[2].linear.s, np.ones(3))


class TestDescend:
    def test_identical_stays_zero(self, rng):
        p = rng.uniform(0, 200, (60, 3))
        st = BundleState([p, p, p], copies_graph(3, 60))
        init_linear(st, OptimizerConfig(init_iterations=5))
        descend_level(st, 100.0, OptimizerConfig(iterations_per_level=30))
        assert max(np.max(np.abs(t.grids[-1].coeffs)) for t in st.transforms) < 1e-9

    @pytest.mark.parametrize("rate, needed", [(0.0, 0.8), (0.6, 0.7)])
    def test_synthetic_levels(self, rate, needed):
        group = generate_synthetic(SyntheticSpec(seed=11, n_points=800, outlier_rate=rate))
        st = BundleState(group.point_sets, group.graph)
        cfg = OptimizerConfig()
        init_linear(st, cfg)
        before = inlier_residual(group, st.common)
        for lev, g in enumerate(cfg.levels, 1):
            descend_level(st, g, cfg, lev)
        after = inlier_residual(group, st.common)
        assert after <= (1 - needed) * before
        assert max(st.constraint_residuals) < 1e-9


class TestRegister:
    def test_single_image_identity(self, rng):
        p = rng.uniform(0, 10, (5, 3))
        res = register([p], MatchGraph([5], [], []))
        assert np.array_equal(res.transforms[0].apply(p), p)

    def test_empty_graph(self, rng):
        p = rng.uniform(0, 10, (5, 3))
        with pytest.raises(ValueError, match="empty match graph"):
            register([p, p], MatchGraph([5, 5], [], []))

    def test_desk_scale(self, desk_run):
        group, res, _ = desk_run
        assert inlier_residual(group, res.common) < 2 * group.spec.noise_sigma * np.sqrt(3)
        for tau in res.transforms:
            assert min_jacobian_on_grids(tau) > 0

    def test_composition_triggers(self):
        group = generate_synthetic(SyntheticSpec(seed=5, n_points=600, noise_sigma=0.5,
                                                 warp_spacing=100.0, max_displacement=80.0))
        res = register(group.point_sets, group.graph,
                       OptimizerConfig(levels=(100.0,), iterations_per_level=200))
        assert res.compositions[0] >= 2
        assert all(len(t.grids) == res.compositions[0] for t in res.transforms)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OptimizerConfig(gamma=0.0)
        with pytest.raises(ValueError):
            OptimizerConfig(levels=(100.0, -5.0))
