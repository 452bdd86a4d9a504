import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hubreg.keypoints import DESCRIPTOR_LENGTH, KeypointSet
from hubreg.matching import (MatchCriteria, MatchFormatError, MatchGraph, build_graph,
                             load_matches, match_pair, save_matches)


def random_set(rng, n, sign=None, image_id=0):
    d = rng.normal(size=(n, DESCRIPTOR_LENGTH))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    signs = rng.choice([-1, 1], n) if sign is None else np.full(n, sign)
    return KeypointSet(rng.uniform(0, 100, (n, 3)), np.full(n, 3.0), signs, np.ones(n), d, image_id)


def fig4_graph():
    # P = {p1_1, p1_2, p2_1, p2_2, p3_1, p3_2, p4_1}; five matches, the last an outlier
    pairs = [(0, 0, 1, 0), (2, 0, 3, 0), (0, 1, 1, 1), (0, 1, 2, 1), (1, 1, 3, 0)]
    ai, ia, bi, ib = zip(*pairs)
    return MatchGraph.from_local([2, 2, 2, 1], ai, ia, bi, ib)


def test_identity_copy(rng):
    a = random_set(rng, 200)
    ia, ib, d = match_pair(a, a)
    assert np.array_equal(ia, np.arange(200)) and np.array_equal(ib, np.arange(200))
    assert np.all(d == 0)


def test_sign_filter(rng):
    a, b = random_set(rng, 50, sign=1), random_set(rng, 50, sign=-1)
    b.descriptors[:] = a.descriptors
    assert len(match_pair(a, b)[0]) == 0
    assert len(match_pair(a, b, MatchCriteria(require_same_sign=False))[0]) == 50


def test_scale_filter(rng):
    a = random_set(rng, 30)
    b = KeypointSet(a.positions, a.scales * 2.5, a.signs, a.responses, a.descriptors)
    assert len(match_pair(a, b)[0]) == 0
    loose = MatchCriteria(max_scale_log_ratio=math.log(3.0))
    assert len(match_pair(a, b, loose)[0]) == 30


@pytest.mark.parametrize("brute", [True, False])
def test_permutation_oracle(rng, brute):
    n = 1000
    a = random_set(rng, n)
    perm = rng.permutation(n)
    desc = a.descriptors[perm] + rng.normal(scale=0.01, size=(n, DESCRIPTOR_LENGTH))
    n_junk = n // 10
    junk = rng.normal(size=(n_junk, DESCRIPTOR_LENGTH))
    desc[:n_junk] = junk
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    b = KeypointSet(a.positions[perm], a.scales[perm], a.signs[perm], a.responses[perm], desc)
    ia, ib, _ = match_pair(a, b, brute=brute)
    truth = perm[n_junk:]                    # b index j holds a index perm[j]
    found = dict(zip(ib.tolist(), ia.tolist()))
    recovered = sum(found.get(j) == truth[j - n_junk] for j in range(n_junk, n))
    assert recovered >= 0.95 * len(truth)


def test_brute_and_tree_agree(rng):
    a, b = random_set(rng, 400), random_set(rng, 300)
    loose = MatchCriteria(max_descriptor_distance=2.0, nn_ratio=1.0)
    r1, r2 = match_pair(a, b, loose, brute=True), match_pair(a, b, loose, brute=False)
    for x, y in zip(r1, r2):
        assert np.allclose(x, y)


def test_symmetric(rng):
    a, b = random_set(rng, 150), random_set(rng, 170)
    b.descriptors[:100] = a.descriptors[:100] + 0.05 * rng.normal(size=(100, DESCRIPTOR_LENGTH))
    b.signs[:100] = a.signs[:100]
    ia, ib, _ = match_pair(a, b)
    jb, ja, _ = match_pair(b, a)
    assert set(zip(ia.tolist(), ib.tolist())) == set(zip(ja.tolist(), jb.tolist()))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 0.95))
def test_ratio_monotone(seed, lo):
    r = np.random.default_rng(seed)
    a, b = random_set(r, 60), random_set(r, 60)
    tight = set(zip(*match_pair(a, b, MatchCriteria(nn_ratio=lo))[:2]))
    loose = set(zip(*match_pair(a, b, MatchCriteria(nn_ratio=min(1.0, lo + 0.05)))[:2]))
    assert tight <= loose


class TestGraph:
    def test_fig4_rows(self):
        g = fig4_graph()
        m = g.incidence_matrix().toarray()
        assert m.shape == (5, 7)
        assert np.all((m == 1).sum(axis=1) == 1) and np.all((m == -1).sum(axis=1) == 1)
        assert np.all(m.sum(axis=1) == 0)

    def test_fig4_unit_vectors(self):
        g = fig4_graph()
        m = g.incidence_matrix().toarray()
        for p in range(7):
            e = np.zeros((7, 3))
            e[p] = 1.0
            assert np.array_equal(g.incidence_apply(e)[:, 0], m[:, p])

    def test_fig4_neighbourhoods(self):
        g = fig4_graph()
        assert g.degree.tolist() == [1, 2, 1, 2, 1, 1, 2]
        for p in range(7):
            for k in g.neighbors(p):
                assert p in (g.a[k], g.b[k])

    def test_constant_in_null_space(self):
        g = fig4_graph()
        assert not np.any(g.incidence_apply(np.tile([3.0, -1.0, 2.0], (7, 1))))

    def test_transpose_dense_oracle(self, rng):
        counts = [5, 7, 8]
        pairs = {(int(i), int(j)) for i, j in rng.integers(0, 20, (60, 2))}
        img = np.repeat(np.arange(3), counts)
        pairs = sorted((i, j) for i, j in pairs if img[i] < img[j])
        a, b = map(np.array, zip(*pairs))
        g = MatchGraph(counts, a, b)
        x = rng.normal(size=(20, 3))
        dense = g.incidence_matrix().toarray()
        assert np.allclose(g.transpose_apply(g.incidence_apply(x)), dense.T @ dense @ x, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            fig4_graph().incidence_apply(np.zeros((6, 3)))

    def test_rejects_duplicates_and_orientation(self):
        with pytest.raises(ValueError):
            MatchGraph([1, 1], [0, 0], [1, 1])
        with pytest.raises(ValueError):
            MatchGraph([1, 1], [1], [0])

    def test_complete_graph_count(self, rng):
        base = random_set(rng, 40)
        sets = [KeypointSet(base.positions, base.scales, base.signs, base.responses,
                            base.descriptors, i) for i in range(4)]
        assert build_graph(sets).n_matches == 40 * 4 * 3 // 2

    def test_no_matches(self, rng):
        g = build_graph([random_set(rng, 20, sign=1), random_set(rng, 20, sign=-1)])
        assert g.n_matches == 0
        assert g.transpose_apply(g.incidence_apply(np.zeros((40, 3)))).shape == (40, 3)

    def test_needs_two_images(self, rng):
        with pytest.raises(ValueError, match="need at least 2 images"):
            build_graph([random_set(rng, 5)])

    def test_canonical_order(self, rng):
        base = random_set(rng, 30)
        sets = [KeypointSet(base.positions, base.scales, base.signs, base.responses,
                            base.descriptors, i) for i in range(3)]
        g = build_graph(sets, threads=3)
        assert np.all(np.diff(g.a * g.n_points + g.b) > 0)


class TestFile:
    def test_round_trip(self, tmp_path):
        g = fig4_graph()
        g.distances[:] = [0.1, 0.2, 0.3, 0.4, 1 / 3]
        save_matches(tmp_path / "m.txt", g)
        h = load_matches(tmp_path / "m.txt")
        assert np.array_equal(h.a, g.a) and np.array_equal(h.b, g.b)
        assert np.array_equal(h.distances, g.distances)
        assert h.counts.tolist() == [2, 2, 2, 1]

    def test_bad_header(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("0 0 1 0 0.5\n")
        with pytest.raises(MatchFormatError):
            load_matches(p)

    def test_index_out_of_range(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("# images 2\n# counts 1 1\n0 0 1 3 0.5\n")
        with pytest.raises((MatchFormatError, ValueError)):
            load_matches(p)
