import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from lambdatree.errors import CensoredDistanceError, SearchBudgetExceeded
from lambdatree.measure import parse_measure
from lambdatree.mmspace import (FiniteMmSpace, UltrametricSpace, ball_mass, ball_masses,
                                block_count, covering_number, delta_restriction,
                                distance_distribution, functionals_table, is_ultrametric,
                                leaf_order_sample, matrix_to_csv, rows_to_csv,
                                sample_distance_matrix, thin_mass, tree_from_history, v_delta,
                                v_tilde_delta, xi_epsilon, DistanceMatrixSample)
from lambdatree.simulate import (CoalescentHistory, MergeEvent, SimConfig, block_frequencies,
                                 simulate)

BS = parse_measure("bs")
TWO = FiniteMmSpace(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([0.5, 0.5]))
ONE = FiniteMmSpace(np.zeros((1, 1)), np.array([1.0]))
TRIANGLE = FiniteMmSpace.uniform(1.0 - np.eye(3))


def random_tree(n, seed, horizon=math.inf, measure=BS):
    return tree_from_history(simulate(measure, SimConfig(n, horizon=horizon, seed=seed)))


# -- independent brute-force oracles --------------------------------------------------

def brute_xi(d, eps):
    m = d.shape[0]
    for k in range(m, 0, -1):
        for sub in itertools.combinations(range(m), k):
            if all(d[i, j] > eps for i, j in itertools.combinations(sub, 2)):
                return k
    return 0


def brute_ball(d, w, i, eps):
    pos = w > 0
    if np.all(w[pos] == w[pos][0]):
        # uniform masses: a ball holds count/k, correctly rounded
        return int(np.count_nonzero(pos & (d[i] <= eps))) / int(pos.sum())
    return min(math.fsum(w[d[i] <= eps]), 1.0)


def brute_thin(d, w, eps, delta):
    return math.fsum(w[i] for i in range(len(w)) if w[i] > 0 and brute_ball(d, w, i, eps) <= delta)


def brute_moduli(d, w, delta):
    # both functionals jump only at distances; check right endpoints of each segment
    cuts = sorted(set(d[d > 0].ravel().tolist()))
    starts = [0.0] + cuts
    ends = cuts + [math.inf]
    v, vt = math.inf, math.inf
    for a, b in zip(starts, ends):
        t = brute_thin(d, w, a, delta)
        if vt == math.inf and t == 0:
            vt = a
        if max(a, t) < b:
            v = min(v, max(a, t))
    return v, vt


@st.composite
def finite_spaces(draw, max_points=8, ultra=False):
    m = draw(st.integers(1, max_points))
    rng = np.random.default_rng(draw(st.integers(0, 2**32)))
    if ultra:
        # random ultrametric from random merge heights on random leaf order
        gaps = np.round(rng.uniform(0.0, 1.0, m), 1)
        gaps[0] = 0.0
        d = np.zeros((m, m))
        for a in range(m):
            for b in range(a + 1, m):
                d[a, b] = d[b, a] = gaps[a + 1: b + 1].max()
    else:
        pts = np.round(rng.uniform(0, 1, (m, 2)), 1)
        d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    w = rng.dirichlet(np.ones(m))
    if m > 1 and draw(st.booleans()):
        w[rng.integers(m)] = 0.0
        w /= w.sum()
    return FiniteMmSpace(d, w)


# -- construction --------------------------------------------------------------------------

class TestTree:
    def test_two_leaves(self):
        h = CoalescentHistory(2, (MergeEvent(0.7, (0, 1), 2),))
        assert tree_from_history(h).distance(0, 1) == 0.7

    def test_three_leaves(self):
        h = CoalescentHistory(3, (MergeEvent(0.3, (0, 1), 3), MergeEvent(0.9, (2, 3), 4)))
        d = tree_from_history(h).distance_matrix()
        assert d.tolist() == [[0.0, 0.3, 0.9], [0.3, 0.0, 0.9], [0.9, 0.9, 0.0]]

    @settings(max_examples=30)
    @given(st.integers(2, 60), st.integers(0, 2**32), st.sampled_from(["bs", "kingman", "beta:1,3"]))
    def test_strong_triangle_and_lca(self, n, seed, spec):
        t = random_tree(n, seed, measure=parse_measure(spec))
        d = t.distance_matrix()
        assert is_ultrametric(d, rtol=0.0)
        for i, j in itertools.combinations(range(n), 2):
            assert d[i, j] == t.distance(i, j)

    def test_subset_matrix_matches_pairwise(self):
        t = random_tree(80, 3)
        idx = [5, 70, 5, 12, 0, 79]
        d = t.distance_matrix(idx)
        for a, b in itertools.product(range(len(idx)), repeat=2):
            assert d[a, b] == t.distance(idx[a], idx[b])

    def test_censored(self):
        h = simulate(BS, SimConfig(30, horizon=0.2, seed=4))
        with pytest.raises(CensoredDistanceError):
            tree_from_history(h, allow_censored=False)
        t = tree_from_history(h)
        assert t.censored and t.diameter == 0.2
        d = t.distance_matrix()
        assert d.max() == 0.2
        for fn in (lambda s: v_delta(s, 0.1), lambda s: v_tilde_delta(s, 0.1),
                   lambda s: xi_epsilon(s, 0.05)):
            with pytest.raises(CensoredDistanceError):
                fn(t)
        assert xi_epsilon(t, 0.05, allow_censored=True) >= 1

    def test_invalid_finite_spaces(self):
        with pytest.raises(ValueError):
            FiniteMmSpace(np.array([[0.0, 1.0], [2.0, 0.0]]), [0.5, 0.5])
        with pytest.raises(ValueError):
            FiniteMmSpace(np.array([[0, 1, 5], [1, 0, 1], [5, 1, 0]], float), np.ones(3) / 3)
        with pytest.raises(ValueError):
            FiniteMmSpace(np.zeros((2, 2)), [0.7, 0.7])


# -- samples -------------------------------------------------------------------------------

class TestSamples:
    def test_one_point(self):
        s = sample_distance_matrix(ONE, 5, seed=1)
        assert s.matrix.shape == (5, 5) and not s.matrix.any()

    def test_two_point_law(self):
        vals = [sample_distance_matrix(TWO, 2, seed=s).matrix[0, 1] for s in range(4000)]
        assert abs(np.mean(vals) - 0.5) < 4 * 0.5 / math.sqrt(4000)
        assert set(vals) == {0.0, 1.0}

    def test_reproducible(self):
        t = random_tree(50, 1)
        a = sample_distance_matrix(t, 7, seed=9)
        b = sample_distance_matrix(t, 7, seed=9)
        assert a.indices == b.indices and np.array_equal(a.matrix, b.matrix)
        with pytest.raises(ValueError):
            sample_distance_matrix(t, 1)

    def test_delta_restriction_example(self):
        r = np.array([[0, 0.1, 0.9, 0.2], [0.1, 0, 0.9, 0.2], [0.9, 0.9, 0, 0.9], [0.2, 0.2, 0.9, 0]])
        s = DistanceMatrixSample(r, (0, 1, 2, 3))
        out = delta_restriction(s, 0.5)
        assert out.indices == (0, 1, 3)
        assert np.array_equal(out.matrix, r[np.ix_([0, 1, 3], [0, 1, 3])])
        assert delta_restriction(s, 1.0).indices == (0, 1, 2, 3)
        assert delta_restriction(s, 0.05).indices == (0,)
        with pytest.raises(ValueError):
            delta_restriction(s, 0.0)

    def test_leaf_order_sample(self):
        t = random_tree(40, 2)
        s = leaf_order_sample(t, 10)
        assert s.indices == tuple(range(10))
        assert np.array_equal(s.matrix, t.distance_matrix(range(10)))

    def test_csv(self):
        s = DistanceMatrixSample(np.array([[0, 0.5], [0.5, 0]]), (4, 9))
        assert s.to_csv() == "i,j,point_i,point_j,r\n0,1,4,9,0.5\n"
        assert matrix_to_csv(np.zeros((1, 1))) == "i,j,point_i,point_j,r\n"


# -- distance distribution and balls -------------------------------------------------

class TestDistribution:
    def test_examples(self):
        w = distance_distribution(ONE)
        assert w.support.tolist() == [0.0] and w.probs.tolist() == [1.0]
        w = distance_distribution(TWO)
        assert w.mass_at(0.0) == 0.5 and w.mass_at(1.0) == 0.5
        w = distance_distribution(TRIANGLE)
        assert w.mass_at(0.0) == pytest.approx(1 / 3) and w.mass_at(1.0) == pytest.approx(2 / 3)

    @settings(max_examples=30)
    @given(st.integers(2, 40), st.integers(0, 2**32))
    def test_tree_fast_path(self, n, seed):
        t = random_tree(n, seed)
        fast = distance_distribution(t)
        slow = distance_distribution(FiniteMmSpace(t.distance_matrix(), t.masses))
        assert np.allclose(fast.support, slow.support, rtol=0, atol=0)
        assert np.allclose(fast.probs, slow.probs, rtol=0, atol=1e-13)
        assert math.fsum(fast.probs) == pytest.approx(1.0, abs=1e-13)

    def test_ball_examples(self):
        assert ball_mass(TWO, 0, 0.5) == 0.5
        assert ball_mass(TWO, 0, 1.0) == 1.0
        assert ball_mass(TRIANGLE, 2, 5.0) == pytest.approx(1.0)

    @settings(max_examples=25)
    @given(st.integers(2, 50), st.integers(0, 2**32))
    def test_ball_mass_equals_block_frequency(self, n, seed):
        h = simulate(BS, SimConfig(n, seed=seed))
        t = tree_from_history(h)
        for eps in [0.0, *[e.time for e in h.events], 0.5 * h.absorption_time]:
            bm = ball_masses(t, eps)
            freqs = block_frequencies(h, eps)
            # each leaf sees exactly the frequency of its block
            assert sorted(set(bm.tolist()), reverse=True) == sorted(set(freqs.tolist()), reverse=True)
            assert math.fsum(bm) == pytest.approx(math.fsum(freqs ** 2) * n, rel=1e-12)
            for i in (0, n - 1):
                assert ball_mass(t, i, eps) == bm[i]


# -- moduli ------------------------------------------------------------------------------

class TestModuli:
    def test_examples(self):
        assert v_delta(ONE, 0.5) == 0.0 and v_tilde_delta(ONE, 0.5) == 0.0
        assert v_tilde_delta(TWO, 0.6) == 1.0
        assert v_tilde_delta(TWO, 0.4) == 0.0
        # thin mass is 1 on [0, 1): v_0.6 is the first eps with thin <= eps, i.e. 1
        assert v_delta(TWO, 0.6) == 1.0

    def test_invalid_delta(self):
        with pytest.raises(ValueError):
            v_delta(TWO, 0.0)

    @settings(max_examples=80)
    @given(finite_spaces(), st.floats(0.01, 1.0))
    def test_against_brute_force(self, space, delta):
        v, vt = brute_moduli(space.dist, space.masses, delta)
        assert v_delta(space, delta) == pytest.approx(v, abs=1e-12)
        assert v_tilde_delta(space, delta) == vt
        assert v_delta(space, delta) <= v_tilde_delta(space, delta)

    @settings(max_examples=40)
    @given(finite_spaces())
    def test_small_delta_gives_zero(self, space):
        pos = space.masses[space.masses > 0]
        assert v_delta(space, 0.99 * pos.min()) == 0.0

    @settings(max_examples=25)
    @given(st.integers(2, 60), st.integers(0, 2**32), st.floats(0.005, 0.6))
    def test_tree_profile_matches_generic(self, n, seed, delta):
        t = random_tree(n, seed)
        f = FiniteMmSpace(t.distance_matrix(), t.masses, ultrametric=True)
        assert v_delta(t, delta) == pytest.approx(v_delta(f, delta), abs=1e-12)
        assert v_tilde_delta(t, delta) == v_tilde_delta(f, delta)
        for eps in (0.0, 0.1, 0.5):
            assert thin_mass(t, eps, delta) == pytest.approx(
                brute_thin(f.dist, f.masses, eps, delta), abs=1e-12)


# -- separated sets ---------------------------------------------------------------------

class TestXi:
    def test_examples(self):
        assert xi_epsilon(ONE, 0.1) == 1
        assert xi_epsilon(TRIANGLE, 0.5) == 3
        assert xi_epsilon(TRIANGLE, 1.0) == 1
        with pytest.raises(ValueError):
            xi_epsilon(TRIANGLE, 0.0)

    def test_zero_mass_points_excluded(self):
        s = FiniteMmSpace(1.0 - np.eye(3), [0.5, 0.5, 0.0])
        assert xi_epsilon(s, 0.5) == 2

    @settings(max_examples=80)
    @given(finite_spaces(max_points=9), st.floats(0.01, 1.5))
    def test_against_brute_force_and_covering(self, space, eps):
        d = space.distance_matrix(space.support())
        xi = xi_epsilon(space, eps)
        assert xi == brute_xi(d, eps)
        assert covering_number(space, eps) <= xi <= covering_number(space, eps / 2)

    @settings(max_examples=40)
    @given(finite_spaces(ultra=True), st.floats(0.01, 1.0))
    def test_ultrametric_path(self, space, eps):
        assert space.ultrametric
        assert xi_epsilon(space, eps) == brute_xi(space.distance_matrix(space.support()), eps)

    @settings(max_examples=25)
    @given(st.integers(2, 80), st.integers(0, 2**32))
    def test_monotone_and_diameter(self, n, seed):
        t = random_tree(n, seed)
        grid = np.linspace(0.01, t.diameter, 15)
        vals = [xi_epsilon(t, e) for e in grid]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 1
        assert xi_epsilon(t, 0.01) <= block_count(t, 0.01)

    @settings(max_examples=25)
    @given(st.integers(3, 40), st.integers(0, 2**32), st.floats(0.01, 1.0))
    def test_tree_counts_blocks_with_sampled_leaves(self, n, seed, eps):
        t = random_tree(n, seed)
        m = min(n, 10)
        sub = t.with_uniform_mass_on_first(m)
        assert xi_epsilon(sub, eps) == brute_xi(t.distance_matrix(range(m)), eps)
        assert xi_epsilon(t, eps) == block_count(t, eps)

    def test_subsample_consistency(self):
        t = random_tree(30, 6)
        rng = np.random.default_rng(0)
        for eps in (0.05, 0.2, 0.6):
            target = xi_epsilon(t, eps)
            seen = []
            while len(set(seen)) < 30:
                seen.extend(rng.integers(0, 30, 3).tolist())
                mat = t.distance_matrix(seen)
                got = xi_epsilon(DistanceMatrixSample(mat, tuple(seen), ultrametric=True), eps)
                assert got <= target
            # the support is covered by now
            assert set(seen) == set(range(30)) and got == target

    def test_budget(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(0, 1, (60, 3))
        d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
        space = FiniteMmSpace.uniform(d)
        with pytest.raises(SearchBudgetExceeded) as info:
            xi_epsilon(space, 0.3, node_budget=5)
        assert info.value.lower <= info.value.upper
        exact = xi_epsilon(space, 0.3)
        assert info.value.lower <= exact <= info.value.upper


def test_functionals_table_csv():
    rows = functionals_table(TWO, [0.5], [0.6])
    assert rows == [{"functional": "xi", "parameter": 0.5, "value": 2},
                    {"functional": "v_delta", "parameter": 0.6, "value": 1.0},
                    {"functional": "v_tilde_delta", "parameter": 0.6, "value": 1.0}]
    assert rows_to_csv(rows).splitlines()[0] == "functional,parameter,value"
