import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybrid_ddp.boxqp import QpInfeasible, project_feasible, solve_box, solve_box_simplex
from oracles import box_qp_enumerate, simplex_qp_grid


def random_box_qp(rng, n):
    A = rng.normal(size=(n, n))
    H = A.T @ A + 0.1 * np.eye(n)
    g = rng.normal(size=n) * 2.0
    lower = -rng.uniform(0.1, 1.5, n)
    upper = rng.uniform(0.1, 1.5, n)
    return H, g, lower, upper


def random_simplex_qp(rng, n):
    A = rng.normal(size=(n, n))
    H = A.T @ A + 0.1 * np.eye(n)
    g = rng.normal(size=n) * 2.0
    p_bar = rng.dirichlet(np.ones(n))
    return H, g, p_bar


class TestBox:
    def test_interior(self):
        s = solve_box(np.eye(2), np.array([0.2, -0.3]), -np.ones(2), np.ones(2))
        assert np.allclose(s.delta, [-0.2, 0.3], atol=1e-12)
        assert not s.clamped.any()

    def test_one_clamped(self):
        s = solve_box(np.eye(2), np.array([2.0, 0.0]), -np.ones(2), np.ones(2))
        assert np.allclose(s.delta, [-1.0, 0.0], atol=1e-12)
        assert list(s.clamped) == [True, False]
        assert s.delta[0] == -1.0

    def test_zero_gradient(self):
        s = solve_box(2 * np.eye(2), np.zeros(2), -np.ones(2), np.ones(2))
        assert np.array_equal(s.delta, np.zeros(2))

    def test_free_inverse_zero_on_clamped(self):
        H = np.array([[2.0, 0.5], [0.5, 1.0]])
        s = solve_box(H, np.array([5.0, 0.1]), -np.ones(2), np.ones(2))
        assert s.clamped[0] and not s.clamped[1]
        assert np.all(s.free_inverse[0] == 0.0) and np.all(s.free_inverse[:, 0] == 0.0)
        assert np.isclose(s.free_inverse[1, 1], 1.0)

    def test_matches_enumeration(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 5))
            H, g, lo, hi = random_box_qp(rng, n)
            s = solve_box(H, g, lo, hi)
            best, _ = box_qp_enumerate(H, g, lo, hi)
            assert s.objective <= best + 1e-6
            assert np.all(s.delta >= lo) and np.all(s.delta <= hi)

    def test_warm_start_at_optimum(self, rng):
        for _ in range(20):
            H, g, lo, hi = random_box_qp(rng, 3)
            s = solve_box(H, g, lo, hi)
            again = solve_box(H, g, lo, hi, warm_start=s.delta)
            assert again.iterations <= 2
            assert abs(again.objective - s.objective) <= 1e-10

    def test_unbounded_matches_newton(self, rng):
        H, g, _, _ = random_box_qp(rng, 4)
        s = solve_box(H, g, np.full(4, -1e9), np.full(4, 1e9))
        assert np.allclose(s.delta, -np.linalg.solve(H, g), atol=1e-9)

    def test_infinite_bounds(self, rng):
        H, g, _, _ = random_box_qp(rng, 3)
        s = solve_box(H, g, np.full(3, -np.inf), np.full(3, np.inf))
        assert np.allclose(s.delta, -np.linalg.solve(H, g), atol=1e-9)
        assert not s.clamped.any()

    @given(st.integers(0, 2**32 - 1))
    def test_clamped_entries_sit_on_bounds(self, seed):
        rng = np.random.default_rng(seed)
        H, g, lo, hi = random_box_qp(rng, int(rng.integers(1, 5)))
        s = solve_box(H, g, lo, hi)
        on_bound = (s.delta == lo) | (s.delta == hi)
        assert np.all(on_bound[s.clamped])
        grad = g + H @ s.delta
        assert np.linalg.norm(grad[~s.clamped]) <= 1e-6


class TestSimplex:
    def test_two_way(self):
        p_bar = np.array([0.5, 0.5])
        s = solve_box_simplex(np.eye(2), np.array([1.0, -1.0]), -p_bar, 1 - p_bar, [(0, 1)])
        assert np.allclose(s.delta, [-0.5, 0.5], atol=1e-12)
        assert np.allclose(p_bar + s.delta, [0.0, 1.0], atol=1e-12)

    def test_zero_gradient(self):
        p_bar = np.array([0.2, 0.3, 0.5])
        s = solve_box_simplex(np.eye(3), np.zeros(3), -p_bar, 1 - p_bar, [(0, 1, 2)])
        assert np.allclose(s.delta, 0.0, atol=1e-15)

    def test_three_way_hits_lower_bound(self):
        p_bar = np.full(3, 1 / 3)
        s = solve_box_simplex(np.eye(3), np.array([0.0, 0.0, 3.0]), -p_bar, 1 - p_bar, [(0, 1, 2)])
        assert np.allclose(p_bar + s.delta, [0.5, 0.5, 0.0], atol=1e-9)
        val, d = simplex_qp_grid(np.eye(3), np.array([0.0, 0.0, 3.0]), p_bar, 1e-3)
        assert np.allclose(p_bar + d, [0.5, 0.5, 0.0], atol=2e-3)

    def test_mixed_block(self):
        # one box coordinate followed by a probability block
        H = np.diag([2.0, 1.0, 1.0])
        g = np.array([4.0, 1.0, -1.0])
        p_bar = np.array([0.5, 0.5])
        lo = np.array([-1.0, -0.5, -0.5])
        hi = np.array([1.0, 0.5, 0.5])
        s = solve_box_simplex(H, g, lo, hi, [(1, 2)])
        assert np.allclose(s.delta, [-1.0, -0.5, 0.5], atol=1e-9)

    def test_matches_grid(self, rng):
        for _ in range(120):
            n = int(rng.integers(2, 5))
            H, g, p_bar = random_simplex_qp(rng, n)
            s = solve_box_simplex(H, g, -p_bar, 1 - p_bar, [tuple(range(n))])
            best, _ = simplex_qp_grid(H, g, p_bar, 1e-3)
            assert s.converged and s.objective <= best + 2e-3
            assert abs(np.sum(s.delta)) <= 1e-9

    @given(st.integers(0, 2**32 - 1))
    def test_feasibility(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 6))
        H, g, p_bar = random_simplex_qp(rng, n)
        s = solve_box_simplex(H, g, -p_bar, 1 - p_bar, [tuple(range(n))])
        p = p_bar + s.delta
        assert abs(p.sum() - 1.0) <= 1e-9
        assert np.all(p >= -1e-12) and np.all(p <= 1 + 1e-12)

    def test_capped_step_lands_on_bound(self):
        # the first step is cut short by the first entry hitting zero; the solver must keep going
        H = np.array([[1.4000419426671529, -0.3225465074614169, 0.8582707860052063],
                      [-0.3225465074614169, 0.6926309016037266, -0.6192327606758543],
                      [0.8582707860052063, -0.6192327606758543, 1.6740493533912641]])
        g = np.array([-0.8224736293737326, -0.2915784815565043, -4.5031908710258675])
        p_bar = np.array([0.08073188201586085, 0.8886041196031911, 0.030663998380948028])
        s = solve_box_simplex(H, g, -p_bar, 1 - p_bar, [(0, 1, 2)])
        best, _ = simplex_qp_grid(H, g, p_bar, 1e-3)
        assert s.converged and s.objective <= best + 1e-9
        assert np.allclose(p_bar + s.delta, [0.0, 0.0, 1.0], atol=1e-12)

    def test_warm_start_at_optimum(self, rng):
        H, g, p_bar = random_simplex_qp(rng, 4)
        s = solve_box_simplex(H, g, -p_bar, 1 - p_bar, [tuple(range(4))])
        again = solve_box_simplex(H, g, -p_bar, 1 - p_bar, [tuple(range(4))], warm_start=s.delta)
        assert again.iterations <= 2

    def test_infeasible_target(self):
        with pytest.raises(QpInfeasible):
            project_feasible(np.zeros(2), np.zeros(2), np.ones(2), [np.array([0, 1])], [3.0])
