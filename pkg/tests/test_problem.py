import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybrid_ddp.problem import (
    ControlBounds,
    ControlProblem,
    CostSpec,
    DifferentiationError,
    DynamicsSpec,
    RolloutDiverged,
    TrajectoryRecord,
    fd_hessian,
    fd_jacobian,
    finite_diff_jacobian,
    quadratize_cost,
    rollout,
    unvec,
    vec,
)

finite = st.floats(-10, 10, allow_nan=False)


def scalar_problem(f, running, final=lambda x, cov=None: 0.0 * x[..., 0], n=1, m=1):
    return ControlProblem(DynamicsSpec(f), CostSpec(running, final), ControlBounds.unbounded(m), n, m)


class TestJacobian:
    def test_identity(self):
        J = finite_diff_jacobian(lambda x: x, np.array([0.3, -2.0, 7.0]))
        assert np.allclose(J, np.eye(3), atol=1e-12)

    def test_square_map(self):
        J = finite_diff_jacobian(lambda x: np.array([x[0] ** 2, x[1]]), np.array([3.0, 5.0]), step=1e-5)
        assert np.allclose(J, [[6.0, 0.0], [0.0, 1.0]], atol=1e-6)

    @given(arrays(float, (3, 2), elements=finite), arrays(float, 2, elements=finite),
           st.floats(1e-7, 1e-2))
    def test_affine_exact_any_step(self, A, x, step):
        J = finite_diff_jacobian(lambda z: A @ z + 1.0, x, step)
        assert np.allclose(J, A, atol=1e-9 * max(1.0, np.abs(A).max() * np.abs(x).max() / step))

    def test_batched_matches_single(self, rng):
        z = rng.normal(size=(5, 3))

        def fun(p):
            return np.stack([np.sin(p[..., 0]) * p[..., 1], p[..., 2] ** 3], axis=-1)

        J = fd_jacobian(fun, z)
        for b in range(5):
            ref = finite_diff_jacobian(lambda q: fun(q[None, None])[0, 0], z[b], 1e-6)
            assert np.allclose(J[b], ref, atol=1e-7)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_jacobian(lambda x: x, np.zeros(1), 0.0)

    def test_non_finite_probe_names_coordinate(self):
        with pytest.raises(DifferentiationError) as info:
            finite_diff_jacobian(lambda x: np.array([x[0] if x[1] <= 0 else np.inf]), np.zeros(2))
        assert info.value.coordinate == 1


class TestQuadratize:
    def test_quadratic(self):
        c, cx, cu, cxx, cuu, cux = quadratize_cost(lambda x, u: 0.5 * x @ x + 0.5 * u @ u,
                                                   np.array([1.0, 2.0]), np.array([3.0]))
        assert np.allclose(cxx, np.eye(2), atol=1e-6)
        assert np.allclose(cuu, np.eye(1), atol=1e-6)
        assert np.allclose(cux, 0.0, atol=1e-6)
        assert np.allclose(cx, [1.0, 2.0], atol=1e-8) and np.allclose(cu, [3.0], atol=1e-8)

    def test_constant(self):
        _, cx, cu, cxx, cuu, cux = quadratize_cost(lambda x, u: 4.0, np.ones(2), np.ones(2))
        for d in (cx, cu, cxx, cuu, cux):
            assert np.all(d == 0.0)

    def test_bilinear(self):
        *_, cux = quadratize_cost(lambda x, u: x @ u, np.array([0.7]), np.array([-1.3]))
        assert np.allclose(cux, [[1.0]], atol=1e-6)

    @given(arrays(float, (4, 4), elements=st.floats(-3, 3)), arrays(float, 4, elements=st.floats(-3, 3)))
    def test_hessian_symmetric(self, M, z):
        _, _, H = fd_hessian(lambda p: np.sin(p @ M @ np.ones(4)) + (p @ M * p).sum(-1), z[None])
        assert np.array_equal(H, np.swapaxes(H, -1, -2))


class TestRollout:
    def test_empty_horizon(self):
        p = scalar_problem(lambda x, u, a: x + u, lambda x, u, a=None, cov=None: u[..., 0] ** 2,
                           lambda x, cov=None: 3.0 * x[..., 0])
        rec = rollout(p, [2.0], np.zeros((0, 1)))
        assert rec.total_cost == 6.0 and rec.states.shape == (1, 1)

    def test_identity_zero_cost(self):
        p = scalar_problem(lambda x, u, a: x, lambda x, u, a=None, cov=None: 0.0, n=2)
        rec = rollout(p, [1.0, -1.0], np.ones((4, 1)))
        assert rec.total_cost == 0.0
        assert np.all(rec.states == [1.0, -1.0])

    def test_hand_arithmetic(self):
        p = scalar_problem(lambda x, u, a: x + u, lambda x, u, a=None, cov=None: u[..., 0] ** 2)
        rec = rollout(p, [0.0], np.array([[1.0], [1.0]]))
        assert np.allclose(rec.states[:, 0], [0.0, 1.0, 2.0])
        assert rec.stage_costs.sum() == 2.0

    @given(arrays(float, (6, 1), elements=st.floats(-2, 2)))
    def test_totals_and_purity(self, U):
        p = scalar_problem(lambda x, u, a: 0.9 * x + u, lambda x, u, a=None, cov=None: x[..., 0] ** 2 + u[..., 0] ** 2,
                           lambda x, cov=None: 5.0 * x[..., 0] ** 2)
        r1 = rollout(p, [0.5], U)
        r2 = rollout(p, [0.5], U)
        assert len(r1.states) == len(r1.controls) + 1 == 7
        assert r1.total_cost == r2.total_cost
        assert abs(r1.total_cost - (r1.stage_costs.sum() + r1.final_cost)) <= 1e-9 * max(1.0, abs(r1.total_cost))

    def test_divergence(self):
        p = scalar_problem(lambda x, u, a: x * 1e200, lambda x, u, a=None, cov=None: 0.0)
        with np.errstate(over="ignore"), pytest.raises(RolloutDiverged) as info:
            rollout(p, [1.0], np.zeros((3, 1)))
        assert info.value.t == 2


def test_vec_is_column_major():
    M = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(vec(M), [1.0, 3.0, 2.0, 4.0])
    assert np.array_equal(unvec(vec(M), 2), M)


def test_bounds_validation():
    with pytest.raises(ValueError):
        ControlBounds(np.array([1.0]), np.array([0.0]))
    b = ControlBounds(np.array([-1.0]), np.array([1.0])) + ControlBounds(np.zeros(2), np.ones(2))
    assert np.array_equal(b.clamp(np.array([3.0, -1.0, 0.5])), [1.0, 0.0, 0.5])


def test_problem_validation():
    with pytest.raises(ValueError):
        ControlProblem(DynamicsSpec(lambda x, u, a: x), CostSpec(None, None), ControlBounds.unbounded(2), 1, 3)
    with pytest.raises(ValueError):
        ControlProblem(DynamicsSpec(lambda x, u, a: x), CostSpec(None, None), ControlBounds.unbounded(3), 1, 3,
                       simplex_groups=((0, 1), (1, 2)))


def test_record_shape_checks():
    with pytest.raises(ValueError):
        TrajectoryRecord(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros(3), np.zeros(3), 0.0)
