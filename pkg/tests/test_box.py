import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybrid_ddp.belief import GaussianBelief, covariance_map, ekf_step
from hybrid_ddp.envs import box
from hybrid_ddp.envs.box import BoxParams

P = BoxParams()
LIMIT = P.alpha_max


def state(cf=(0.0, 0.0), mu=1.0, dist=1.0, w=0.0):
    return np.array([0.3, -0.2, w, cf[0], cf[1], mu, dist])


def corner_positions(w, center):
    c, s = math.cos(w), math.sin(w)
    R = np.array([[c, -s], [s, c]])
    local = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])
    return center + local @ R.T


def torque_sign_oracle(x, edge, u_e, alpha):
    """Sign of the pushing torque about the CF, built from world-frame corner geometry."""
    corners = corner_positions(x[2], x[:2])
    start, end = corners[edge], corners[(edge + 1) % 4]
    tangent = end - start
    inward = np.array([-tangent[1], tangent[0]])
    contact = start + u_e * tangent
    push = math.cos(alpha) * inward + math.sin(alpha) * tangent
    c, s = math.cos(x[2]), math.sin(x[2])
    cf_world = x[:2] + np.array([[c, -s], [s, c]]) @ x[3:5]
    r = contact - cf_world
    return np.sign(r[0] * push[1] - r[1] * push[0])


class TestPushPhysics:
    @pytest.mark.parametrize("edge", range(4))
    def test_cf_aligned_push_translates(self, rng, edge):
        for _ in range(25):
            cf = rng.uniform(-0.3, 0.3, 2)
            x = state(cf, w=rng.uniform(-1, 1))
            # contact point on the line through the CF along the inward normal
            t = box.EDGE_TANGENT[edge]
            u_e = float((cf - box.EDGE_START[edge]) @ t)
            out = box.box_push_dynamics(x, [u_e, 0.0, rng.uniform(0.01, 3.0)], edge, P)
            assert abs(out[2] - x[2]) <= 1e-10

    def test_rotation_sign_matches_torque(self, rng):
        checked = 0
        while checked < 100:
            edge = int(rng.integers(4))
            x = state(rng.uniform(-0.3, 0.3, 2), mu=rng.uniform(0.3, 2.0), w=rng.uniform(-np.pi, np.pi))
            u_e = rng.uniform(0, 1)
            alpha = rng.uniform(-np.arctan(x[5]), np.arctan(x[5])) * 0.99
            expected = torque_sign_oracle(x, edge, u_e, alpha)
            out = box.box_push_dynamics(x, [u_e, alpha, 1.0], edge, P)
            dw = out[2] - x[2]
            if abs(dw) < 1e-12:
                continue
            assert np.sign(dw) == expected
            checked += 1

    def test_left_of_cf_line_turns_counter_clockwise(self):
        # bottom edge, pushed upward right of the center: counter-clockwise
        out = box.box_push_dynamics(state(), [0.8, 0.0, 1.0], 0, P)
        assert out[2] > 0.0

    @given(st.floats(-LIMIT, LIMIT), st.floats(0.1, 3.0), st.integers(0, 3), st.floats(0, 1))
    def test_cone_oracle(self, alpha, mu, edge, u_e):
        x = state((0.1, -0.05), mu=mu)
        *_, sliding = box.push_response(x, [u_e, alpha, 1.0], edge, P)
        outside = abs(math.tan(alpha)) > mu
        assert bool(sliding) == (abs(alpha) > math.atan(mu))
        if abs(abs(math.tan(alpha)) - mu) > 1e-9:
            assert bool(sliding) == outside
        slide = box.finger_slide(x, [u_e, alpha, 1.0], edge, P)
        if sliding:
            assert np.sign(slide) == np.sign(alpha)
        else:
            assert abs(slide) <= 1e-15

    def test_sliding_moves_contact_along_push(self):
        x = state(mu=0.5)
        fwd = box.finger_slide(x, [0.5, 1.0, 1.0], 0, P)
        back = box.finger_slide(x, [0.5, -1.0, 1.0], 0, P)
        assert fwd > 0.0 and back < 0.0

    def test_box_never_outruns_finger(self, rng):
        for _ in range(500):
            edge = int(rng.integers(4))
            x = state(rng.uniform(-0.3, 0.3, 2), mu=rng.uniform(0.1, 2.0), dist=rng.uniform(0.2, 2.0),
                      w=rng.uniform(-np.pi, np.pi))
            u = [rng.uniform(0, 1), rng.uniform(-LIMIT, LIMIT), rng.uniform(0.01, 3.0)]
            v_center, omega, v_contact, v_finger, _ = box.push_response(x, u, edge, P)
            v_cf = v_center - omega * np.array([x[4], -x[3]])
            assert np.linalg.norm(v_cf) * P.dt <= u[2] * P.dt + 1e-9

    def test_friction_unchanged(self, rng):
        x = state((0.1, 0.2), mu=0.7, dist=1.3)
        out = box.box_push_dynamics(x, [0.3, 0.4, 2.0], 1, P)
        assert np.array_equal(out[3:], x[3:])

    def test_batched_matches_single(self, rng):
        X = np.stack([state(rng.uniform(-0.3, 0.3, 2), w=rng.uniform(-1, 1)) for _ in range(10)])
        U = rng.uniform([0, -LIMIT, 0.01], [1, LIMIT, 3], size=(10, 3))
        E = rng.integers(0, 4, 10)
        batch = box.box_push_dynamics(X, U, E, P)
        for i in range(10):
            assert np.allclose(batch[i], box.box_push_dynamics(X[i], U[i], E[i], P), rtol=0, atol=1e-15)


class TestExecution:
    def test_aligned_belief_hits(self):
        x = state(w=0.2)
        u_true, hit = box.executed_push(x, x[:3], np.array([0.4, 0.1, 1.0]), 2, P)
        assert hit and np.allclose(u_true, [0.4, 0.1, 1.0], atol=1e-12)

    def test_offset_belief_misses(self):
        x = state()
        believed = x[:3] + np.array([0.8, 0.0, 0.0])
        step = box.true_box_step(P)
        out = step(x, np.concatenate([believed, x[3:]]), np.array([0.5, 0.0, 1.0]), 0)
        assert np.array_equal(out, x)


class TestObservation:
    def test_identity_block(self):
        x = np.array([1.0, 2.0, 0.3, 0.1, 0.1, 1.0, 1.0])
        assert np.array_equal(box.box_observation(x), [1.0, 2.0, 0.3])
        assert box.box_observation(np.zeros((5, 7))).shape == (5, 3)

    def test_noise(self):
        N = box.observation_noise(np.zeros(7), P)
        assert np.allclose(np.sqrt(np.diag(N)), [1e-4, 1e-4, 0.033], rtol=1e-15)
        assert np.count_nonzero(N - np.diag(np.diag(N))) == 0

    def test_jacobian_hides_cf_and_friction(self):
        H = box.observation_jacobian(np.zeros(7))
        assert np.all(H[:, 3:] == 0.0)

    def test_update_shrinks_position_variance(self, rng):
        problem = box.box_problem(P, observed=True)
        for _ in range(30):
            cov = box.initial_covariance(P, cf_unknown=True, friction_unknown=bool(rng.integers(2)))
            A = rng.normal(size=(7, 7)) * 0.05
            cov = cov + A @ A.T
            b = GaussianBelief(state(rng.uniform(-0.3, 0.3, 2)), cov)
            u = [rng.uniform(0, 1), rng.uniform(-LIMIT, LIMIT), rng.uniform(0.01, 3.0)]
            edge = int(rng.integers(4))
            prior = covariance_map(box.box_problem(P), b.mean[None], np.array([u]), np.array([edge]),
                                   b.cov[None])[0] + box.process_noise(b.mean, u, edge, P)
            post = ekf_step(b, u, edge, problem).cov
            assert np.all(np.diag(post)[:2] <= np.diag(prior)[:2] + 1e-15)


class TestCost:
    def test_obstacle_at_half_probability(self):
        d = math.sqrt(0.5 * math.sqrt(2.0))
        xy = np.array([1.0 - d, 1.0])
        assert box.obstacle_cost(xy) == pytest.approx(-0.1 * math.log(0.5), abs=1e-12)
        assert box.obstacle_cost(xy) == pytest.approx(0.069315, abs=5e-7)

    def test_corner_center(self):
        assert box.corner_cost(0.5, 0.0) == pytest.approx(0.2 * math.exp(-5.0), abs=1e-15)
        assert box.corner_cost(0.5, 0.0) == pytest.approx(0.0013476, abs=5e-8)

    def test_corner_band_narrows(self):
        assert box.corner_cost(0.8, 0.2) > box.corner_cost(0.8, 0.0)

    def test_corner_band_saturates(self):
        # beyond 3 var = pi/2 the band is cos(pi/2) = 0 on both sides
        assert box.corner_cost(0.5, 1.0) == pytest.approx(box.corner_cost(0.5, 10.0), abs=0)

    def test_final_zero_at_target(self):
        x = np.array([0.0, 0.0, 0.0, 0.1, 0.1, 1.0, 1.0])
        assert box.box_final_cost(x, np.zeros((7, 7)), P) == 0.0

    def test_final_adds_variances(self):
        cov = np.diag(np.arange(1.0, 8.0))
        assert box.box_final_cost(np.zeros(7), cov, P) == 28.0

    def test_running_terms(self):
        x = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0])
        u = np.array([0.5, 0.2, 1.0])
        expected = 1e-6 * (0.04 + 1.0) + box.obstacle_cost(x[:2]) + 0.2 * math.exp(-5.0)
        assert box.box_cost(x, u, None, np.zeros((7, 7)), P) == pytest.approx(expected, abs=1e-15)

    def test_finite_far_from_obstacle_and_over_controls(self, rng):
        X = np.zeros((300, 7))
        X[:, :3] = rng.uniform(-1e3, 1e3, (300, 3))
        X[:, 5:] = 1.0
        U = rng.uniform([0, -LIMIT, 0.01], [1, LIMIT, 3], size=(300, 3))
        assert np.all(np.isfinite(box.box_cost(X, U, None, None, P)))
        assert np.all(np.isfinite(box.obstacle_cost(np.array([[1e6, 1e6]]))))


class TestPerimeter:
    @pytest.mark.parametrize("q, edge, u_e", [(0.5, 0, 0.5), (3.25, 3, 0.25), (4.0, 0, 0.0), (-0.25, 3, 0.75)])
    def test_examples(self, q, edge, u_e):
        e, u = box.continuous_box_parameterization(q)
        assert e == edge and u == pytest.approx(u_e, abs=1e-15)

    # edge + u_e rounds up to the next edge for u_e within one ulp of 1
    @given(st.integers(0, 3), st.floats(0, 1 - 2**-40))
    def test_roundtrip(self, edge, u_e):
        e, u = box.continuous_box_parameterization(box.perimeter_coordinate(edge, u_e))
        assert e == edge and u == pytest.approx(u_e, abs=1e-12)


class TestCfGrid:
    def test_single(self):
        assert np.array_equal(box.sample_cf_grid(1), [[0.5, 0.5]])

    @pytest.mark.parametrize("n", [12, 52])
    def test_counts_and_range(self, n):
        g = box.sample_cf_grid(n, 3)
        assert g.shape == (n, 2)
        assert np.all(g >= 0.2) and np.all(g <= 0.8)

    def test_deterministic(self):
        assert np.array_equal(box.sample_cf_grid(52, 7), box.sample_cf_grid(52, 7))
        assert not np.array_equal(box.sample_cf_grid(52, 7), box.sample_cf_grid(52, 8))

    def test_covers_quadrants(self):
        g = box.sample_cf_grid(12, 0) - 0.5
        quadrants = {(bool(a > 0), bool(b > 0)) for a, b in g}
        assert len(quadrants) == 4

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            box.sample_cf_grid(0)

    def test_relative(self):
        assert np.array_equal(box.cf_relative([0.2, 0.8]), [-0.3, 0.30000000000000004])


def test_initial_covariance_sds():
    c = box.initial_covariance(P, cf_unknown=True, friction_unknown=True)
    assert np.allclose(np.sqrt(np.diag(c)), [0.01, 0.01, 0.1, 0.2, 0.2, 0.2, 0.2], rtol=1e-15)
    c = box.initial_covariance(P)
    assert np.all(np.diag(c)[3:] == 0.0)
