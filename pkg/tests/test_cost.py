import numpy as np
import pytest

from jumpopt import centroidal as ct
from jumpopt import cost as co
from jumpopt import manifold as mf
from jumpopt import robot as rb

from helpers import fd_wrt_state, fd_wrt_vector, random_state, rel_err


@pytest.fixture(scope="module")
def params():
    return rb.RobotParams.default()


def sample_knot(rng, params):
    """Random knot with every penalty residual at least 1e-3 from its kink."""
    x0 = rb.nominal_state(params)
    ws = params.workspace
    hi = ws.r_max - ws.barrier_margin
    lo = ws.r_min + ws.barrier_margin
    while True:
        pose = mf.Pose(
            x0.pose.p + rng.normal(size=3) * 0.05,
            mf.exp_so3(rng.normal(size=3) * 0.2),
        )
        feet = x0.feet + rng.normal(size=(4, 3)) * 0.05
        x = mf.State(pose, rng.normal(size=3), rng.normal(size=3), feet)
        radii = np.linalg.norm(rb.hip_targets(params, x), axis=1)
        if np.all(np.minimum(np.abs(radii - hi), np.abs(radii - lo)) > 1e-3):
            break
    mu = 0.7
    while True:
        # mostly-supporting forces with mild cone violations, the regime the
        # solver actually visits
        fz = rng.uniform(20.0, 200.0, size=4)
        forces = np.column_stack([rng.normal(size=(4, 2)) * (0.6 * mu * fz)[:, None], fz])
        c = np.stack(
            [
                forces[:, 0] - mu * forces[:, 2],
                -forces[:, 0] - mu * forces[:, 2],
                forces[:, 1] - mu * forces[:, 2],
                -forces[:, 1] - mu * forces[:, 2],
                -forces[:, 2],
            ]
        )
        if np.abs(c).min() > 1e-3:
            break
    u = ct.Control(forces, rng.normal(size=(4, 3)))
    return x, u


class TestCostWeights:
    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            co.CostWeights(-np.ones(24), np.ones(24), 1.0, 1.0, 0.7)
        with pytest.raises(ValueError, match="penalty"):
            co.CostWeights(np.ones(24), np.ones(24), -1.0, 1.0, 0.7)

    def test_nonpositive_mu_rejected(self):
        with pytest.raises(ValueError, match="friction"):
            co.CostWeights(np.ones(24), np.ones(24), 1.0, 1.0, 0.0)


class TestStateCost:
    def test_zero_residual(self):
        rng = np.random.default_rng(300)
        x = random_state(rng)
        Q = rng.uniform(0.1, 2.0, mf.NT)
        value, l_x, l_xx = co.state_cost(x, x, Q)
        assert value == 0.0
        assert np.array_equal(l_x, np.zeros(mf.NT))
        # J is exactly -I at zero residual, so the Hessian is just diag(Q).
        assert np.abs(l_xx - np.diag(Q)).max() < 1e-12

    def test_half_convention_on_euclidean_axis(self):
        x = random_state(np.random.default_rng(301))
        x_ref = mf.State(x.pose, x.v_b + np.array([1.0, 0, 0]), x.omega, x.feet)
        Q = np.zeros(mf.NT)
        Q[6] = 3.0
        value, l_x, _ = co.state_cost(x_ref, x, Q)
        assert value == pytest.approx(1.5, abs=1e-12)
        assert l_x[6] == pytest.approx(-3.0, abs=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(302)
        for _ in range(60):
            x_ref = random_state(rng, max_angle=2.0)
            x = random_state(rng, max_angle=2.0)
            Q = rng.uniform(0.1, 3.0, mf.NT)
            _, l_x, l_xx = co.state_cost(x_ref, x, Q)
            fd_g = fd_wrt_state(lambda xx: co.state_cost(x_ref, xx, Q)[0], x)
            fd_h = fd_wrt_state(lambda xx: co.state_cost(x_ref, xx, Q)[1], x)
            assert rel_err(l_x, fd_g) < 1e-6
            assert rel_err(l_xx, fd_h) < 1e-5

    def test_curvature_term_is_load_bearing(self):
        # 40 degrees of yaw error: the exact Hessian passes the FD check and
        # the Gauss-Newton variant visibly fails it.
        yaw = np.deg2rad(40.0)
        x = rb.nominal_state(rb.RobotParams.default())
        x_ref = mf.State(
            mf.Pose(x.pose.p, np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])),
            x.v_b,
            x.omega,
            x.feet,
        )
        Q = np.ones(mf.NT)
        _, _, exact = co.state_cost(x_ref, x, Q)
        _, _, gauss_newton = co.state_cost(x_ref, x, Q, curvature=False)
        fd_h = fd_wrt_state(lambda xx: co.state_cost(x_ref, xx, Q)[1], x)
        assert rel_err(exact, fd_h) < 1e-5
        assert rel_err(gauss_newton, fd_h) > 1e-2

    def test_gauss_newton_fails_for_all_large_residuals(self):
        rng = np.random.default_rng(303)
        checked = 0
        while checked < 20:
            x_ref = random_state(rng, max_angle=2.0)
            x = random_state(rng, max_angle=2.0)
            if np.linalg.norm(mf.difference(x_ref, x)[3:6]) < 0.3:
                continue
            Q = np.ones(mf.NT)
            _, _, exact = co.state_cost(x_ref, x, Q)
            _, _, gn = co.state_cost(x_ref, x, Q, curvature=False)
            fd_h = fd_wrt_state(lambda xx: co.state_cost(x_ref, xx, Q)[1], x)
            assert rel_err(exact, fd_h) < 1e-5
            assert rel_err(gn, fd_h) > 1e-2
            checked += 1


class TestControlCost:
    def test_zero(self):
        rng = np.random.default_rng(304)
        u = ct.Control(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
        value, l_u, l_uu = co.control_cost(u, u, np.ones(24))
        assert value == 0.0
        assert np.array_equal(l_u, np.zeros(24))
        assert np.array_equal(l_uu, np.eye(24))

    def test_unit_axis_quadratic(self):
        u_ref = ct.Control.zero()
        forces = np.zeros((4, 3))
        forces[0, 0] = 1.0
        u = ct.Control(forces, np.zeros((4, 3)))
        R = np.full(24, 5.0)
        value, _, _ = co.control_cost(u_ref, u, R)
        assert value == pytest.approx(2.5, abs=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(305)
        u_ref = ct.Control(rng.normal(size=(4, 3)) * 10, rng.normal(size=(4, 3)))
        u = ct.Control(rng.normal(size=(4, 3)) * 10, rng.normal(size=(4, 3)))
        R = rng.uniform(0.1, 2.0, 24)
        _, l_u, l_uu = co.control_cost(u_ref, u, R)
        fd = fd_wrt_vector(
            lambda uu: co.control_cost(u_ref, ct.Control.from_vector(uu), R)[0],
            u.as_vector(),
        )
        assert rel_err(l_u, fd) < 1e-8
        assert np.array_equal(l_uu, np.diag(R))


class TestKinematicBarrier:
    def test_interior_is_exactly_zero(self, params):
        value, l_x, l_xx = co.kinematic_barrier(params, rb.nominal_state(params), 50.0)
        assert value == 0.0
        assert np.array_equal(l_x, np.zeros(mf.NT))
        assert np.array_equal(l_xx, np.zeros((mf.NT, mf.NT)))

    def test_outer_violation_closed_form(self, params):
        x0 = rb.nominal_state(params)
        hi = params.workspace.r_max - params.workspace.barrier_margin
        hip_w = x0.pose.p + params.legs[0].hip_offset
        d = x0.feet[0] - hip_w
        feet = x0.feet.copy()
        feet[0] = hip_w + d / np.linalg.norm(d) * (hi + 0.05)
        value, _, _ = co.kinematic_barrier(params, mf.State(x0.pose, x0.v_b, x0.omega, feet), 10.0)
        assert value == pytest.approx(0.5 * 10.0 * 0.05**2, abs=1e-12)

    def test_inner_violation_active(self, params):
        x0 = rb.nominal_state(params)
        lo = params.workspace.r_min + params.workspace.barrier_margin
        hip_w = x0.pose.p + params.legs[2].hip_offset
        d = x0.feet[2] - hip_w
        feet = x0.feet.copy()
        feet[2] = hip_w + d / np.linalg.norm(d) * (lo - 0.03)
        value, l_x, _ = co.kinematic_barrier(params, mf.State(x0.pose, x0.v_b, x0.omega, feet), 4.0)
        assert value == pytest.approx(0.5 * 4.0 * 0.03**2, abs=1e-12)
        assert np.abs(l_x).max() > 0.0

    def test_matches_finite_differences(self, params):
        rng = np.random.default_rng(306)
        x0 = rb.nominal_state(params)
        hi = params.workspace.r_max - params.workspace.barrier_margin
        for _ in range(40):
            pose = mf.Pose(
                x0.pose.p + rng.normal(size=3) * 0.03,
                mf.exp_so3(rng.normal(size=3) * 0.1),
            )
            feet = x0.feet + rng.normal(size=(4, 3)) * 0.02
            x = mf.State(pose, rng.normal(size=3), rng.normal(size=3), feet)
            # straddle the outer boundary without sitting on the kink
            feet = x.feet.copy()
            for i, leg in enumerate(params.legs):
                hip_w = x.pose.p + x.pose.rotation() @ leg.hip_offset
                d = feet[i] - hip_w
                r = rng.uniform(hi - 0.08, hi + 0.08)
                if abs(r - hi) < 1e-3:
                    r = hi + 0.01
                feet[i] = hip_w + d / np.linalg.norm(d) * r
            x = mf.State(x.pose, x.v_b, x.omega, feet)
            _, l_x, l_xx = co.kinematic_barrier(params, x, 7.0)
            fd_g = fd_wrt_state(lambda xx: co.kinematic_barrier(params, xx, 7.0)[0], x)
            fd_h = fd_wrt_state(lambda xx: co.kinematic_barrier(params, xx, 7.0)[1], x)
            assert rel_err(l_x, fd_g) < 1e-5
            assert rel_err(l_xx, fd_h) < 1e-5


class TestFrictionPenalty:
    def test_inside_cone_is_zero(self):
        u = ct.Control(np.array([[0.0, 0, 100]] * 4), np.zeros((4, 3)))
        value, l_u, l_uu = co.friction_penalty(None, u, [True] * 4, 0.7, 2.0)
        assert value == 0.0
        assert np.array_equal(l_u, np.zeros(24))
        assert np.array_equal(l_uu, np.zeros((24, 24)))

    def test_single_facet_hand_value(self):
        forces = np.array([[100.0, 0.0, 10.0], [0, 0, 100], [0, 0, 100], [0, 0, 100]])
        u = ct.Control(forces, np.zeros((4, 3)))
        value, _, _ = co.friction_penalty(None, u, [True] * 4, 0.7, 1.0)
        # one active facet: 100 - 0.7*10 = 93
        assert value == pytest.approx(4324.5, abs=1e-9)

    def test_unilateral_floor(self):
        forces = np.zeros((4, 3))
        forces[1, 2] = -20.0
        u = ct.Control(forces, np.zeros((4, 3)))
        value, l_u, _ = co.friction_penalty(None, u, [True] * 4, 0.5, 3.0)
        # pulling force activates -F_z and all four pyramid facets
        facet = 0.5 * 20.0
        assert value == pytest.approx(0.5 * 3.0 * (20.0**2 + 4 * facet**2), abs=1e-9)
        assert l_u[ct.FORCE_COLS[1]][2] < 0.0

    def test_swing_legs_ignored(self):
        forces = np.full((4, 3), 500.0)
        u = ct.Control(forces, np.zeros((4, 3)))
        value, l_u, l_uu = co.friction_penalty(None, u, [False] * 4, 0.7, 2.0)
        assert value == 0.0
        assert np.array_equal(l_u, np.zeros(24))
        assert np.array_equal(l_uu, np.zeros((24, 24)))

    def test_matches_finite_differences(self, params):
        rng = np.random.default_rng(307)
        for _ in range(40):
            _, u = sample_knot(rng, params)
            stance = [bool(rng.integers(2)) for _ in range(4)]
            _, l_u, l_uu = co.friction_penalty(None, u, stance, 0.7, 3.0)
            uv = u.as_vector()
            fd_g = fd_wrt_vector(
                lambda uu: co.friction_penalty(None, ct.Control.from_vector(uu), stance, 0.7, 3.0)[0],
                uv,
            )
            fd_h = fd_wrt_vector(
                lambda uu: co.friction_penalty(None, ct.Control.from_vector(uu), stance, 0.7, 3.0)[1],
                uv,
            )
            assert rel_err(l_u, fd_g) < 1e-6
            assert rel_err(l_uu, fd_h) < 1e-6

    def test_hessian_positive_semidefinite(self, params):
        rng = np.random.default_rng(308)
        _, u = sample_knot(rng, params)
        _, _, l_uu = co.friction_penalty(None, u, [True] * 4, 0.7, 2.0)
        assert np.linalg.eigvalsh(l_uu).min() >= -1e-12


class TestTotalCost:
    def test_additivity(self, params):
        rng = np.random.default_rng(309)
        x, u = sample_knot(rng, params)
        x_ref, u_ref = sample_knot(rng, params)
        w = co.CostWeights(rng.uniform(0.1, 2, 24), rng.uniform(0.1, 2, 24), 5.0, 2.0, 0.7)
        stance = [True, False, True, True]
        ev = co.total_cost(params, w, x_ref, u_ref, stance, x, u)
        parts = (
            co.state_cost(x_ref, x, w.Q)[0]
            + co.control_cost(u_ref, u, w.R)[0]
            + co.kinematic_barrier(params, x, w.w_kin)[0]
            + co.friction_penalty(x, u, stance, w.mu, w.w_fr)[0]
        )
        assert ev.value == parts

    def test_no_cross_term(self, params):
        rng = np.random.default_rng(310)
        x, u = sample_knot(rng, params)
        w = co.CostWeights(np.ones(24), np.ones(24), 5.0, 2.0, 0.7)
        ev = co.total_cost(params, w, x, u, [True] * 4, x, u)
        assert np.array_equal(ev.l_xu, np.zeros((24, 24)))

    def test_zero_at_reference_interior(self, params):
        x = rb.nominal_state(params)
        fz = params.total_mass * 9.81 / 4
        u = ct.Control(np.array([[0.0, 0, fz]] * 4), np.zeros((4, 3)))
        w = co.CostWeights(np.ones(24), np.ones(24), 5.0, 2.0, 0.7)
        ev = co.total_cost(params, w, x, u, [True] * 4, x, u)
        assert ev.value == 0.0

    def test_matches_finite_differences(self, params):
        # references are perturbations of the knot, as the solver sees them;
        # fully unrelated references drive the value high enough that central
        # differences of it drown in cancellation noise
        rng = np.random.default_rng(311)
        w = co.CostWeights(
            rng.uniform(0.1, 2, 24), rng.uniform(0.1, 2, 24), 5.0, 2.0, 0.7
        )
        for k in range(200):
            x, u = sample_knot(rng, params)
            x_ref = mf.integrate(x, rng.normal(size=24) * 0.1)
            u_ref = ct.Control.from_vector(u.as_vector() + rng.normal(size=24) * 5.0)
            stance = [bool(rng.integers(2)) for _ in range(4)]
            ev = co.total_cost(params, w, x_ref, u_ref, stance, x, u)
            fd_lx = fd_wrt_state(
                lambda xx: co.total_cost(params, w, x_ref, u_ref, stance, xx, u).value, x
            )
            fd_lu = fd_wrt_vector(
                lambda uu: co.total_cost(
                    params, w, x_ref, u_ref, stance, x, ct.Control.from_vector(uu)
                ).value,
                u.as_vector(),
            )
            assert rel_err(ev.l_x, fd_lx) < 1e-5
            assert rel_err(ev.l_u, fd_lu) < 1e-5
            if k % 4 == 0:  # second-order FD is the expensive part
                fd_lxx = fd_wrt_state(
                    lambda xx: co.total_cost(params, w, x_ref, u_ref, stance, xx, u).l_x, x
                )
                fd_luu = fd_wrt_vector(
                    lambda uu: co.total_cost(
                        params, w, x_ref, u_ref, stance, x, ct.Control.from_vector(uu)
                    ).l_u,
                    u.as_vector(),
                )
                assert rel_err(ev.l_xx, fd_lxx) < 1e-5
                assert rel_err(ev.l_uu, fd_luu) < 1e-5

    def test_value_nonnegative(self, params):
        rng = np.random.default_rng(312)
        w = co.CostWeights(np.ones(24), np.ones(24), 5.0, 2.0, 0.7)
        for _ in range(50):
            x, u = sample_knot(rng, params)
            x_ref, u_ref = sample_knot(rng, params)
            ev = co.total_cost(params, w, x_ref, u_ref, [True] * 4, x, u)
            assert ev.value >= 0.0
