import dataclasses
import math

import numpy as np
import pytest
import yaml

from jumpopt import manifold as mf
from jumpopt import robot as rb

from helpers import fd_wrt_state, fd_wrt_vector, point_cloud_inertia, rel_err


@pytest.fixture(scope="module")
def params():
    return rb.RobotParams.default()


def sample_leg_config(rng, params, leg):
    """Random joint angles whose foot lies inside the shell, below the HAA axis."""
    while True:
        q = np.array(
            [
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.3, 1.3),
                leg.knee_sign * rng.uniform(0.35, 2.4),
            ]
        )
        p = rb.leg_fk(leg, q)
        r = np.linalg.norm(p)
        wz = -np.sin(q[0]) * p[1] + np.cos(q[0]) * p[2]
        if params.workspace.r_min + 0.005 < r < params.workspace.r_max - 0.005 and wz < -0.02:
            return q, p


def sample_state(rng, params, spread=0.05):
    """States near stance with feet clear of the workspace clamp boundary."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    pose = mf.Pose(
        np.array([0.0, 0.0, params.nominal_height]) + rng.normal(size=3) * spread,
        mf.exp_so3(axis * rng.uniform(0.0, 0.4)),
    )
    feet = rb.nominal_state(params).feet + rng.normal(size=(4, 3)) * spread
    return mf.State(pose, rng.normal(size=3), rng.normal(size=3), feet)


class TestConfig:
    def test_default_loads(self, params):
        assert params.total_mass == pytest.approx(55.0, abs=1e-12)
        assert len(params.legs) == 4
        assert [leg.name for leg in params.legs] == list(rb.LEG_NAMES)

    def test_missing_key_reports_path(self, tmp_path):
        doc = yaml.safe_load(
            rb.resources.files("jumpopt").joinpath("configs/quadruped_55kg.yaml").read_text()
        )
        del doc["legs"]["lh"]["lengths"]
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump(doc))
        with pytest.raises(rb.RobotConfigError, match=r"legs\.lh\.lengths"):
            rb.RobotParams.from_file(bad)
        with pytest.raises(rb.RobotConfigError, match="bad.yaml"):
            rb.RobotParams.from_file(bad)

    def test_syntax_error_reports_line(self, tmp_path):
        bad = tmp_path / "broken.yaml"
        bad.write_text("base:\n  mass: 1.0\n   com: [0,0,0]\n")
        with pytest.raises(rb.RobotConfigError, match="line 3"):
            rb.RobotParams.from_file(bad)

    def test_mass_checksum_enforced(self, tmp_path):
        doc = yaml.safe_load(
            rb.resources.files("jumpopt").joinpath("configs/quadruped_55kg.yaml").read_text()
        )
        doc["mass"] = 54.0
        bad = tmp_path / "mass.yaml"
        bad.write_text(yaml.safe_dump(doc))
        with pytest.raises(rb.RobotConfigError, match="link-mass sum"):
            rb.RobotParams.from_file(bad)

    def test_total_mass_is_link_sum(self, params):
        total = params.base.mass + sum(l.mass for leg in params.legs for l in leg.links)
        assert params.total_mass == pytest.approx(total, abs=1e-12)


class TestLegKinematics:
    def test_fk_ik_round_trip(self, params):
        rng = np.random.default_rng(101)
        for _ in range(10_000):
            leg = params.legs[rng.integers(4)]
            q, p = sample_leg_config(rng, params, leg)
            q_ik = rb.leg_ik(params, leg, p)
            assert np.abs(rb.leg_fk(leg, q_ik) - p).max() < 1e-9

    def test_nominal_stance_angles(self, params):
        # Foot directly under the flexion plane: zero abduction, cosine-rule pair.
        for leg in params.legs:
            h = params.nominal_height
            target = np.array([0.0, leg.side * leg.d_ab, -h])
            q = rb.leg_ik(params, leg, target)
            assert q[0] == pytest.approx(0.0, abs=1e-12)
            l1, l2 = leg.l_thigh, leg.l_shank
            c3 = (h * h - l1 * l1 - l2 * l2) / (2 * l1 * l2)
            assert q[2] == pytest.approx(leg.knee_sign * math.acos(c3), abs=1e-12)

    def test_fully_stretched_leg_has_zero_knee(self, params):
        for leg in params.legs:
            reach = math.sqrt((leg.l_thigh + leg.l_shank) ** 2 + leg.d_ab**2)
            stretched = dataclasses.replace(
                params, workspace=dataclasses.replace(params.workspace, r_max=reach)
            )
            target = np.array([0.0, leg.side * leg.d_ab, -(leg.l_thigh + leg.l_shank)])
            q = rb.leg_ik(stretched, leg, target)
            assert q[2] == pytest.approx(0.0, abs=1e-9)

    def test_unreachable_raises(self, params):
        leg = params.legs[0]
        with pytest.raises(rb.UnreachableTargetError):
            rb.leg_ik(params, leg, np.array([0.0, 0.0, -0.9]))
        with pytest.raises(rb.UnreachableTargetError):
            rb.leg_ik(params, leg, np.array([0.0, 0.02, -0.05]))

    def test_knee_branch_never_flips(self, params):
        rng = np.random.default_rng(102)
        for _ in range(500):
            leg = params.legs[rng.integers(4)]
            _, p = sample_leg_config(rng, params, leg)
            q = rb.leg_ik(params, leg, p)
            assert leg.knee_sign * q[2] >= 0.0

    def test_ik_within_joint_limits(self, params):
        rng = np.random.default_rng(103)
        for _ in range(500):
            leg = params.legs[rng.integers(4)]
            raw = rng.normal(size=3) * 0.4
            raw[2] -= 0.4
            q = rb.leg_ik(params, leg, rb.normalise_workspace(params, raw))
            assert np.all(q >= leg.limits[:, 0] - 1e-12)
            assert np.all(q <= leg.limits[:, 1] + 1e-12)

    def test_fk_jacobian_matches_fd(self, params):
        rng = np.random.default_rng(104)
        for _ in range(100):
            leg = params.legs[rng.integers(4)]
            q, _ = sample_leg_config(rng, params, leg)
            J = rb.leg_fk_jacobian(leg, q)
            fd = fd_wrt_vector(lambda qq: rb.leg_fk(leg, qq), q)
            assert rel_err(J, fd) < 1e-6


class TestWorkspace:
    def test_interior_unchanged(self, params):
        p = np.array([0.05, 0.1, -0.4])
        assert np.array_equal(rb.normalise_workspace(params, p), p)

    def test_projection_radii(self, params):
        ws = params.workspace
        far = np.array([0.1, 0.2, -0.9])
        near = np.array([0.01, 0.02, -0.05])
        assert np.linalg.norm(rb.normalise_workspace(params, far)) == pytest.approx(
            ws.r_max - ws.clamp_margin, abs=1e-12
        )
        assert np.linalg.norm(rb.normalise_workspace(params, near)) == pytest.approx(
            ws.r_min + ws.clamp_margin, abs=1e-12
        )

    def test_idempotent(self, params):
        rng = np.random.default_rng(105)
        for _ in range(200):
            p = rng.normal(size=3)
            once = rb.normalise_workspace(params, p)
            twice = rb.normalise_workspace(params, once)
            assert np.array_equal(once, twice)

    def test_degenerate_at_hip(self, params):
        p = rb.normalise_workspace(params, np.zeros(3))
        assert np.linalg.norm(p) == pytest.approx(
            params.workspace.r_min + params.workspace.clamp_margin, abs=1e-12
        )


class TestImplicitConfiguration:
    def test_total_on_wild_states(self, params):
        rng = np.random.default_rng(106)
        for _ in range(200):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            x = mf.State(
                mf.Pose(rng.normal(size=3) * 2.0, mf.exp_so3(axis * rng.uniform(0, 3.0))),
                rng.normal(size=3),
                rng.normal(size=3),
                rng.normal(size=(4, 3)) * 3.0,
            )
            q = rb.implicit_configuration(params, x)
            assert np.all(np.isfinite(q))

    def test_nominal_state_matches_config(self, params):
        q = rb.implicit_configuration(params, rb.nominal_state(params))
        assert np.abs(q - params.nominal_q).max() < 1e-9

    def test_configuration_jacobian_matches_fd(self, params):
        rng = np.random.default_rng(107)
        for _ in range(50):
            x = sample_state(rng, params)
            J = rb.configuration_jacobian(params, x)
            fd = fd_wrt_state(lambda xx: rb.implicit_configuration(params, xx), x)
            assert rel_err(J, fd) < 1e-6

    def test_co_moving_base_and_feet(self, params):
        rng = np.random.default_rng(108)
        x = sample_state(rng, params)
        J = rb.configuration_jacobian(params, x)
        R = x.pose.rotation()
        for u in np.eye(3):
            dx = np.zeros(mf.NT)
            dx[mf.POS] = u
            for i in range(4):
                dx[12 + 3 * i : 15 + 3 * i] = R @ u
            assert np.abs(J @ dx).max() < 1e-12

    def test_singular_stretch_raises(self, params):
        leg = params.legs[0]
        reach = math.sqrt((leg.l_thigh + leg.l_shank) ** 2 + leg.d_ab**2)
        stretched = dataclasses.replace(
            params,
            workspace=dataclasses.replace(params.workspace, r_max=reach, clamp_margin=0.0),
        )
        x0 = rb.nominal_state(stretched)
        feet = x0.feet.copy()
        for i, lg in enumerate(stretched.legs):
            feet[i, 2] = 0.52 - (lg.l_thigh + lg.l_shank)  # straight down, full stretch
        x = mf.State(x0.pose, x0.v_b, x0.omega, feet)
        with pytest.raises(rb.SingularJacobianError):
            rb.configuration_jacobian(stretched, x)


class TestCompositeInertia:
    def test_symmetric_positive_definite(self, params):
        rng = np.random.default_rng(109)
        for _ in range(100):
            q = np.concatenate(
                [sample_leg_config(rng, params, leg)[0] for leg in params.legs]
            )
            res = rb.composite_inertia(params, q)
            assert np.abs(res.inertia - res.inertia.T).max() < 1e-12
            ev = np.sort(np.linalg.eigvalsh(res.inertia))
            assert ev[0] > 0.0
            # Triangle inequality of any rigid body.
            assert ev[2] <= ev[0] + ev[1] + 1e-12

    def test_derivatives_match_fd(self, params):
        rng = np.random.default_rng(110)
        for _ in range(30):
            q = np.concatenate(
                [sample_leg_config(rng, params, leg)[0] for leg in params.legs]
            )
            res = rb.composite_inertia(params, q)
            fd_I = fd_wrt_vector(lambda qq: rb.composite_inertia(params, qq).inertia, q)
            fd_c = fd_wrt_vector(lambda qq: rb.composite_inertia(params, qq).com, q)
            assert rel_err(res.dI_dq, fd_I) < 1e-6
            assert rel_err(res.dcom_dq, fd_c) < 1e-6

    def test_matches_point_cloud_oracle(self, params):
        rng = np.random.default_rng(111)
        q_cfg = np.concatenate(
            [sample_leg_config(rng, params, leg)[0] for leg in params.legs]
        )
        inertia, com = point_cloud_inertia(params, q_cfg, rng)
        res = rb.composite_inertia(params, q_cfg)
        assert np.abs(res.com - com).max() < 1e-9
        assert np.abs(res.inertia - inertia).max() / np.abs(inertia).max() < 0.01

    def test_deterministic(self, params):
        q = params.nominal_q
        a = rb.composite_inertia(params, q)
        b = rb.composite_inertia(params, q)
        assert np.array_equal(a.inertia, b.inertia)
        assert np.array_equal(a.dI_dq, b.dI_dq)
