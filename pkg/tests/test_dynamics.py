"""Analytic and closed-form oracles for the simulation core."""

import math
from dataclasses import replace

import numpy as np
import pytest

from kincatch.dynamics import (
    ArmModel, ContactParams, ContactReport, LaunchConfig, ObjectState,
    ObjectVariant, RobotState, WorldState,
    arm_accel, ballistic_state, check_collision, contact_force, fk_palm,
    gravity_compensation, inverse_dynamics, mass_matrix, mass_matrix_batch,
    inverse_dynamics_batch, fk_palm_batch, mechanical_energy,
    sample_object_init, step_world, training_variants,
)

RNG = np.random.default_rng(12345)


def pendulum(length=0.4, mass=1.3):
    # gravity along +x so that theta measures the swing from the hanging pose
    return ArmModel(n_joints=1, link_lengths=(length,), link_masses=(mass,),
                    link_com_offsets=(length,), joint_damping=(0.0,),
                    joint_armature=(0.0,), q_limits=((-6.3, 6.3),),
                    qd_limits=((-50.0, 50.0),), tau_limits=((-100.0, 100.0),),
                    gravity=(9.81, 0.0), base_position=(0.0, 0.0))


def default_variant():
    return ObjectVariant.make("sphere", 0.9, 0.05)


class TestFkPalm:
    def test_extended_chain(self):
        arm = ArmModel(base_position=(0.0, 0.0))
        palm = fk_palm([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], arm)
        assert palm.position == pytest.approx((0.75, 0.0), abs=1e-15)

    def test_zero_qd_zero_velocity(self):
        arm = ArmModel()
        for _ in range(5):
            q = RNG.uniform(-2, 2, 3)
            palm = fk_palm(q, np.zeros(3), arm)
            assert palm.velocity == (0.0, 0.0)

    def test_velocity_matches_finite_difference(self):
        arm = ArmModel()
        h = 1e-6
        for _ in range(20):
            q = RNG.uniform(-2, 2, 3)
            qd = RNG.uniform(-3, 3, 3)
            palm = fk_palm(q, qd, arm)
            plus = fk_palm(q + h * qd, qd, arm)
            minus = fk_palm(q - h * qd, qd, arm)
            fd = (np.array(plus.position) - np.array(minus.position)) / (2 * h)
            assert np.allclose(palm.velocity, fd, atol=1e-6)

    def test_normal_unit_and_perpendicular(self):
        arm = ArmModel()
        for _ in range(10):
            q = RNG.uniform(-2, 2, 3)
            palm = fk_palm(q, np.zeros(3), arm)
            theta = float(np.sum(q))
            link_dir = np.array([math.cos(theta), math.sin(theta)])
            assert abs(np.dot(palm.normal, link_dir)) < 1e-12
            assert np.linalg.norm(palm.normal) == pytest.approx(1.0, abs=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            fk_palm([0.0, 0.0], [0.0, 0.0, 0.0], ArmModel())

    def test_batch_agrees_with_scalar(self):
        arm = ArmModel()
        q = RNG.uniform(-2, 2, (7, 3))
        qd = RNG.uniform(-3, 3, (7, 3))
        pos, vel, nrm = fk_palm_batch(q, qd, arm)
        for i in range(7):
            palm = fk_palm(q[i], qd[i], arm)
            assert np.allclose(pos[i], palm.position, atol=1e-12)
            assert np.allclose(vel[i], palm.velocity, atol=1e-12)
            assert np.allclose(nrm[i], palm.normal, atol=1e-12)


class TestArmDynamics:
    def test_gravity_compensated_equilibrium(self):
        arm = ArmModel()
        for _ in range(10):
            q = RNG.uniform(-2, 2, 3)
            tau = inverse_dynamics(q, np.zeros(3), np.zeros(3), arm)
            qdd = arm_accel(RobotState(tuple(q), (0.0,) * 3), tau, arm)
            assert np.max(np.abs(qdd)) < 1e-9

    def test_pendulum_analytic_accel(self):
        l, m = 0.4, 1.3
        arm = pendulum(l, m)
        for _ in range(25):
            q = float(RNG.uniform(-3, 3))
            qd = float(RNG.uniform(-5, 5))
            tau = float(RNG.uniform(-5, 5))
            qdd = arm_accel(RobotState((q,), (qd,)), [tau], arm)
            expected = -(9.81 / l) * math.sin(q) + tau / (m * l * l)
            assert qdd[0] == pytest.approx(expected, abs=1e-9)

    def test_pendulum_static_torque(self):
        l, m = 0.35, 0.8
        arm = pendulum(l, m)
        for _ in range(10):
            q = float(RNG.uniform(-3, 3))
            tau = inverse_dynamics([q], [0.0], [0.0], arm)
            assert tau[0] == pytest.approx(m * 9.81 * l * math.sin(q), abs=1e-9)

    def test_zero_gravity_rest_torque_zero(self):
        arm = replace(ArmModel(), gravity=(0.0, 0.0))
        tau = inverse_dynamics(np.zeros(3), np.zeros(3), np.zeros(3), arm)
        assert np.max(np.abs(tau)) == 0.0

    def test_forward_inverse_round_trip(self):
        arm = ArmModel()
        for _ in range(100):
            q = RNG.uniform(-2.5, 2.5, 3)
            qd = RNG.uniform(-6, 6, 3)
            qdd = RNG.uniform(-30, 30, 3)
            tau = inverse_dynamics(q, qd, qdd, arm)
            back = arm_accel(RobotState(tuple(q), tuple(qd)), tau, arm)
            assert np.max(np.abs(back - qdd)) < 1e-8

    def test_mass_matrix_spd(self):
        arm = ArmModel()
        for _ in range(50):
            q = RNG.uniform(-3, 3, 3)
            M = mass_matrix(q, arm)
            assert np.max(np.abs(M - M.T)) <= 1e-12
            assert np.min(np.linalg.eigvalsh(M)) > 0.0

    def test_batched_helpers_match_scalar(self):
        arm = ArmModel()
        q = RNG.uniform(-2, 2, (6, 3))
        qd = RNG.uniform(-4, 4, (6, 3))
        qdd = RNG.uniform(-20, 20, (6, 3))
        tau_b = inverse_dynamics_batch(q, qd, qdd, arm)
        M_b = mass_matrix_batch(q, arm)
        for i in range(6):
            assert np.allclose(tau_b[i], inverse_dynamics(q[i], qd[i], qdd[i], arm), atol=1e-12)
            assert np.allclose(M_b[i], mass_matrix(q[i], arm), atol=1e-12)

    def test_energy_drift(self):
        # free swing, no damping/armature/torque: secular energy drift of the
        # arm integrator stays below 1e-6 J/s (least-squares slope)
        arm = replace(ArmModel(), joint_damping=(0.0,) * 3, joint_armature=(0.0,) * 3)
        params = replace(ContactParams(), floor_height=-100.0)
        world = WorldState(
            robot=RobotState((1.1, -0.7, 0.4), (0.0, 0.0, 0.0)),
            object=ObjectState((50.0, 50.0), (0.0, 0.0)),
            variant=default_variant(),
        )
        dt = 1e-4
        steps = 10_000
        energies = np.empty(steps + 1)
        energies[0] = mechanical_energy(world.robot, arm)
        for k in range(steps):
            world, _ = step_world(world, np.zeros(3), arm, params, dt)
            energies[k + 1] = mechanical_energy(world.robot, arm)
        t = np.arange(steps + 1) * dt
        slope = np.polyfit(t, energies, 1)[0]
        assert abs(slope) < 1e-6, f"energy drift {slope:.3e} J/s"


class TestContact:
    def test_separated_no_force(self):
        arm = ArmModel()
        palm = fk_palm([0.5, 0.0, 0.0], np.zeros(3), arm)
        variant = default_variant()
        far = np.array(palm.position) + np.array([0.1 + palm.radius + variant.bounding_radius, 0.0])
        rep = contact_force(palm, ObjectState(tuple(far), (0.0, 0.0)), variant, ContactParams())
        assert rep.force == (0.0, 0.0) and not rep.in_contact

    def test_static_spring_law(self):
        arm = ArmModel()
        palm = fk_palm([0.0, 0.0, 0.0], np.zeros(3), arm)
        variant = default_variant()
        depth = 0.01
        pos = np.array(palm.position) + np.array(
            [0.0, palm.radius + variant.bounding_radius - depth])
        rep = contact_force(palm, ObjectState(tuple(pos), (0.0, 0.0)), variant, ContactParams())
        assert np.linalg.norm(rep.force) == pytest.approx(2000.0 * depth, abs=1e-9)
        assert rep.penetration == pytest.approx(depth, abs=1e-12)

    def test_spring_damper_law(self):
        arm = ArmModel()
        palm = fk_palm([0.0, 0.0, 0.0], np.zeros(3), arm)
        variant = default_variant()
        depth = 0.01
        pos = np.array(palm.position) + np.array(
            [0.0, palm.radius + variant.bounding_radius - depth])
        obj = ObjectState(tuple(pos), (0.0, -0.2))  # closing at 0.2 m/s
        rep = contact_force(palm, obj, variant, ContactParams())
        assert np.linalg.norm(rep.force) == pytest.approx(20.0 + 10.0, abs=1e-9)

    def test_never_adhesive(self):
        arm = ArmModel()
        palm = fk_palm([0.0, 0.0, 0.0], np.zeros(3), arm)
        variant = default_variant()
        depth = 0.001
        pos = np.array(palm.position) + np.array(
            [0.0, palm.radius + variant.bounding_radius - depth])
        obj = ObjectState(tuple(pos), (0.0, 3.0))  # separating fast
        rep = contact_force(palm, obj, variant, ContactParams())
        assert np.linalg.norm(rep.force) == 0.0


def _far_object_world(variant=None):
    variant = variant or default_variant()
    return WorldState(robot=RobotState((1.2, -0.8, 0.3), (0.0, 0.0, 0.0)),
                      object=ObjectState((50.0, 50.0), (0.0, 0.0)), variant=variant)


class TestStepWorld:
    def test_ballistic_closed_form(self):
        arm = replace(ArmModel(), base_position=(30.0, 0.0))  # out of the way
        params = replace(ContactParams(), floor_height=-100.0)
        world = WorldState(robot=RobotState((0.0,) * 3, (0.0,) * 3),
                           object=ObjectState((0.0, 2.0), (1.0, 0.0)),
                           variant=default_variant())
        dt = 0.005
        for _ in range(200):
            world, rep = step_world(world, np.zeros(3), arm, params, dt)
            assert not rep.in_contact
        p_exact, v_exact = ballistic_state((0.0, 2.0), (1.0, 0.0), (0.0, -9.81), 1.0)
        assert np.allclose(world.object.p_o, p_exact, atol=1e-9)
        assert np.allclose(world.object.v_o, v_exact, atol=1e-9)
        assert world.object.p_o[0] == pytest.approx(1.0, abs=1e-9)
        assert world.object.p_o[1] == pytest.approx(2.0 - 4.905, abs=1e-9)

    def test_deterministic(self):
        arm = ArmModel()
        params = ContactParams()
        w0 = _far_object_world()
        tau = np.array([3.0, -2.0, 0.5])
        a1, _ = step_world(w0, tau, arm, params)
        a2, _ = step_world(w0, tau, arm, params)
        assert a1.robot.q == a2.robot.q and a1.object.p_o == a2.object.p_o

    def test_torque_clamped(self):
        arm = ArmModel()
        params = ContactParams()
        w0 = _far_object_world()
        huge, _ = step_world(w0, np.array([1e6, -1e6, 1e6]), arm, params)
        lim, _ = step_world(w0, np.array([60.0, -40.0, 20.0]), arm, params)
        assert huge.robot.q == lim.robot.q and huge.robot.qd == lim.robot.qd

    def test_attachment_decay_and_hold(self):
        # weightless bench: palm at rest, object bonded with an initial offset
        arm = replace(ArmModel(), gravity=(0.0, 0.0))
        params = ContactParams()
        variant = default_variant()
        palm = fk_palm([0.9, -0.5, 0.2], np.zeros(3), arm)
        touch = np.array(palm.position) + (palm.radius + variant.bounding_radius) * np.array(palm.normal)
        world = WorldState(robot=RobotState((0.9, -0.5, 0.2), (0.0,) * 3),
                           object=ObjectState(tuple(touch), (0.0, 0.0)), variant=variant)
        world, _ = step_world(world, np.zeros(3), arm, params)
        assert world.attached
        # pull the object 2 cm off its anchor and let the bond reel it in
        shifted = np.array(world.object.p_o) + np.array([0.02, 0.0])
        world = replace(world, object=ObjectState(tuple(shifted), world.object.v_o))
        offsets = []
        for _ in range(400):
            world, _ = step_world(world, np.zeros(3), arm, params)
            assert world.attached
            # static palm and zero gravity: the anchor stays at the attach point
            offsets.append(np.linalg.norm(np.array(world.object.p_o) - touch))
        ext = np.array(offsets)
        assert np.max(ext) < params.break_distance
        # envelope decay: late maxima below early maxima
        assert ext[200:].max() < max(ext[:50].max(), 1e-9) + 1e-12
        assert ext[-1] < 1e-3

    def test_bounce_capped(self):
        # fast head-on impact on a held palm: rebound speed bounded by the cap
        arm = replace(ArmModel(), gravity=(0.0, 0.0))
        params = replace(ContactParams(), capture_speed=0.0001)  # forbid capture
        variant = default_variant()
        q = (0.9, -0.5, 0.2)
        palm = fk_palm(q, np.zeros(3), arm)
        start = np.array(palm.position) + 0.3 * np.array(palm.normal)
        speed = 3.0
        world = WorldState(robot=RobotState(q, (0.0,) * 3),
                           object=ObjectState(tuple(start), tuple(-speed * np.array(palm.normal))),
                           variant=variant)
        hit = False
        for _ in range(400):
            world, rep = step_world(world, gravity_compensation(world.robot.q, arm), arm, params)
            hit = hit or rep.in_contact
            if hit and not rep.in_contact and not world.attached:
                break
        assert hit
        out_speed = np.linalg.norm(world.object.v_o)
        assert out_speed <= params.restitution_cap * speed + 1e-6

    def test_nonfinite_raises(self):
        from kincatch.dynamics import NumericError
        arm = ArmModel()
        world = _far_object_world()
        bad = replace(world, robot=RobotState((1e308, 0.0, 0.0), (1e308, 0.0, 0.0)))
        with pytest.raises((NumericError, OverflowError, ValueError)):
            for _ in range(50):
                bad, _ = step_world(bad, np.zeros(3), arm, ContactParams())


class TestCollision:
    def test_object_on_forearm_collides(self):
        arm = ArmModel()
        q = [0.0, 0.0, 0.0]
        # object resting on the middle of link 2
        p = [arm.base_position[0] + 0.45, arm.base_position[1] + 0.0]
        assert check_collision(q, p, 0.03, arm, floor_height=-10.0)

    def test_object_on_palm_face_clear(self):
        arm = ArmModel()
        q = [0.0, 0.0, 0.0]
        palm = fk_palm(q, np.zeros(3), arm)
        p = list(np.array(palm.position) + (palm.radius + 0.027) * np.array(palm.normal))
        assert not check_collision(q, p, 0.027, arm, floor_height=-10.0)

    def test_floor_collision(self):
        arm = ArmModel()  # base at y = 0.4
        assert check_collision([-1.5, 0.0, 0.0], [50.0, 50.0], 0.03, arm, floor_height=0.0)


class TestSampling:
    def test_table_dims(self):
        box = ObjectVariant.make("box", 0.9, 0.05)
        assert box.scaled_dims == pytest.approx((22.5, 22.5, 22.5))
        sphere = ObjectVariant.make("sphere", 1.25, 0.05)
        assert sphere.bounding_radius * 1e3 == pytest.approx(33.75)
        assert round(sphere.bounding_radius * 1e3, 1) == 33.8

    def test_ten_variants(self):
        combos = training_variants()
        assert len(combos) == 10
        assert len(set(combos)) == 10
        assert all(sc in (0.9, 1.25) for _, sc in combos)

    def test_mass_range_and_reachability(self):
        rng = np.random.default_rng(7)
        arm, params, cfg = ArmModel(), ContactParams(), LaunchConfig()
        for _ in range(50):
            variant, state = sample_object_init(rng, cfg, arm, params)
            assert 0.045 <= variant.mass <= 0.055
            from kincatch.dynamics import path_reaches
            assert path_reaches(state.p_o, state.v_o, arm, cfg, params.floor_height)

    def test_unreachable_ranges_error(self):
        from kincatch.dynamics import LaunchSamplingError
        rng = np.random.default_rng(0)
        # a start ring larger than any rewound flight can escape
        cfg = LaunchConfig(min_start_distance=50.0)
        with pytest.raises(LaunchSamplingError):
            sample_object_init(rng, cfg, ArmModel(), ContactParams())
