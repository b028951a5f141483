"""Compiled vs pure-Python kernel equivalence: traces must match bit for bit."""

from dataclasses import replace

import numpy as np
import pytest

import kincatch.engine as engine
from kincatch.dynamics import ArmModel, ContactParams, ObjectVariant
from kincatch.engine import ControlChannel, simulate_episode
from kincatch.reward import RewardConfig, RewardWeights

pytestmark = pytest.mark.skipif(not engine.HAVE_COMPILED,
                                reason="compiled kernel not built")

TRACE_FIELDS = ("q", "qd", "obj_p", "obj_v", "palm_pos", "palm_vel",
                "palm_normal", "palm_angle", "attached", "dropped", "tau_cmd",
                "tau_app", "contact_force", "bond_force", "contact_flag",
                "collision_event", "peak_penetration", "reward")


def _episode(seed, T=240, control=None, arm=None, params=None):
    rng = np.random.default_rng(seed)
    arm = arm or ArmModel()
    params = params or ContactParams()
    variant = ObjectVariant.make("sphere", 1.25, 0.05)
    q0 = np.array([1.0, -1.1, 0.5]) + rng.uniform(-0.2, 0.2, 3)
    qd0 = rng.uniform(-0.5, 0.5, 3)
    # a lobbed object that crosses the workspace, plus a wavy reference
    obj_p0 = np.array([1.2, 0.8]) + rng.uniform(-0.1, 0.1, 2)
    obj_v0 = np.array([-2.0, 1.0]) + rng.uniform(-0.3, 0.3, 2)
    t = np.arange(T) * 0.005
    ref_q = q0[None, :] + 0.4 * np.sin(
        2.0 * np.pi * rng.uniform(0.3, 1.0, 3)[None, :] * t[:, None])
    ref_qd = np.gradient(ref_q, 0.005, axis=0)
    kwargs = dict(
        q0=q0, qd0=qd0, obj_p0=obj_p0, obj_v0=obj_v0,
        ref_q=ref_q, ref_qd=ref_qd, arm=arm, params=params, variant=variant,
        kp=np.array([60.0, 60.0, 60.0]), kd=np.array([12.0, 12.0, 12.0]),
        contact_gain_scale=0.4, weights=RewardWeights(), rcfg=RewardConfig(),
        dt=0.005, control=control,
    )
    return kwargs


def _assert_traces_identical(a, b):
    assert a.diagnostic == b.diagnostic
    for f in TRACE_FIELDS:
        xa = getattr(a, f)
        xb = getattr(b, f)
        same = np.array_equal(xa, xb)
        if not same:
            diff = np.argwhere(np.asarray(xa != xb))
            raise AssertionError(f"field {f} differs first at {diff[:5]}")


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_bit_identical_plain(seed):
    kwargs = _episode(seed)
    tc = simulate_episode(backend="compiled", **kwargs)
    tp = simulate_episode(backend="python", **kwargs)
    _assert_traces_identical(tc, tp)


def test_bit_identical_bounce_path():
    # fast object straight at a held palm with capture disabled: exercises the
    # contact spring, restitution cap and separation logic in both backends
    from kincatch.dynamics import fk_palm
    arm = ArmModel()
    params = replace(ContactParams(), capture_speed=1e-6)
    kwargs = _episode(31, params=params)
    q0 = np.array([1.1, -0.9, 0.4])
    palm = fk_palm(q0, np.zeros(3), arm)
    start = np.array(palm.position) + 0.5 * np.array(palm.normal)
    kwargs.update(q0=q0, qd0=np.zeros(3), obj_p0=start,
                  obj_v0=-3.0 * np.array(palm.normal),
                  ref_q=np.tile(q0, (240, 1)), ref_qd=np.zeros((240, 3)))
    tc = simulate_episode(backend="compiled", **kwargs)
    tp = simulate_episode(backend="python", **kwargs)
    assert tc.contact_flag.any(), "fixture must reach contact"
    assert not tc.attached.any()
    _assert_traces_identical(tc, tp)


def test_bit_identical_with_channel_effects(seed=11):
    rng = np.random.default_rng(seed)
    T = 240
    control = ControlChannel(
        proprio_delay=1, tau_delay=1, actuator_gain=0.98,
        noise_q=rng.normal(0.0, 0.005, (T, 3)),
        noise_qd=rng.normal(0.0, 0.01, (T, 3)),
        packet_keep=(rng.uniform(size=T) > 0.01).astype(np.uint8),
        ref_index=np.clip(np.arange(T) + rng.integers(-1, 2, T), 0, T - 1),
    )
    kwargs = _episode(seed, T=T, control=control)
    tc = simulate_episode(backend="compiled", **kwargs)
    tp = simulate_episode(backend="python", **kwargs)
    _assert_traces_identical(tc, tp)


def test_bit_identical_attachment_path():
    # slow drop straight onto a nearly static palm: goes through attach/bond
    arm = ArmModel()
    kwargs = _episode(21)
    from kincatch.dynamics import fk_palm
    q0 = np.array([1.1, -0.9, 0.4])
    palm = fk_palm(q0, np.zeros(3), arm)
    start = np.array(palm.position) + np.array([0.0, 0.35])
    kwargs.update(q0=q0, qd0=np.zeros(3), obj_p0=start, obj_v0=np.array([0.0, -0.5]),
                  ref_q=np.tile(q0, (240, 1)), ref_qd=np.zeros((240, 3)))
    tc = simulate_episode(backend="compiled", **kwargs)
    tp = simulate_episode(backend="python", **kwargs)
    assert tc.attached.any(), "fixture must reach attachment"
    _assert_traces_identical(tc, tp)


def test_scalar_layout_in_sync():
    from kincatch import _simcore
    assert tuple(_simcore.SCALAR_LAYOUT) == engine.SCALAR_LAYOUT


def test_step_world_composition_matches_kernel():
    # the public step_world sequence is exactly the kernel's state sequence
    kwargs = _episode(5, T=60)
    tr = simulate_episode(backend="compiled", **kwargs)
    from kincatch.dynamics import ObjectState, RobotState, WorldState, step_world
    from kincatch.dynamics import ObjectVariant
    world = WorldState(robot=RobotState(tuple(kwargs["q0"]), tuple(kwargs["qd0"])),
                       object=ObjectState(tuple(kwargs["obj_p0"]), tuple(kwargs["obj_v0"])),
                       variant=kwargs["variant"])
    for k in range(60):
        world, _ = step_world(world, tr.tau_app[k], kwargs["arm"], kwargs["params"], 0.005)
        assert np.array_equal(np.asarray(world.robot.q), tr.q[k + 1]), f"q step {k}"
        assert np.array_equal(np.asarray(world.object.p_o), tr.obj_p[k + 1]), f"p step {k}"
