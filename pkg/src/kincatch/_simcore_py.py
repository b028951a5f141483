"""Pure-Python episode kernel: the exact but slow backend.

Drives :func:`kincatch.dynamics.step_world` and
:func:`kincatch.reward.reward_step` one control step at a time. The compiled
kernel in ``_simcore.pyx`` inlines the same arithmetic in the same order, so
the two backends produce bit-identical traces.
"""

from __future__ import annotations

import math

import numpy as np

from .dynamics import (
    ContactReport, NumericError, ObjectState, RobotState, WorldState,
    fk_palm, gravity_compensation, step_world,
)
from .reward import reward_step


def _record_state(out, k, world, palm):
    out.q[k] = world.robot.q
    out.qd[k] = world.robot.qd
    out.obj_p[k] = world.object.p_o
    out.obj_v[k] = world.object.v_o
    out.palm_pos[k] = palm.position
    out.palm_vel[k] = palm.velocity
    out.palm_normal[k] = palm.normal
    out.palm_angle[k] = palm.angle
    out.attached[k] = world.attached
    out.dropped[k] = world.dropped


def run_episode(out, q0, qd0, obj_p0, obj_v0, ref_q, ref_qd, arm, params,
                variant, kp, kd, contact_gain_scale, weights, rcfg, dt,
                control) -> str:
    """Fill the preallocated :class:`~kincatch.engine.Trace` in place.

    Returns the diagnostic string ("" for a clean run).
    """
    T = out.tau_cmd.shape[0]
    n = arm.n_joints
    w = arm.workspace_dim
    t_ref = ref_q.shape[0]

    world = WorldState(
        robot=RobotState(tuple(float(v) for v in q0), tuple(float(v) for v in qd0)),
        object=ObjectState(tuple(float(v) for v in obj_p0), tuple(float(v) for v in obj_v0)),
        variant=variant,
    )
    palm = fk_palm(world.robot.q, world.robot.qd, arm)
    _record_state(out, 0, world, palm)

    noise_q = control.noise_q
    noise_qd = control.noise_qd
    packet = control.packet_keep
    ref_index = control.ref_index
    p_delay = int(control.proprio_delay)
    t_delay = int(control.tau_delay)
    gain = float(control.actuator_gain)

    tau_cmds: list[list[float]] = []
    tau_eff_prev = [0.0] * n
    prev_fc = 0.0
    for k in range(T):
        km = k - p_delay if k - p_delay > 0 else 0
        q_meas = [float(out.q[km, a]) for a in range(n)]
        qd_meas = [float(out.qd[km, a]) for a in range(n)]
        if noise_q is not None:
            for a in range(n):
                q_meas[a] += float(noise_q[k, a])
        if noise_qd is not None:
            for a in range(n):
                qd_meas[a] += float(noise_qd[k, a])

        d = math.sqrt(sum((palm.position[j] - world.object.p_o[j]) ** 2 for j in range(w)))
        scale = contact_gain_scale if (d <= rcfg.soft_zone or world.attached) else 1.0

        rk = int(ref_index[k]) if ref_index is not None else k
        if rk < 0:
            rk = 0
        elif rk >= t_ref:
            rk = t_ref - 1
        g_comp = gravity_compensation(q_meas, arm)
        tau_cmd = [scale * (float(kp[a]) * (float(ref_q[rk, a]) - q_meas[a])
                            + float(kd[a]) * (float(ref_qd[rk, a]) - qd_meas[a]))
                   + float(g_comp[a]) for a in range(n)]
        tau_cmds.append(tau_cmd)
        out.tau_cmd[k] = tau_cmd

        ke = k - t_delay if k - t_delay > 0 else 0
        tau_eff = list(tau_cmds[ke])
        if packet is not None and packet[k] == 0:
            tau_eff = list(tau_eff_prev)
        tau_eff_prev = tau_eff
        tau_eff = [gain * v for v in tau_eff]

        prev_world = world
        try:
            world, report = step_world(world, tau_eff, arm, params, dt)
        except NumericError:
            return f"non-finite state at step {k}"
        palm = fk_palm(world.robot.q, world.robot.qd, arm)
        _record_state(out, k + 1, world, palm)
        out.tau_app[k] = [max(arm.tau_limits[a][0], min(arm.tau_limits[a][1], tau_eff[a]))
                          for a in range(n)]
        out.contact_force[k] = report.force
        out.peak_penetration[k] = report.penetration
        out.contact_flag[k] = report.in_contact
        out.bond_force[k] = _bond_force_at(world, palm, params) if world.attached else np.zeros(w)
        out.collision_event[k] = world.collision_now

        rb = reward_step(prev_world, world, report, prev_fc, weights, rcfg, arm,
                         params, tau_cmd)
        out.reward[k] = (rb.r_dist, rb.r_align, rb.r_progress, rb.r_vel, rb.r_drag,
                         rb.r_impact, rb.r_grasp, rb.r_stable, rb.p_impulse, rb.p_col,
                         rb.p_limit, rb.p_drop, rb.stage1, rb.stage2, rb.stage3,
                         rb.penalty, rb.total)
        prev_fc = math.sqrt(sum(f * f for f in report.force))
    return ""


def _bond_force_at(world, palm, params):
    """Bond spring-damper force at the recorded (end-of-step) state."""
    w = len(world.object.p_o)
    lx, ly = world.bond_local
    c = math.cos(palm.angle)
    s = math.sin(palm.angle)
    rx = c * lx - s * ly
    ry = s * lx + c * ly
    ex = (palm.position[0] + rx) - world.object.p_o[0]
    ey = (palm.position[1] + ry) - world.object.p_o[1]
    avx = palm.velocity[0] - palm.angular_velocity * ry
    avy = palm.velocity[1] + palm.angular_velocity * rx
    f = [params.attach_stiffness * ex + params.attach_damping * (avx - world.object.v_o[0]),
         params.attach_stiffness * ey + params.attach_damping * (avy - world.object.v_o[1])]
    if w == 3:
        ez = palm.position[2] - world.object.p_o[2]
        f.append(params.attach_stiffness * ez + params.attach_damping * (0.0 - world.object.v_o[2]))
    return np.array(f)
