"""Episode simulation engine with compiled and pure-Python backends.

``simulate_episode`` rolls the world forward under PD + gravity-compensation
tracking of a joint reference, recording everything the reward, dataset and
metrics layers need. The hot loop exists twice: ``_simcore`` (Cython, built at
install time) and ``_simcore_py`` (pure Python on top of
:func:`kincatch.dynamics.step_world`). Both produce bit-identical traces; the
compiled kernel is ~3 orders of magnitude faster and is selected by default
when available. Set ``KINCATCH_BACKEND=python|compiled`` to force one.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ArmModel, ContactParams, ObjectState, ObjectVariant
from .reward import RewardConfig, RewardWeights

try:  # compiled kernel is optional; the fallback is exact but slow
    from . import _simcore
except ImportError:  # pragma: no cover - depends on the build environment
    _simcore = None

from . import _simcore_py

HAVE_COMPILED = _simcore is not None

#: order of the per-step reward columns in ``Trace.reward``
REWARD_COLUMNS = (
    "r_dist", "r_align", "r_progress", "r_vel", "r_drag", "r_impact",
    "r_grasp", "r_stable", "p_impulse", "p_col", "p_limit", "p_drop",
    "stage1", "stage2", "stage3", "penalty", "total",
)

#: order of the packed scalar block handed to the compiled kernel
SCALAR_LAYOUT = (
    "dt", "palm_radius", "link_radius", "floor_height",
    "k_p", "k_d", "restitution_cap", "capture_speed",
    "attach_stiffness", "attach_damping", "break_distance", "contact_substeps",
    "obj_mass", "obj_radius", "g_x", "g_y", "base_x", "base_y",
    "soft_zone", "contact_gain_scale",
    "sigma_d", "sigma_v", "sigma_s", "f_ref", "f_soft", "progress_clip",
    "lam1", "lam2", "lam3", "lam4", "lam5", "lam6",
    "lam7", "lam8", "lam9", "lam10", "lam11", "lam12",
    "actuator_gain", "tau_delay", "proprio_delay", "capture_cone_cos",
)


def default_backend() -> str:
    env = os.environ.get("KINCATCH_BACKEND", "").strip().lower()
    if env in ("python", "compiled"):
        return env
    return "compiled" if HAVE_COMPILED else "python"


@dataclass(frozen=True)
class ControlChannel:
    """Optional actuation/sensing imperfections applied inside the kernel.

    ``ref_index`` remaps reference samples (timing jitter); noise arrays are
    additive on the measured joint state; delays are in whole control steps;
    ``packet_keep[k] = 0`` drops the step-k command (previous one is held).
    """

    proprio_delay: int = 0
    tau_delay: int = 0
    actuator_gain: float = 1.0
    noise_q: np.ndarray | None = None  # (T, n)
    noise_qd: np.ndarray | None = None  # (T, n)
    packet_keep: np.ndarray | None = None  # (T,) uint8
    ref_index: np.ndarray | None = None  # (T,) int64


@dataclass
class Trace:
    """Raw per-step arrays of one simulated episode (T control steps)."""

    times: np.ndarray  # (T+1,)
    q: np.ndarray  # (T+1, n)
    qd: np.ndarray
    obj_p: np.ndarray  # (T+1, w)
    obj_v: np.ndarray
    palm_pos: np.ndarray
    palm_vel: np.ndarray
    palm_normal: np.ndarray
    palm_angle: np.ndarray  # (T+1,)
    attached: np.ndarray  # (T+1,) bool
    dropped: np.ndarray  # (T+1,) bool
    tau_cmd: np.ndarray  # (T, n) pre-clamp command
    tau_app: np.ndarray  # (T, n) applied after channel effects and clamping
    contact_force: np.ndarray  # (T, w)
    bond_force: np.ndarray  # (T, w)
    contact_flag: np.ndarray  # (T,) bool
    collision_event: np.ndarray  # (T,) bool
    peak_penetration: np.ndarray  # (T,)
    reward: np.ndarray  # (T, 17), columns = REWARD_COLUMNS
    diagnostic: str = ""

    @property
    def n_steps(self) -> int:
        return self.tau_cmd.shape[0]

    def reward_total(self) -> float:
        return float(self.reward[:, REWARD_COLUMNS.index("total")].sum())


def simulate_episode(q0, qd0, obj_p0, obj_v0, ref_q, ref_qd,
                     arm: ArmModel, params: ContactParams, variant: ObjectVariant,
                     kp, kd, contact_gain_scale: float,
                     weights: RewardWeights, rcfg: RewardConfig,
                     dt: float = 0.005, n_steps: int | None = None,
                     control: ControlChannel | None = None,
                     backend: str | None = None) -> Trace:
    """Track (ref_q, ref_qd) with a compliant PD + gravity-compensation law.

    Gains are scaled by ``contact_gain_scale`` whenever the palm-object
    distance is inside the soft zone or the object is attached. The reference
    is held at its final sample when shorter than the episode.
    """
    n = arm.n_joints
    w = arm.workspace_dim
    ref_q = np.ascontiguousarray(ref_q, dtype=float)
    ref_qd = np.ascontiguousarray(ref_qd, dtype=float)
    if ref_q.ndim != 2 or ref_q.shape[1] != n or ref_q.shape != ref_qd.shape:
        raise ValueError("ref_q/ref_qd must be (T_ref, n_joints)")
    T = int(n_steps) if n_steps is not None else ref_q.shape[0]
    if T < 2:
        raise ValueError("episode must have at least 2 steps")
    control = control if control is not None else ControlChannel()
    kp = np.ascontiguousarray(np.broadcast_to(np.asarray(kp, dtype=float), (n,)))
    kd = np.ascontiguousarray(np.broadcast_to(np.asarray(kd, dtype=float), (n,)))

    out = Trace(
        times=np.arange(T + 1, dtype=float) * dt,
        q=np.zeros((T + 1, n)), qd=np.zeros((T + 1, n)),
        obj_p=np.zeros((T + 1, w)), obj_v=np.zeros((T + 1, w)),
        palm_pos=np.zeros((T + 1, w)), palm_vel=np.zeros((T + 1, w)),
        palm_normal=np.zeros((T + 1, w)), palm_angle=np.zeros(T + 1),
        attached=np.zeros(T + 1, dtype=bool), dropped=np.zeros(T + 1, dtype=bool),
        tau_cmd=np.zeros((T, n)), tau_app=np.zeros((T, n)),
        contact_force=np.zeros((T, w)), bond_force=np.zeros((T, w)),
        contact_flag=np.zeros(T, dtype=bool), collision_event=np.zeros(T, dtype=bool),
        peak_penetration=np.zeros(T), reward=np.zeros((T, len(REWARD_COLUMNS))),
    )

    which = backend if backend is not None else default_backend()
    if which == "compiled" and not HAVE_COMPILED:
        raise RuntimeError("compiled kernel requested but not built")
    if which not in ("compiled", "python"):
        raise ValueError(f"unknown backend {which!r}")

    if which == "python" or w != 2:
        # the compiled kernel covers the planar fast path only
        diag = _simcore_py.run_episode(
            out, np.asarray(q0, float), np.asarray(qd0, float),
            np.asarray(obj_p0, float), np.asarray(obj_v0, float),
            ref_q, ref_qd, arm, params, variant, kp, kd,
            float(contact_gain_scale), weights, rcfg, float(dt), control)
        out.diagnostic = diag
        return out

    scal = _pack_scalars(arm, params, variant, rcfg, weights, dt,
                         contact_gain_scale, control)
    noise_q = _opt2(control.noise_q, T, n)
    noise_qd = _opt2(control.noise_qd, T, n)
    packet = _opt_u8(control.packet_keep, T)
    ref_index = _ref_index(control.ref_index, T, ref_q.shape[0])
    lims = [np.ascontiguousarray(np.asarray(getattr(arm, f), dtype=float))
            for f in ("q_limits", "qd_limits", "tau_limits")]
    steps_done = _simcore.run_episode(
        out.q, out.qd, out.obj_p, out.obj_v,
        out.palm_pos, out.palm_vel, out.palm_normal, out.palm_angle,
        out.attached.view(np.uint8), out.dropped.view(np.uint8),
        out.tau_cmd, out.tau_app, out.contact_force, out.bond_force,
        out.contact_flag.view(np.uint8), out.collision_event.view(np.uint8),
        out.peak_penetration, out.reward,
        ref_q, ref_qd, ref_index,
        np.ascontiguousarray(q0, dtype=float), np.ascontiguousarray(qd0, dtype=float),
        np.ascontiguousarray(obj_p0, dtype=float), np.ascontiguousarray(obj_v0, dtype=float),
        np.asarray(arm.link_lengths), np.asarray(arm.link_masses),
        np.asarray(arm.link_com_offsets), np.asarray(arm.joint_damping),
        np.asarray(arm.joint_armature), lims[0], lims[1], lims[2],
        kp, kd, scal, noise_q, noise_qd, packet)
    if steps_done < T:
        out.diagnostic = f"non-finite state at step {steps_done}"
    return out


def _pack_scalars(arm, params, variant, rcfg, weights, dt, gain_scale, control):
    lam = weights.as_tuple()
    vals = {
        "dt": dt, "palm_radius": arm.palm_radius, "link_radius": arm.link_radius,
        "floor_height": params.floor_height,
        "k_p": params.k_p, "k_d": params.k_d,
        "restitution_cap": params.restitution_cap, "capture_speed": params.capture_speed,
        "attach_stiffness": params.attach_stiffness, "attach_damping": params.attach_damping,
        "break_distance": params.break_distance,
        "contact_substeps": float(params.contact_substeps),
        "obj_mass": variant.mass, "obj_radius": variant.bounding_radius,
        "g_x": arm.gravity[0], "g_y": arm.gravity[1],
        "base_x": arm.base_position[0], "base_y": arm.base_position[1],
        "soft_zone": rcfg.soft_zone, "contact_gain_scale": gain_scale,
        "sigma_d": rcfg.sigma_d, "sigma_v": rcfg.sigma_v, "sigma_s": rcfg.sigma_s,
        "f_ref": rcfg.f_ref, "f_soft": rcfg.f_soft, "progress_clip": rcfg.progress_clip,
        **{f"lam{i + 1}": lam[i] for i in range(12)},
        "actuator_gain": control.actuator_gain,
        "tau_delay": float(control.tau_delay),
        "proprio_delay": float(control.proprio_delay),
        "capture_cone_cos": params.capture_cone_cos,
    }
    return np.array([vals[k] for k in SCALAR_LAYOUT], dtype=float)


def _opt2(a, T, n):
    if a is None:
        return np.zeros((0, n))
    a = np.ascontiguousarray(a, dtype=float)
    if a.shape != (T, n):
        raise ValueError(f"noise array must be ({T}, {n})")
    return a


def _opt_u8(a, T):
    if a is None:
        return np.zeros(0, dtype=np.uint8)
    a = np.ascontiguousarray(a, dtype=np.uint8)
    if a.shape != (T,):
        raise ValueError(f"packet mask must be ({T},)")
    return a


def _ref_index(idx, T, t_ref):
    if idx is None:
        base = np.arange(T, dtype=np.int64)
    else:
        base = np.ascontiguousarray(idx, dtype=np.int64)
        if base.shape != (T,):
            raise ValueError(f"ref_index must be ({T},)")
    return np.clip(base, 0, t_ref - 1)
