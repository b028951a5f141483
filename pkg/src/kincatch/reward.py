"""Three-stage impact-aware step reward and the episode success predicate.

Stage 1 shapes the approach (proximity, palm-velocity alignment, progress);
stage 2 activates inside the 0.3 m soft zone (velocity matching, post-contact
drag, impact-force penalty); stage 3 activates while attached (grasp hold and
residual-motion decay). Penalties cover force jumps, collisions, limit
violations and drops. The scalar formulas here are mirrored step-for-step by
the episode kernels; tests compare the two paths bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .dynamics import ArmModel, ContactParams, ContactReport, WorldState, fk_palm, check_collision

if TYPE_CHECKING:  # pragma: no cover
    from .explorer import Episode

SOFT_ZONE = 0.3  # m, fixed activation radius of the cushioning stage


@dataclass(frozen=True)
class RewardWeights:
    """Per-term weights; numbered to match the staged reward layout."""

    lambda1: float = 1.0   # r_dist
    lambda2: float = 0.5   # r_align
    lambda3: float = 0.5   # r_progress
    lambda4: float = 1.0   # r_vel
    lambda5: float = 0.5   # r_drag
    lambda6: float = 1.0   # r_impact
    lambda7: float = 2.0   # r_grasp
    lambda8: float = 1.0   # r_stable
    lambda9: float = 0.5   # p_impulse
    lambda10: float = 5.0  # p_col
    lambda11: float = 1.0  # p_limit
    lambda12: float = 10.0  # p_drop

    def __post_init__(self):
        if min(self.as_tuple()) < 0:
            raise ValueError("reward weights must be non-negative")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4,
                self.lambda5, self.lambda6, self.lambda7, self.lambda8,
                self.lambda9, self.lambda10, self.lambda11, self.lambda12)


@dataclass(frozen=True)
class RewardConfig:
    soft_zone: float = SOFT_ZONE
    sigma_d: float = 0.5  # m, proximity kernel scale
    sigma_v: float = 1.0  # m/s, velocity-matching kernel scale
    sigma_s: float = 0.5  # m/s, stabilization kernel scale
    f_ref: float = 20.0  # N, force normalization
    f_soft: float = 10.0  # N, force threshold below which impact is free
    progress_clip: float = 5.0  # m/s

    def __post_init__(self):
        if self.soft_zone != SOFT_ZONE:
            raise ValueError(f"soft_zone is fixed at {SOFT_ZONE} m")
        if min(self.sigma_d, self.sigma_v, self.sigma_s, self.f_ref,
               self.progress_clip) <= 0:
            raise ValueError("reward scales must be positive")


@dataclass(frozen=True)
class SuccessConfig:
    hold_time: float = 0.3  # s of uninterrupted terminal attachment


@dataclass(frozen=True)
class RewardBreakdown:
    r_dist: float
    r_align: float
    r_progress: float
    r_vel: float
    r_drag: float
    r_impact: float
    r_grasp: float
    r_stable: float
    p_impulse: float
    p_col: float
    p_limit: float
    p_drop: float
    stage1: float
    stage2: float
    stage3: float
    penalty: float
    total: float


def _hinge(x: float, lo: float, hi: float) -> float:
    if x < lo:
        return lo - x
    if x > hi:
        return x - hi
    return 0.0


def limit_hinge_sum(q, qd, tau_cmd, arm: ArmModel) -> float:
    """Width-normalized hinge violations of the q/qd/tau limit boxes."""
    total = 0.0
    for a in range(arm.n_joints):
        lo, hi = arm.q_limits[a]
        total += _hinge(float(q[a]), lo, hi) / (hi - lo)
        lo, hi = arm.qd_limits[a]
        total += _hinge(float(qd[a]), lo, hi) / (hi - lo)
        if tau_cmd is not None:
            lo, hi = arm.tau_limits[a]
            total += _hinge(float(tau_cmd[a]), lo, hi) / (hi - lo)
    return total


def joint_limit_hinges(q: np.ndarray, qd: np.ndarray, arm: ArmModel) -> np.ndarray:
    """Vectorized unnormalized q/qd hinge magnitudes over (..., n) arrays."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    lims_q = np.asarray(arm.q_limits)
    lims_qd = np.asarray(arm.qd_limits)
    hq = np.maximum(0.0, lims_q[:, 0] - q) + np.maximum(0.0, q - lims_q[:, 1])
    hqd = np.maximum(0.0, lims_qd[:, 0] - qd) + np.maximum(0.0, qd - lims_qd[:, 1])
    return hq.sum(axis=-1) + hqd.sum(axis=-1)


def reward_step(prev: WorldState, curr: WorldState, contact: ContactReport,
                prev_contact_force: float, weights: RewardWeights,
                cfg: RewardConfig, arm: ArmModel,
                params: ContactParams | None = None,
                tau_cmd=None) -> RewardBreakdown:
    """Staged reward for the transition prev -> curr.

    ``tau_cmd`` is the pre-clamp commanded torque for the step (its limit
    hinge enters p_limit; omitted when the caller has no torque channel).
    ``params`` supplies the floor height for the collision condition.
    """
    if not curr.t > prev.t:
        raise ValueError("curr must be later than prev")
    params = params if params is not None else ContactParams()
    dt = curr.t - prev.t
    palm_prev = fk_palm(prev.robot.q, prev.robot.qd, arm)
    palm = fk_palm(curr.robot.q, curr.robot.qd, arm)
    w = len(curr.object.p_o)

    # explicit products (not **2) to stay bit-identical with the kernels
    d = math.sqrt(sum((palm.position[k] - curr.object.p_o[k])
                      * (palm.position[k] - curr.object.p_o[k]) for k in range(w)))
    d_prev = math.sqrt(sum((palm_prev.position[k] - prev.object.p_o[k])
                           * (palm_prev.position[k] - prev.object.p_o[k]) for k in range(w)))
    r_dist = math.exp(-d / cfg.sigma_d)

    v_o = curr.object.v_o
    speed_o = math.sqrt(sum(v * v for v in v_o))
    if speed_o > 1e-9:
        align = 0.0
        for k in range(w):
            align -= palm.normal[k] * (v_o[k] / speed_o)
        r_align = align if align > 0.0 else 0.0
    else:
        r_align = 0.0

    c = cfg.progress_clip
    prog = (d_prev - d) / dt
    if prog > c:
        prog = c
    elif prog < -c:
        prog = -c
    r_progress = prog / c

    fc = math.sqrt(sum(f * f for f in contact.force))
    v_rel = math.sqrt(sum((v_o[k] - palm.velocity[k]) * (v_o[k] - palm.velocity[k])
                          for k in range(w)))
    gate2 = (d <= cfg.soft_zone) or curr.attached
    r_vel = math.exp(-v_rel / cfg.sigma_v) if gate2 else 0.0
    r_drag = math.exp(-v_rel / cfg.sigma_v) if curr.attached else 0.0
    over = fc - cfg.f_soft
    r_impact = -(over if over > 0.0 else 0.0) / cfg.f_ref if gate2 else 0.0

    r_grasp = 1.0 if curr.attached else 0.0
    r_stable = math.exp(-v_rel / cfg.sigma_s) if curr.attached else 0.0

    p_impulse = abs(fc - prev_contact_force) / cfg.f_ref
    p_col = 1.0 if check_collision(list(curr.robot.q), list(curr.object.p_o),
                                   curr.variant.bounding_radius, arm,
                                   params.floor_height) else 0.0
    p_limit = limit_hinge_sum(curr.robot.q, curr.robot.qd, tau_cmd, arm)
    p_drop = 1.0 if (curr.dropped and not prev.dropped) else 0.0

    stage1 = weights.lambda1 * r_dist + weights.lambda2 * r_align + weights.lambda3 * r_progress
    stage2 = weights.lambda4 * r_vel + weights.lambda5 * r_drag + weights.lambda6 * r_impact
    stage3 = weights.lambda7 * r_grasp + weights.lambda8 * r_stable
    penalty = (weights.lambda9 * p_impulse + weights.lambda10 * p_col
               + weights.lambda11 * p_limit + weights.lambda12 * p_drop)
    total = stage1 + stage2 + stage3 - penalty
    return RewardBreakdown(r_dist, r_align, r_progress, r_vel, r_drag, r_impact,
                           r_grasp, r_stable, p_impulse, p_col, p_limit, p_drop,
                           stage1, stage2, stage3, penalty, total)


def episode_success(episode: "Episode", cfg: SuccessConfig = SuccessConfig()) -> bool:
    """Terminal-hold success: attached through the final ``hold_time``,
    never dropped or collided, and zero q/qd limit violation throughout."""
    if episode.diagnostic:
        return False
    times = episode.times
    if len(times) < 2:
        return False
    dt = float(times[1] - times[0])
    hold_steps = int(round(cfg.hold_time / dt))
    attached = np.asarray(episode.attached, dtype=bool)
    if hold_steps < 1 or hold_steps >= len(attached):
        return False
    if not bool(attached[-(hold_steps + 1):].all()):
        return False
    if bool(np.asarray(episode.dropped, dtype=bool).any()):
        return False
    if bool(np.asarray(episode.collision_event, dtype=bool).any()):
        return False
    arm = episode.arm if episode.arm is not None else ArmModel()
    hinges = joint_limit_hinges(episode.q, episode.qd, arm)
    return bool(np.all(hinges == 0.0))


def catch_index_of(attached: np.ndarray) -> int | None:
    """First index of the attachment run that persists to the episode end."""
    attached = np.asarray(attached, dtype=bool)
    if not attached[-1]:
        return None
    idx = len(attached) - 1
    while idx > 0 and attached[idx - 1]:
        idx -= 1
    return idx
