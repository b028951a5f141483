"""Offline feasibility exploration and dataset construction.

Cross-entropy search over Catmull-Rom joint references, rolled out under the
compliant controller and scored by the staged reward. Successful episodes are
aligned at the interception instant, resampled to a fixed horizon, and
persisted as the training dataset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    OBJECT_SHAPES, ArmModel, ContactParams, LaunchConfig, ObjectState,
    ObjectVariant,
)
from .engine import REWARD_COLUMNS, Trace, simulate_episode
from .reward import RewardConfig, RewardWeights, SuccessConfig, catch_index_of, episode_success
from . import serialize

log = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RolloutEnv:
    """Everything an episode rollout needs besides the policy and the object."""

    arm: ArmModel = field(default_factory=ArmModel)
    params: ContactParams = field(default_factory=ContactParams)
    weights: RewardWeights = field(default_factory=RewardWeights)
    rcfg: RewardConfig = field(default_factory=RewardConfig)
    launch: LaunchConfig = field(default_factory=LaunchConfig)
    dt: float = 0.005
    q_home: tuple[float, ...] = (0.8, -1.0, -0.5)
    kp: tuple[float, ...] = (60.0, 60.0, 60.0)  # compliant tracking gains
    kd: tuple[float, ...] = (12.0, 12.0, 12.0)
    contact_gain_scale: float = 0.4


@dataclass(frozen=True)
class CemConfig:
    population: int = 64
    elites: int = 8
    iterations: int = 30
    init_std: float = 0.25  # rad
    std_floor: float = 0.02  # rad
    episode_duration: float = 2.0  # s
    knots: int = 8
    # keep refining this many iterations after the first success, then stop
    patience_after_success: int = 4
    # initialize the search mean from the kinematic interception heuristic;
    # keeps solutions varying smoothly with the initial condition
    seeded_init: bool = True

    def __post_init__(self):
        if not self.elites < self.population:
            raise ValueError("elites must be < population")
        if self.iterations < 1 or self.knots < 2:
            raise ValueError("iterations >= 1 and knots >= 2 required")


@dataclass(frozen=True)
class SplinePolicy:
    """Catmull-Rom joint-position reference over [0, duration]."""

    knots: np.ndarray  # (K, n) rad
    duration: float

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.ndim != 2 or k.shape[0] < 2:
            raise ValueError("knots must be (K >= 2, n_joints)")
        object.__setattr__(self, "knots", k)

    def evaluate(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Positions and velocities of the spline at the given times."""
        P = self.knots
        K = P.shape[0]
        u = np.clip(np.asarray(times, dtype=float) / self.duration, 0.0, 1.0) * (K - 1)
        seg = np.minimum(u.astype(int), K - 2)
        t = u - seg
        ext = np.vstack([P[:1], P, P[-1:]])  # duplicated endpoints
        m = 0.5 * (ext[2:] - ext[:-2])  # (K, n) tangents in knot units
        p0 = P[seg]
        p1 = P[seg + 1]
        m0 = m[seg]
        m1 = m[seg + 1]
        t = t[:, None]
        t2 = t * t
        t3 = t2 * t
        h00 = 2 * t3 - 3 * t2 + 1
        h10 = t3 - 2 * t2 + t
        h01 = -2 * t3 + 3 * t2
        h11 = t3 - t2
        pos = h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1
        dh00 = 6 * t2 - 6 * t
        dh10 = 3 * t2 - 4 * t + 1
        dh01 = -6 * t2 + 6 * t
        dh11 = 3 * t2 - 2 * t
        dudt = (K - 1) / self.duration
        vel = (dh00 * p0 + dh10 * m0 + dh01 * p1 + dh11 * m1) * dudt
        return pos, vel


@dataclass
class Episode:
    """One simulated episode: per-step arrays plus provenance and outcome."""

    times: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    obj_p: np.ndarray
    obj_v: np.ndarray
    palm_pos: np.ndarray
    palm_vel: np.ndarray
    palm_normal: np.ndarray
    attached: np.ndarray
    dropped: np.ndarray
    tau_cmd: np.ndarray
    tau_app: np.ndarray
    contact_force: np.ndarray
    bond_force: np.ndarray
    contact_flag: np.ndarray
    collision_event: np.ndarray
    reward: np.ndarray  # (T, 17) columns = engine.REWARD_COLUMNS
    observations: np.ndarray  # (T+1, 2w + 2n + 2w + 1)
    success: bool
    catch_index: int | None
    duration: float
    x_o0: ObjectState
    variant: ObjectVariant
    seed: int
    arm: ArmModel | None = None
    diagnostic: str = ""

    @property
    def return_total(self) -> float:
        return float(self.reward[:, REWARD_COLUMNS.index("total")].sum())

    @property
    def catch_time(self) -> float | None:
        return None if self.catch_index is None else float(self.times[self.catch_index])

    def observation_at(self, k: int) -> "Observation":
        w = self.obj_p.shape[1]
        n = self.q.shape[1]
        row = self.observations[k]
        return Observation(row[:2 * w], row[2 * w:2 * w + 2 * n],
                           row[2 * w + 2 * n:])


@dataclass(frozen=True)
class Observation:
    """Per-step policy observation: object state, robot state, and the
    relative interception geometry phi = (rel position, rel velocity,
    palm-velocity alignment scalar)."""

    x_o: np.ndarray  # (2w,)
    x_r: np.ndarray  # (2n,)
    phi: np.ndarray  # (2w + 1,)

    def packed(self) -> np.ndarray:
        return np.concatenate([self.x_o, self.x_r, self.phi])


def _observations(trace: Trace) -> np.ndarray:
    rel_p = trace.obj_p - trace.palm_pos
    rel_v = trace.obj_v - trace.palm_vel
    speed = np.linalg.norm(trace.obj_v, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        vhat = np.where(speed[:, None] > 1e-9, trace.obj_v / speed[:, None], 0.0)
    align = -np.sum(trace.palm_normal * vhat, axis=1)
    return np.concatenate(
        [trace.obj_p, trace.obj_v, trace.q, trace.qd, rel_p, rel_v, align[:, None]],
        axis=1)


def episode_from_trace(trace: Trace, env: RolloutEnv, x_o0: ObjectState,
                       variant: ObjectVariant, seed: int,
                       success_cfg: SuccessConfig = SuccessConfig()) -> Episode:
    ep = Episode(
        times=trace.times, q=trace.q, qd=trace.qd, obj_p=trace.obj_p,
        obj_v=trace.obj_v, palm_pos=trace.palm_pos, palm_vel=trace.palm_vel,
        palm_normal=trace.palm_normal, attached=trace.attached,
        dropped=trace.dropped, tau_cmd=trace.tau_cmd, tau_app=trace.tau_app,
        contact_force=trace.contact_force, bond_force=trace.bond_force,
        contact_flag=trace.contact_flag, collision_event=trace.collision_event,
        reward=trace.reward, observations=_observations(trace),
        success=False, catch_index=None, duration=float(trace.times[-1]),
        x_o0=x_o0, variant=variant, seed=int(seed), arm=env.arm,
        diagnostic=trace.diagnostic,
    )
    ep.success = episode_success(ep, success_cfg)
    idx = catch_index_of(ep.attached)
    # the catch index is the start of the attachment run that persists to the
    # episode end; only successful episodes are guaranteed to have one
    ep.catch_index = idx if ep.success else (idx if idx is not None else None)
    return ep


def rollout(policy: SplinePolicy, init: tuple[ObjectVariant, ObjectState],
            env: RolloutEnv, seed: int = 0, backend: str | None = None) -> Episode:
    """Simulate one episode tracking the spline reference.

    Numeric blow-ups are recorded in ``Episode.diagnostic`` and fail the
    episode instead of raising.
    """
    variant, x_o0 = init
    n_steps = int(round(policy.duration / env.dt))
    if n_steps < 2:
        raise ValueError("episode must span at least 2 control steps")
    t_grid = np.arange(n_steps) * env.dt
    ref_q, ref_qd = policy.evaluate(t_grid)
    trace = simulate_episode(
        q0=np.asarray(env.q_home), qd0=np.zeros(len(env.q_home)),
        obj_p0=np.asarray(x_o0.p_o), obj_v0=np.asarray(x_o0.v_o),
        ref_q=ref_q, ref_qd=ref_qd, arm=env.arm, params=env.params,
        variant=variant, kp=np.asarray(env.kp), kd=np.asarray(env.kd),
        contact_gain_scale=env.contact_gain_scale, weights=env.weights,
        rcfg=env.rcfg, dt=env.dt, backend=backend)
    return episode_from_trace(trace, env, x_o0, variant, seed)


def seed_knots(init: tuple[ObjectVariant, ObjectState], env: RolloutEnv,
               cfg: CemConfig) -> np.ndarray:
    """Kinematic catching heuristic used as the CEM initial mean.

    Waypoints: reach the predicted interception point early, wait on the
    path facing the incoming velocity, carry the palm along the flight
    direction through the catch (partial velocity matching), then brake.
    A smooth function of the initial condition, so the explored solutions
    stay in one family across the launch range.
    """
    from .dynamics import ik_palm_pose

    arm = env.arm
    x = init[1]
    q_home = np.asarray(env.q_home, dtype=float)
    g = np.asarray(arm.gravity)
    base = np.asarray(arm.base_position)
    ts = np.arange(1, int(cfg.episode_duration / env.dt)) * env.dt
    pos = np.asarray(x.p_o)[None, :] + np.outer(ts, x.v_o) + 0.5 * np.outer(ts * ts, g)
    vel = np.asarray(x.v_o)[None, :] + np.outer(ts, g)
    dist = np.linalg.norm(pos - base[None, :], axis=1)
    speeds = np.linalg.norm(vel, axis=1)
    ok = (dist <= 0.85 * arm.reach) & (pos[:, 1] > env.params.floor_height + 0.08)
    lead = env.launch.lead_time
    k_lead = int(np.argmin(np.abs(ts - lead))) if lead > 0 else -1
    if k_lead >= 0 and ok[k_lead]:
        k_hit = k_lead  # launches are lead-time normalized; intercept there
    elif ok.any():
        # otherwise intercept where the object is slowest inside reach
        k_hit = int(np.argmin(np.where(ok, speeds, np.inf)))
    else:
        k_hit = int(np.argmin(dist))
    t_hit = float(ts[k_hit])
    p_star = pos[k_hit]
    speed = float(speeds[k_hit])
    vhat = vel[k_hit] / speed if speed > 1e-9 else np.array([0.0, -1.0])

    reach_cap = 0.95 * arm.reach

    def clamp_reach(p):
        off = p - base
        r = float(np.linalg.norm(off))
        return base + off * (reach_cap / r) if r > reach_cap else p

    # timed waypoints (palm position, IK warm start chained along the motion)
    t_pre = max(t_hit - 0.12, 0.1)
    carry_dt = 0.14
    q_star = ik_palm_pose(arm, p_star, -vhat, q_home)
    p_carry = clamp_reach(p_star + carry_dt * 0.75 * speed * vhat)
    q_carry = ik_palm_pose(arm, p_carry, -vhat, q_star)
    p_stop = clamp_reach(p_star + (carry_dt * 0.75 * speed + 0.12 * speed * 0.3) * vhat)
    q_stop = ik_palm_pose(arm, p_stop, -vhat, q_carry)
    waypoints = [(0.0, q_home), (t_pre, q_star), (t_hit + carry_dt, q_carry),
                 (t_hit + 0.45, q_stop), (cfg.episode_duration, q_stop)]

    knot_t = np.linspace(0.0, cfg.episode_duration, cfg.knots)
    knots = np.empty((cfg.knots, arm.n_joints))
    for j, tau in enumerate(knot_t):
        for (ta, qa), (tb, qb) in zip(waypoints, waypoints[1:]):
            if tau <= tb or tb == waypoints[-1][0]:
                s = 0.0 if tb <= ta else np.clip((tau - ta) / (tb - ta), 0.0, 1.0)
                if ta == 0.0:  # ease out of the home posture
                    s = 10 * s**3 - 15 * s**4 + 6 * s**5
                knots[j] = qa + s * (qb - qa)
                break
    q_lo = np.array([lo for lo, _ in arm.q_limits])
    q_hi = np.array([hi for _, hi in arm.q_limits])
    return np.clip(knots, q_lo, q_hi)


def cem_explore(init: tuple[ObjectVariant, ObjectState], cfg: CemConfig,
                env: RolloutEnv, rng: np.random.Generator,
                history: list | None = None,
                backend: str | None = None) -> Episode | None:
    """Cross-entropy search over spline knots for one initial condition.

    Returns the best successful episode found, or None. ``history`` (if
    given) collects one dict per iteration with return statistics.
    """
    n = env.arm.n_joints
    K = cfg.knots
    q_lo = np.array([lo for lo, _ in env.arm.q_limits])
    q_hi = np.array([hi for _, hi in env.arm.q_limits])
    if cfg.seeded_init:
        mean = seed_knots(init, env, cfg)
    else:
        mean = np.tile(np.asarray(env.q_home, dtype=float), (K, 1))
    std = np.full((K, n), cfg.init_std)
    best: Episode | None = None
    first_success_iter: int | None = None
    # candidate 0 of iteration 0 is the unperturbed mean so a pure tracking
    # solution is always evaluated
    for it in range(cfg.iterations):
        noise = rng.standard_normal((cfg.population, K, n))
        if it == 0:
            noise[0] = 0.0
        candidates = np.clip(mean[None] + std[None] * noise, q_lo, q_hi)
        returns = np.empty(cfg.population)
        iter_successes = 0
        for i in range(cfg.population):
            ep = rollout(SplinePolicy(candidates[i], cfg.episode_duration),
                         init, env, seed=it * cfg.population + i, backend=backend)
            returns[i] = ep.return_total
            if ep.success:
                iter_successes += 1
                if best is None or ep.return_total > best.return_total:
                    best = ep
                if first_success_iter is None:
                    first_success_iter = it
        elite_idx = np.argsort(returns)[::-1][:cfg.elites]
        elites = candidates[elite_idx]
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), cfg.std_floor)
        if history is not None:
            history.append({
                "iteration": it,
                "best_return": float(returns.max()),
                "elite_mean_return": float(returns[elite_idx].mean()),
                "successes": iter_successes,
            })
        if (first_success_iter is not None
                and it - first_success_iter >= cfg.patience_after_success):
            break
    if best is not None:
        # prefer the converged search mean when it also succeeds: it is far
        # less noisy across neighboring initial conditions than any single
        # elite sample, which keeps the dataset's condition-to-trajectory
        # map smooth enough to model
        ep = rollout(SplinePolicy(mean, cfg.episode_duration), init, env,
                     seed=cfg.iterations * cfg.population, backend=backend)
        if ep.success:
            best = ep
    return best


# ---------------------------------------------------------------------------
# interception alignment
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Interception-aligned fixed-horizon joint trajectory.

    The flattened representation is [positions row-major by time, then
    velocities row-major by time], dimension 2 * n_joints * H. The catch
    lands exactly on sample round(catch_frac * H); ``pre_warp``/``post_warp``
    are the pre/post-catch sample spacings relative to the uniform spacing
    duration / (H - 1).
    """

    positions: np.ndarray  # (H, n) rad
    velocities: np.ndarray  # (H, n) rad/s
    catch_frac: float
    pre_warp: float
    post_warp: float
    x_o0: ObjectState
    duration: float  # s, source episode duration

    @property
    def horizon(self) -> int:
        return self.positions.shape[0]

    @property
    def n_joints(self) -> int:
        return self.positions.shape[1]

    @property
    def catch_sample(self) -> int:
        return int(round(self.catch_frac * self.horizon))

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.positions.ravel(), self.velocities.ravel()])

    @staticmethod
    def from_flat(vec: np.ndarray, H: int, n: int, catch_frac: float,
                  pre_warp: float, post_warp: float, x_o0: ObjectState,
                  duration: float) -> "Trajectory":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (2 * H * n,):
            raise ValueError(f"expected flat dim {2 * H * n}, got {vec.shape}")
        return Trajectory(vec[:H * n].reshape(H, n).copy(),
                          vec[H * n:].reshape(H, n).copy(),
                          catch_frac, pre_warp, post_warp, x_o0, duration)

    def time_grid(self) -> np.ndarray:
        return warped_time_grid(self.horizon, self.catch_sample, self.pre_warp,
                                self.post_warp, self.duration)


def warped_time_grid(H: int, m: int, pre_warp: float, post_warp: float,
                     duration: float) -> np.ndarray:
    """Absolute sample times of an aligned trajectory (piecewise uniform)."""
    h_uniform = duration / (H - 1)
    h_pre = pre_warp * h_uniform
    h_post = post_warp * h_uniform
    t = np.empty(H)
    t[:m + 1] = np.arange(m + 1) * h_pre
    t[m:] = t[m] + np.arange(H - m) * h_post
    return t


def grid_derivative(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Finite differences on a (possibly nonuniform) time grid.

    Central differences in the interior, one-sided at the ends. This is the
    defining velocity/acceleration convention for aligned trajectories.
    """
    values = np.asarray(values, dtype=float)
    t = np.asarray(times, dtype=float)
    out = np.empty_like(values)
    out[0] = (values[1] - values[0]) / (t[1] - t[0])
    out[-1] = (values[-1] - values[-2]) / (t[-1] - t[-2])
    denom = (t[2:] - t[:-2])[:, None] if values.ndim == 2 else t[2:] - t[:-2]
    out[1:-1] = (values[2:] - values[:-2]) / denom
    return out


class AlignmentError(ValueError):
    """Episode cannot be aligned (missing catch or too-short spans)."""


def align_resample(episode: Episode, H: int = 64, alpha_c: float = 0.75) -> Trajectory:
    """Warp an episode onto the fixed catch-aligned sample grid.

    [0, t_c] maps onto samples 0..round(alpha_c H) and [t_c, T] onto the
    rest; positions are linearly interpolated on each warped grid and
    velocities recomputed as finite differences on that grid.
    """
    if not episode.success:
        raise AlignmentError("only successful episodes are aligned")
    if episode.catch_index is None:
        raise AlignmentError("episode has no catch index")
    m = int(round(alpha_c * H))
    if not 0 < m < H - 1:
        raise ValueError("alpha_c*H must leave room on both sides")
    T_steps = len(episode.times) - 1
    if episode.catch_index < 10:
        raise AlignmentError(f"pre-catch span too short ({episode.catch_index} steps)")
    if T_steps - episode.catch_index < 3:
        raise AlignmentError(
            f"post-catch span too short ({T_steps - episode.catch_index} steps)")
    t_c = float(episode.times[episode.catch_index])
    t_end = float(episode.times[-1])
    sample_t = np.empty(H)
    sample_t[:m + 1] = t_c * np.arange(m + 1) / m
    sample_t[m:] = t_c + (t_end - t_c) * np.arange(H - m) / (H - 1 - m)
    n = episode.q.shape[1]
    positions = np.column_stack(
        [np.interp(sample_t, episode.times, episode.q[:, a]) for a in range(n)])
    h_uniform = t_end / (H - 1)
    pre_warp = (t_c / m) / h_uniform
    post_warp = ((t_end - t_c) / (H - 1 - m)) / h_uniform
    # velocities live on the reconstructed warp grid (what consumers rebuild)
    grid = warped_time_grid(H, m, pre_warp, post_warp, t_end)
    velocities = grid_derivative(positions, grid)
    return Trajectory(positions, velocities, alpha_c, pre_warp, post_warp,
                      episode.x_o0, t_end)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class DatasetRecord:
    x_o0: ObjectState
    variant: ObjectVariant
    trajectory: Trajectory
    source_seed: int


@dataclass
class Dataset:
    records: list[DatasetRecord]
    H: int
    n_joints: int
    alpha_c: float

    def __len__(self) -> int:
        return len(self.records)

    def ambient_matrix(self) -> np.ndarray:
        """All trajectories flattened into an (N, 2nH) matrix."""
        return np.stack([r.trajectory.flatten() for r in self.records])

    def conditions(self) -> np.ndarray:
        """Object initial states as an (N, 2w) matrix."""
        return np.stack([np.concatenate([r.x_o0.p_o, r.x_o0.v_o])
                         for r in self.records])


class EmptyDatasetError(RuntimeError):
    pass


def build_dataset(episodes, H: int = 64, alpha_c: float = 0.75,
                  seeds=None) -> Dataset:
    """Filter to successes, align, and collect; alignment failures are
    dropped with a logged reason."""
    records = []
    n_joints = None
    for i, ep in enumerate(episodes):
        if ep is None or not ep.success:
            continue
        try:
            traj = align_resample(ep, H, alpha_c)
        except AlignmentError as exc:
            log.warning("episode %d excluded from dataset: %s", i, exc)
            continue
        n_joints = traj.n_joints
        seed = ep.seed if seeds is None else seeds[i]
        records.append(DatasetRecord(ep.x_o0, ep.variant, traj, int(seed)))
    if not records:
        raise EmptyDatasetError("no successful episodes survived alignment")
    return Dataset(records, H, n_joints, alpha_c)


def dataset_to_rows(ds: Dataset) -> list[dict]:
    rows = []
    for rec in ds.records:
        t = rec.trajectory
        rows.append({
            "schema_version": DATASET_SCHEMA_VERSION,
            "x_o0": {"p": list(rec.x_o0.p_o), "v": list(rec.x_o0.v_o)},
            "variant": {
                "shape": rec.variant.shape_tag,
                "scale": rec.variant.size_scale,
                "mass": rec.variant.mass,
                "bounding_radius": rec.variant.bounding_radius,
            },
            "H": t.horizon,
            "n_joints": t.n_joints,
            "alpha_c": t.catch_frac,
            "pre_warp": t.pre_warp,
            "post_warp": t.post_warp,
            "duration": t.duration,
            "positions": t.positions.ravel().tolist(),
            "velocities": t.velocities.ravel().tolist(),
            "source_seed": rec.source_seed,
        })
    return rows


def save_dataset(ds: Dataset, path) -> None:
    # stable on-disk order regardless of how workers returned the episodes
    rows = sorted(dataset_to_rows(ds), key=lambda r: r["source_seed"])
    serialize.write_jsonl(path, rows)


def load_dataset(path) -> Dataset:
    rows = serialize.read_jsonl(path)
    if not rows:
        raise EmptyDatasetError(f"{path} contains no records")
    records = []
    H = None
    alpha_c = None
    n_joints = None
    for row in rows:
        if row.get("schema_version") != DATASET_SCHEMA_VERSION:
            raise ValueError(f"unsupported dataset schema {row.get('schema_version')}")
        H, n_joints, alpha_c = row["H"], row["n_joints"], row["alpha_c"]
        x_o0 = ObjectState(tuple(row["x_o0"]["p"]), tuple(row["x_o0"]["v"]))
        var = row["variant"]
        variant = ObjectVariant(var["shape"], var["scale"],
                                OBJECT_SHAPES[var["shape"]],
                                var["bounding_radius"], var["mass"])
        traj = Trajectory(
            np.asarray(row["positions"], dtype=float).reshape(H, n_joints),
            np.asarray(row["velocities"], dtype=float).reshape(H, n_joints),
            alpha_c, row["pre_warp"], row["post_warp"], x_o0, row["duration"])
        records.append(DatasetRecord(x_o0, variant, traj, int(row["source_seed"])))
    ds = Dataset(records, H, n_joints, alpha_c)
    _check_dataset_invariants(ds)
    return ds


def _check_dataset_invariants(ds: Dataset) -> None:
    """Velocity-consistency and alignment-uniformity checks on load."""
    for rec in ds.records:
        t = rec.trajectory
        if t.horizon != ds.H or t.n_joints != ds.n_joints or t.catch_frac != ds.alpha_c:
            raise ValueError("dataset records disagree on alignment configuration")
        fd = grid_derivative(t.positions, t.time_grid())
        if not np.allclose(fd, t.velocities, atol=1e-9):
            raise ValueError("stored velocities inconsistent with warped-grid differences")
