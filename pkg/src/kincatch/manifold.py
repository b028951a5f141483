"""Conditional kinodynamic trajectory manifold.

An encoder/decoder pair maps interception-aligned trajectories to a
low-dimensional latent space conditioned on the object's initial state. The
decoder Jacobian pulls the weighted ambient metric back onto the latent
space; geodesics under that metric define manifold distances and the
exponential map used by the online Riemannian update. Training minimizes
reconstruction plus smoothness, dynamic-feasibility, geodesic-consistency and
tangent-alignment regularizers, and a separate regressor maps object initial
states directly to latent codes.

Geometry conventions: all ambient norms (reconstruction, neighbor distances,
geodesic targets, tangent residuals) act on *standardized* trajectory
coordinates weighted by ``w_diag`` (positions 1.0, velocities 0.1), so the
pullback metric uses the standardized decoder Jacobian. The public
:func:`decoder_jacobian` returns physical units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .diffnet import (
    GradientRecord, Mlp, MomentumOptimizer, backward_batch, forward_batch,
    jvp_backward_batch, jvp_forward_batch, mlp_init,
)
from .dynamics import ArmModel, ObjectState, inverse_dynamics_batch, mass_matrix_batch
from .explorer import Dataset, Trajectory, grid_derivative, warped_time_grid
from .reward import SuccessConfig  # noqa: F401  (re-exported context)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass
class Scalers:
    xi_mean: np.ndarray  # (D,)
    xi_std: np.ndarray  # (D,)
    cond_mean: np.ndarray  # (c,)
    cond_std: np.ndarray  # (c,)


@dataclass
class AlignmentMeta:
    """Alignment configuration shared by every dataset record, plus the
    median warp factors used to de-warp decoded references."""

    H: int
    n_joints: int
    alpha_c: float
    duration: float
    pre_warp: float
    post_warp: float


@dataclass
class ManifoldModel:
    encoder: Mlp  # (D + c) -> d
    decoder: Mlp  # (d + c) -> D
    latent_dim: int
    cond_dim: int
    w_diag: np.ndarray  # (D,) ambient weights on standardized coordinates
    scalers: Scalers
    align: AlignmentMeta
    metric_floor: float = 1e-9
    train_indices: tuple[int, ...] = ()
    val_indices: tuple[int, ...] = ()

    @property
    def ambient_dim(self) -> int:
        return self.w_diag.shape[0]


def ambient_weights(H: int, n_joints: int, velocity_weight: float = 0.1) -> np.ndarray:
    """Position coordinates weigh 1.0, velocity coordinates ``velocity_weight``."""
    w = np.ones(2 * H * n_joints)
    w[H * n_joints:] = velocity_weight
    return w


def standardize_xi(model: ManifoldModel, xi_flat: np.ndarray) -> np.ndarray:
    return (xi_flat - model.scalers.xi_mean) / model.scalers.xi_std


def destandardize_xi(model: ManifoldModel, xi_std: np.ndarray) -> np.ndarray:
    return xi_std * model.scalers.xi_std + model.scalers.xi_mean


def standardize_cond(model: ManifoldModel, cond: np.ndarray) -> np.ndarray:
    return (cond - model.scalers.cond_mean) / model.scalers.cond_std


def _cond_vector(x_o0) -> np.ndarray:
    if isinstance(x_o0, ObjectState):
        return np.concatenate([x_o0.p_o, x_o0.v_o])
    return np.asarray(x_o0, dtype=float)


def _xi_vector(xi) -> np.ndarray:
    if isinstance(xi, Trajectory):
        return xi.flatten()
    return np.asarray(xi, dtype=float)


# ---------------------------------------------------------------------------
# encode / decode / Jacobian / metric
# ---------------------------------------------------------------------------

def encode(model: ManifoldModel, xi, x_o0) -> np.ndarray:
    """Latent code of a trajectory under its conditioning object state."""
    xi_flat = _xi_vector(xi)
    if xi_flat.shape != (model.ambient_dim,):
        raise ValueError(f"trajectory dim {xi_flat.shape} != {model.ambient_dim}")
    cond = _cond_vector(x_o0)
    if cond.shape != (model.cond_dim,):
        raise ValueError(f"condition dim {cond.shape} != {model.cond_dim}")
    inp = np.concatenate([standardize_xi(model, xi_flat),
                          standardize_cond(model, cond)])
    z, _ = forward_batch(model.encoder, inp[None, :])
    return z[0]


def decode(model: ManifoldModel, z, x_o0) -> Trajectory:
    """Trajectory generated from a latent code and conditioning state."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.latent_dim,):
        raise ValueError(f"latent dim {z.shape} != {model.latent_dim}")
    cond = _cond_vector(x_o0)
    if cond.shape != (model.cond_dim,):
        raise ValueError(f"condition dim {cond.shape} != {model.cond_dim}")
    inp = np.concatenate([z, standardize_cond(model, cond)])
    out, _ = forward_batch(model.decoder, inp[None, :])
    xi = destandardize_xi(model, out[0])
    a = model.align
    hn = a.H * a.n_joints
    x_obj = x_o0 if isinstance(x_o0, ObjectState) else ObjectState(
        tuple(cond[:model.cond_dim // 2]), tuple(cond[model.cond_dim // 2:]))
    return Trajectory(xi[:hn].reshape(a.H, a.n_joints),
                      xi[hn:].reshape(a.H, a.n_joints),
                      a.alpha_c, a.pre_warp, a.post_warp, x_obj, a.duration)


def _decoder_jac_std(model: ManifoldModel, z: np.ndarray, cond_std: np.ndarray) -> np.ndarray:
    """Standardized-output decoder Jacobian w.r.t. the latent part, (D, d)."""
    d = model.latent_dim
    inp = np.concatenate([z, cond_std])
    X = np.tile(inp, (d, 1))
    V = np.zeros((d, d + model.cond_dim))
    V[:, :d] = np.eye(d)
    _, yd, _ = jvp_forward_batch(model.decoder, X, V)
    return yd.T


def decoder_jacobian(model: ManifoldModel, z, x_o0) -> np.ndarray:
    """Physical-units Jacobian of the decoded trajectory w.r.t. z, (D, d)."""
    z = np.asarray(z, dtype=float)
    cond_std = standardize_cond(model, _cond_vector(x_o0))
    return model.scalers.xi_std[:, None] * _decoder_jac_std(model, z, cond_std)


def pullback_metric(model: ManifoldModel, z, x_o0) -> np.ndarray:
    """G = J^T W J + floor*I on standardized coordinates; symmetric PD."""
    z = np.asarray(z, dtype=float)
    cond_std = standardize_cond(model, _cond_vector(x_o0))
    J = _decoder_jac_std(model, z, cond_std)
    G = J.T @ (model.w_diag[:, None] * J)
    G = 0.5 * (G + G.T)
    G[np.diag_indices_from(G)] += model.metric_floor
    return G


def _metric_batch(model: ManifoldModel, Z: np.ndarray, cond_std: np.ndarray) -> np.ndarray:
    """Pullback metrics at many latent points (B, d) -> (B, d, d)."""
    B, d = Z.shape
    c = model.cond_dim
    X = np.repeat(np.concatenate([Z, np.tile(cond_std, (B, 1))], axis=1), d, axis=0)
    V = np.zeros((B * d, d + c))
    V[:, :d] = np.tile(np.eye(d), (B, 1))
    _, yd, _ = jvp_forward_batch(model.decoder, X, V)
    J = yd.reshape(B, d, -1).transpose(0, 2, 1)  # (B, D, d)
    G = np.einsum("bia,i,bic->bac", J, model.w_diag, J)
    G = 0.5 * (G + G.transpose(0, 2, 1))
    G[:, np.arange(d), np.arange(d)] += model.metric_floor
    return G


# ---------------------------------------------------------------------------
# geodesics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeodesicConfig:
    segments: int = 16
    iterations: int = 100
    step: float = 0.05
    tol: float = 1e-6


@dataclass
class GeodesicPath:
    points: np.ndarray  # (S+1, d), endpoints fixed
    energy: float  # S * sum_k d_k^T G(mid_k) d_k
    length: float  # sum_k sqrt(d_k^T G(mid_k) d_k)
    converged: bool


def _segment_quantities(model: ManifoldModel, path: np.ndarray,
                        cond_std: np.ndarray, want_grads: bool):
    """Per-segment energies s_k and (optionally) their gradients.

    Returns (s, grad_delta, grad_mid) where for segment k
    grad_delta[k] = d s_k / d delta_k and grad_mid[k] = d s_k / d mid_k.
    One batched JVP forward (+ one reverse pass) over all segments.
    """
    d = model.latent_dim
    deltas = path[1:] - path[:-1]  # (S, d)
    mids = 0.5 * (path[1:] + path[:-1])
    S = deltas.shape[0]
    X = np.concatenate([mids, np.tile(cond_std, (S, 1))], axis=1)
    V = np.concatenate([deltas, np.zeros((S, model.cond_dim))], axis=1)
    _, u, cache = jvp_forward_batch(model.decoder, X, V)  # u = J_std delta
    wu = model.w_diag * u
    floor = model.metric_floor
    s = np.einsum("si,si->s", u, wu) + floor * np.einsum("si,si->s", deltas, deltas)
    if not want_grads:
        return s, None, None
    grads, gX, gV = jvp_backward_batch(model.decoder, cache, 2.0 * wu)
    grad_delta = gV[:, :d] + 2.0 * floor * deltas
    grad_mid = gX[:, :d]
    return s, grad_delta, grad_mid


def _interior_gradient(grad_delta: np.ndarray, grad_mid: np.ndarray, S: int) -> np.ndarray:
    """dE/dz_i for interior points from the per-segment gradients."""
    g = (grad_delta[:-1] - grad_delta[1:]
         + 0.5 * (grad_mid[:-1] + grad_mid[1:]))
    return S * g  # E = S * sum s_k


def geodesic(model: ManifoldModel, z_a, z_b, x_o0,
             cfg: GeodesicConfig = GeodesicConfig()) -> GeodesicPath:
    """Minimum-energy latent path between two codes under one condition.

    Discretized at ``segments`` chords, initialized straight, minimized over
    interior points by gradient descent with backtracking. Non-convergence
    returns the best path found with ``converged=False``.
    """
    z_a = np.asarray(z_a, dtype=float)
    z_b = np.asarray(z_b, dtype=float)
    cond_std = standardize_cond(model, _cond_vector(x_o0))
    S = cfg.segments
    t = np.linspace(0.0, 1.0, S + 1)[:, None]
    path = (1.0 - t) * z_a[None, :] + t * z_b[None, :]
    if np.array_equal(z_a, z_b):
        return GeodesicPath(path, 0.0, 0.0, True)

    s, gd, gm = _segment_quantities(model, path, cond_std, True)
    energy = S * float(s.sum())
    converged = False
    scale = max(float(np.linalg.norm(z_b - z_a)), 1e-12)
    for _ in range(cfg.iterations):
        grad = _interior_gradient(gd, gm, S)
        gnorm = float(np.max(np.abs(grad)))
        if gnorm * scale <= cfg.tol * max(energy, 1e-12):
            converged = True
            break
        step = cfg.step / max(gnorm / scale, 1e-12)
        improved = False
        for _ in range(20):
            trial = path.copy()
            trial[1:-1] -= step * grad
            s_t, gd_t, gm_t = _segment_quantities(model, trial, cond_std, True)
            e_t = S * float(s_t.sum())
            if e_t < energy:
                path, s, gd, gm, energy = trial, s_t, gd_t, gm_t, e_t
                improved = True
                break
            step *= 0.5
        if not improved:
            converged = True  # no descent direction at working precision
            break
    length = float(np.sqrt(np.maximum(s, 0.0)).sum())
    return GeodesicPath(path, energy, length, converged)


def manifold_distance(model: ManifoldModel, z_a, z_b, x_o0,
                      cfg: GeodesicConfig = GeodesicConfig()) -> float:
    return geodesic(model, z_a, z_b, x_o0, cfg).length


def _endpoint_length_gradients(model: ManifoldModel, path: np.ndarray,
                               cond_std: np.ndarray):
    """d length / d endpoints with the path and metric held fixed."""
    s, gd, _ = _segment_quantities(model, path, cond_std, True)
    s = np.maximum(s, 1e-30)
    # length = sum sqrt(s_k); only the first/last segment touch the endpoints
    g_a = -0.5 * gd[0] / np.sqrt(s[0])
    g_b = 0.5 * gd[-1] / np.sqrt(s[-1])
    return g_a, g_b


# ---------------------------------------------------------------------------
# exponential map
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExpMapConfig:
    rk4_steps: int = 32
    fd_h: float = 1e-4
    # evaluate the Christoffel symbols once at the start point and hold them
    # (used by the latency-bound online refinement; exact map as steps shrink)
    freeze_christoffel: bool = False


@dataclass
class ExpMapResult:
    z: np.ndarray
    degraded: bool  # fell back to the first-order step z + v


def _christoffel(model: ManifoldModel, z: np.ndarray, cond_std: np.ndarray,
                 h: float) -> np.ndarray:
    """Gamma^k_ij from central finite differences of the pullback metric."""
    d = model.latent_dim
    pts = [z]
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        pts.append(z + e)
        pts.append(z - e)
    G_all = _metric_batch(model, np.stack(pts), cond_std)
    G0 = G_all[0]
    dG = np.empty((d, d, d))  # dG[l] = dG/dz_l
    for i in range(d):
        dG[i] = (G_all[1 + 2 * i] - G_all[2 + 2 * i]) / (2.0 * h)
    Ginv = np.linalg.inv(G0)
    # Gamma^k_ij = 0.5 g^{kl} (d_i g_lj + d_j g_li - d_l g_ij)
    t1 = np.einsum("ilj->lij", dG)
    t2 = np.einsum("jli->lij", dG)
    return 0.5 * np.einsum("kl,lij->kij", Ginv, t1 + t2 - dG)


def exp_map(model: ManifoldModel, z, v, x_o0,
            cfg: ExpMapConfig = ExpMapConfig()) -> ExpMapResult:
    """Endpoint of the unit-time geodesic from z with initial velocity v.

    Integrates zdd = -Gamma(z)[zd, zd] with RK4; Christoffel symbols come
    from central finite differences of the pullback metric. A non-finite
    trajectory falls back to z + v with ``degraded=True``.
    """
    z = np.asarray(z, dtype=float).copy()
    v = np.asarray(v, dtype=float).copy()
    cond_std = standardize_cond(model, _cond_vector(x_o0))
    if not np.any(v):
        return ExpMapResult(z, False)
    gamma0 = _christoffel(model, z, cond_std, cfg.fd_h) if cfg.freeze_christoffel else None

    def acc(pos, vel):
        G = gamma0 if gamma0 is not None else _christoffel(model, pos, cond_std, cfg.fd_h)
        return -np.einsum("kij,i,j->k", G, vel, vel)

    h = 1.0 / cfg.rk4_steps
    pos, vel = z.copy(), v.copy()
    for _ in range(cfg.rk4_steps):
        a1 = acc(pos, vel)
        p2, v2 = pos + 0.5 * h * vel, vel + 0.5 * h * a1
        a2 = acc(p2, v2)
        p3, v3 = pos + 0.5 * h * v2, vel + 0.5 * h * a2
        a3 = acc(p3, v3)
        p4, v4 = pos + h * v3, vel + h * a3
        a4 = acc(p4, v4)
        pos = pos + h / 6.0 * (vel + 2.0 * v2 + 2.0 * v3 + v4)
        vel = vel + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            return ExpMapResult(z + v, True)
    return ExpMapResult(pos, False)


# ---------------------------------------------------------------------------
# neighbors
# ---------------------------------------------------------------------------

@dataclass
class NeighborSet:
    pairs: list[tuple[int, int]]  # i < j, deduplicated


def neighbor_pairs(dataset: Dataset, model: ManifoldModel, k: int = 4,
                   indices=None) -> NeighborSet:
    """k-nearest-neighbor pairs under the W-weighted standardized norm.

    ``indices`` restricts the search to a subset of the dataset (the training
    split); returned pairs index into that subset.
    """
    xi = dataset.ambient_matrix()
    if indices is not None:
        xi = xi[np.asarray(indices)]
    n = xi.shape[0]
    if n < 2:
        raise ValueError("need at least two records for neighbor pairs")
    if n <= k:
        log.warning("only %d records; reducing neighbor k from %d to %d",
                    n, k, n - 1)
        k = n - 1
    xs = (xi - model.scalers.xi_mean) / model.scalers.xi_std
    xw = xs * np.sqrt(model.w_diag)
    d2 = np.sum(xw * xw, axis=1)
    dist2 = d2[:, None] + d2[None, :] - 2.0 * (xw @ xw.T)
    np.fill_diagonal(dist2, np.inf)
    pairs = set()
    order = np.argsort(dist2, axis=1, kind="stable")
    for i in range(n):
        for j in order[i, :k]:
            a, b = (i, int(j)) if i < j else (int(j), i)
            pairs.add((a, b))
    return NeighborSet(sorted(pairs))


def neighbor_target_distance(model: ManifoldModel, xi_i: np.ndarray,
                             xi_j: np.ndarray) -> float:
    """W-weighted standardized ambient distance between two trajectories."""
    ds = standardize_xi(model, xi_i) - standardize_xi(model, xi_j)
    return float(np.sqrt(np.sum(model.w_diag * ds * ds)))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    """Weights of the manifold training regularizers (reconstruction is 1)."""

    lambda1: float = 0.1  # smooth
    lambda2: float = 0.1  # dyn
    lambda3: float = 0.05  # geo
    lambda4: float = 0.05  # tan

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    rec: float
    smooth: float
    dyn: float
    geo: float
    tan: float
    total: float
    dyn_velocity: float = 0.0
    dyn_limit: float = 0.0


class TrainingDivergedError(RuntimeError):
    pass


def _grid_derivative_batch(V: np.ndarray, T: np.ndarray) -> np.ndarray:
    """grid_derivative vectorized over a batch: V (N,H,n), T (N,H)."""
    out = np.empty_like(V)
    out[:, 0] = (V[:, 1] - V[:, 0]) / (T[:, 1] - T[:, 0])[:, None]
    out[:, -1] = (V[:, -1] - V[:, -2]) / (T[:, -1] - T[:, -2])[:, None]
    out[:, 1:-1] = (V[:, 2:] - V[:, :-2]) / (T[:, 2:] - T[:, :-2])[:, :, None]
    return out


def _grid_derivative_batch_T(A: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Transpose (adjoint) of :func:`_grid_derivative_batch` in its V slot."""
    out = np.zeros_like(A)
    h0 = (T[:, 1] - T[:, 0])[:, None]
    hl = (T[:, -1] - T[:, -2])[:, None]
    den = (T[:, 2:] - T[:, :-2])[:, :, None]
    out[:, 1] += A[:, 0] / h0
    out[:, 0] -= A[:, 0] / h0
    out[:, -1] += A[:, -1] / hl
    out[:, -2] -= A[:, -1] / hl
    out[:, 2:] += A[:, 1:-1] / den
    out[:, :-2] -= A[:, 1:-1] / den
    return out


def _hinge_and_sign(x: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    below = np.maximum(0.0, lo - x)
    above = np.maximum(0.0, x - hi)
    return below + above, np.where(above > 0, 1.0, 0.0) - np.where(below > 0, 1.0, 0.0)


def limit_hinge_terms(P: np.ndarray, V: np.ndarray, grids: np.ndarray,
                      arm: ArmModel):
    """Width-normalized q/qd/tau hinge magnitudes of decoded trajectories.

    P, V: (N, H, n) positions and velocities; grids: (N, H) sample times.
    Torque comes from inverse dynamics on finite-difference accelerations.
    Returns (hq, sq, hv, sv, ht, st, qdd, tau) with hinges already divided by
    their limit widths and s* the violation signs.
    """
    q_lim = np.asarray(arm.q_limits)
    qd_lim = np.asarray(arm.qd_limits)
    tau_lim = np.asarray(arm.tau_limits)
    wq = q_lim[:, 1] - q_lim[:, 0]
    wv = qd_lim[:, 1] - qd_lim[:, 0]
    wt = tau_lim[:, 1] - tau_lim[:, 0]
    hq, sq = _hinge_and_sign(P, q_lim[:, 0], q_lim[:, 1])
    hv, sv = _hinge_and_sign(V, qd_lim[:, 0], qd_lim[:, 1])
    qdd = _grid_derivative_batch(V, grids)
    tau = inverse_dynamics_batch(P, V, qdd, arm)
    ht, st = _hinge_and_sign(tau, tau_lim[:, 0], tau_lim[:, 1])
    return hq / wq, sq / wq, hv / wv, sv / wv, ht / wt, st / wt, qdd, tau


def _batch_tensors(model: ManifoldModel, dataset: Dataset, indices):
    idx = np.asarray(indices if indices is not None else range(len(dataset)))
    xi = dataset.ambient_matrix()[idx]
    cond = dataset.conditions()[idx]
    xi_std = (xi - model.scalers.xi_mean) / model.scalers.xi_std
    cond_std = (cond - model.scalers.cond_mean) / model.scalers.cond_std
    grids = np.stack([dataset.records[int(i)].trajectory.time_grid() for i in idx])
    return xi_std, cond_std, grids


def _loss_and_grads(model: ManifoldModel, dataset: Dataset, indices,
                    geo_pairs, tan_pairs, lw: LossWeights,
                    geo_cfg: GeodesicConfig, arm: ArmModel,
                    want_grads: bool = True):
    """Five-term loss over a batch, with exact gradients where defined.

    Gradient treatment follows the training design: geo differentiates only
    through the endpoint latents (path and metric frozen per evaluation);
    the torque hinge differentiates through the finite-difference
    accelerations with the dynamics coefficients frozen at the decoded state
    (exact in qdd via M(q), exact in the viscous term; configuration
    dependence of M, C, g is dropped).
    """
    xi_std, cond_std, grids = _batch_tensors(model, dataset, indices)
    N, D = xi_std.shape
    H, n = model.align.H, model.align.n_joints
    hn = H * n
    sig = model.scalers.xi_std

    enc_in = np.concatenate([xi_std, cond_std], axis=1)
    Z, enc_cache = forward_batch(model.encoder, enc_in)
    dec_in = np.concatenate([Z, cond_std], axis=1)
    Y, dec_cache = forward_batch(model.decoder, dec_in)

    diff = Y - xi_std
    rec = float(np.mean(diff * diff))
    dY = 2.0 * diff / diff.size  # d rec / dY

    xi_phys = Y * sig + model.scalers.xi_mean
    P = xi_phys[:, :hn].reshape(N, H, n)
    V = xi_phys[:, hn:].reshape(N, H, n)
    dP = np.zeros_like(P)
    dV = np.zeros_like(V)

    # smoothness: second time-differences of decoded positions
    s2 = P[:, 2:] - 2.0 * P[:, 1:-1] + P[:, :-2]
    smooth = float(np.mean(s2 * s2))
    a2 = 2.0 * s2 / s2.size
    dP[:, 2:] += lw.lambda1 * a2
    dP[:, 1:-1] -= lw.lambda1 * 2.0 * a2
    dP[:, :-2] += lw.lambda1 * a2

    # dyn (a): decoded velocities must match warped-grid differences of
    # decoded positions
    fd = _grid_derivative_batch(P, grids)
    mism = V - fd
    dyn_vel = float(np.mean(mism * mism))
    am = 2.0 * mism / mism.size
    dV += lw.lambda2 * am
    dP -= lw.lambda2 * _grid_derivative_batch_T(am, grids)

    # dyn (b): width-normalized hinge^2 violations of the limit boxes
    hq, sq, hv, sv, ht, st, qdd, tau = limit_hinge_terms(P, V, grids, arm)
    dyn_limit = float(np.mean(hq * hq) + np.mean(hv * hv) + np.mean(ht * ht))
    dP += lw.lambda2 * 2.0 * hq * sq / hq.size
    dV += lw.lambda2 * 2.0 * hv * sv / hv.size
    lam_tau = 2.0 * ht * st / ht.size  # d dyn_limit / d tau
    if np.any(lam_tau):
        M = mass_matrix_batch(P, arm)
        lam_qdd = np.einsum("nhab,nha->nhb", M, lam_tau)
        dV += lw.lambda2 * np.asarray(arm.joint_damping) * lam_tau
        dV += lw.lambda2 * _grid_derivative_batch_T(lam_qdd, grids)
    dyn = dyn_vel + dyn_limit

    enc_grads = dec_grads = None
    dZ = None
    if want_grads:
        dY_total = dY + (np.concatenate([dP.reshape(N, hn), dV.reshape(N, hn)],
                                        axis=1) * sig)
        dec_grads, dec_in_adj = backward_batch(model.decoder, dec_cache, dY_total)
        dZ = dec_in_adj[:, :model.latent_dim].copy()

    # tangent alignment over neighbor pairs
    tan = 0.0
    if tan_pairs:
        ii = np.array([p[0] for p in tan_pairs])
        jj = np.array([p[1] for p in tan_pairs])
        P_n = len(tan_pairs)
        d = model.latent_dim
        delta = Z[jj] - Z[ii]
        X = np.concatenate([Z[ii], cond_std[ii]], axis=1)
        Vdir = np.concatenate([delta, np.zeros((P_n, model.cond_dim))], axis=1)
        _, u, cache = jvp_forward_batch(model.decoder, X, Vdir)
        r = (xi_std[jj] - xi_std[ii]) - u
        tan = float(np.mean(np.sum(model.w_diag * r * r, axis=1)))
        if want_grads:
            adj_dot = (-2.0 / P_n) * (model.w_diag * r)
            tan_grads, gX, gV = jvp_backward_batch(model.decoder, cache, adj_dot)
            dec_grads.add_scaled(tan_grads, lw.lambda4)
            np.add.at(dZ, ii, lw.lambda4 * (gX[:, :d] - gV[:, :d]))
            np.add.at(dZ, jj, lw.lambda4 * gV[:, :d])

    # geodesic consistency over sampled neighbor pairs
    geo = 0.0
    if geo_pairs:
        P_g = len(geo_pairs)
        for (i, j) in geo_pairs:
            path = geodesic(model, Z[i], Z[j],
                            _destd_cond(model, cond_std[i]), geo_cfg)
            ds = xi_std[i] - xi_std[j]
            target = float(np.sqrt(np.sum(model.w_diag * ds * ds)))
            resid = path.length - target
            geo += resid * resid / P_g
            if want_grads:
                g_a, g_b = _endpoint_length_gradients(model, path.points,
                                                      cond_std[i])
                coef = lw.lambda3 * 2.0 * resid / P_g
                dZ[i] += coef * g_a
                dZ[j] += coef * g_b
        geo = float(geo)

    total = rec + lw.lambda1 * smooth + lw.lambda2 * dyn + lw.lambda3 * geo + lw.lambda4 * tan
    breakdown = LossBreakdown(rec, smooth, dyn, geo, tan, total, dyn_vel, dyn_limit)
    if not want_grads:
        return breakdown, None, None
    enc_grads, _ = backward_batch(model.encoder, enc_cache, dZ)
    return breakdown, enc_grads, dec_grads


def _destd_cond(model: ManifoldModel, cond_std_row: np.ndarray) -> np.ndarray:
    return cond_std_row * model.scalers.cond_std + model.scalers.cond_mean


def manifold_loss(model: ManifoldModel, dataset: Dataset,
                  neighbors: NeighborSet, weights: LossWeights = LossWeights(),
                  geo_cfg: GeodesicConfig = GeodesicConfig(),
                  arm: ArmModel | None = None, indices=None) -> LossBreakdown:
    """Loss values over a batch; geo/tan use all pairs in ``neighbors``."""
    arm = arm if arm is not None else ArmModel()
    breakdown, _, _ = _loss_and_grads(model, dataset, indices, neighbors.pairs,
                                      neighbors.pairs, weights, geo_cfg, arm,
                                      want_grads=False)
    return breakdown


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    lr: float = 1e-2
    momentum: float = 0.9
    latent_dim: int = 4
    enc_hidden: tuple[int, ...] = (128, 64)
    dec_hidden: tuple[int, ...] = (64, 128)
    velocity_weight: float = 0.1
    metric_floor: float = 1e-9
    val_fraction: float = 0.2
    seed: int = 0
    neighbor_k: int = 4
    geo_pairs_per_epoch: int = 8
    tan_pairs_per_epoch: int = 64
    geo_every: int = 10  # geo term evaluated every this many epochs
    loss_weights: LossWeights = LossWeights()
    geo_cfg: GeodesicConfig = GeodesicConfig(segments=8, iterations=20, tol=1e-4)


def train_manifold(dataset: Dataset, cfg: TrainConfig = TrainConfig(),
                   arm: ArmModel | None = None):
    """Fit the conditional manifold; returns (model, per-epoch log).

    Full-batch momentum descent; scalers fitted on the training split; the
    model returned carries the parameters with the best validation
    reconstruction. Bit-reproducible for a fixed seed.
    """
    if len(dataset) < 50:
        raise ValueError("need at least 50 records to train the manifold")
    arm = arm if arm is not None else ArmModel()
    rng = np.random.default_rng(cfg.seed)
    N = len(dataset)
    perm = rng.permutation(N)
    n_val = max(1, int(round(cfg.val_fraction * N)))
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])

    xi_all = dataset.ambient_matrix()
    cond_all = dataset.conditions()
    xi_tr = xi_all[train_idx]
    cond_tr = cond_all[train_idx]
    scalers = Scalers(
        xi_mean=xi_tr.mean(axis=0),
        xi_std=np.maximum(xi_tr.std(axis=0), 1e-6),
        cond_mean=cond_tr.mean(axis=0),
        cond_std=np.maximum(cond_tr.std(axis=0), 1e-6),
    )
    D = xi_all.shape[1]
    c = cond_all.shape[1]
    durations = [dataset.records[int(i)].trajectory.duration for i in train_idx]
    pre_warps = [dataset.records[int(i)].trajectory.pre_warp for i in train_idx]
    post_warps = [dataset.records[int(i)].trajectory.post_warp for i in train_idx]
    align = AlignmentMeta(dataset.H, dataset.n_joints, dataset.alpha_c,
                          float(np.median(durations)), float(np.median(pre_warps)),
                          float(np.median(post_warps)))
    model = ManifoldModel(
        encoder=mlp_init([D + c, *cfg.enc_hidden, cfg.latent_dim], rng),
        decoder=mlp_init([cfg.latent_dim + c, *cfg.dec_hidden, D], rng),
        latent_dim=cfg.latent_dim, cond_dim=c,
        w_diag=ambient_weights(dataset.H, dataset.n_joints, cfg.velocity_weight),
        scalers=scalers, align=align, metric_floor=cfg.metric_floor,
        train_indices=tuple(int(i) for i in train_idx),
        val_indices=tuple(int(i) for i in val_idx),
    )
    neighbors = neighbor_pairs(dataset, model, cfg.neighbor_k, train_idx)
    pair_arr = np.array(neighbors.pairs, dtype=int)

    params = model.encoder.parameters() + model.decoder.parameters()
    opt = MomentumOptimizer(params, cfg.lr, cfg.momentum)
    n_enc = len(model.encoder.parameters())

    best_val = np.inf
    best_params = [p.copy() for p in params]
    log_rows = []
    last_geo = 0.0
    for epoch in range(cfg.epochs):
        tan_pairs = [tuple(pair_arr[k]) for k in
                     rng.choice(len(pair_arr),
                                min(cfg.tan_pairs_per_epoch, len(pair_arr)),
                                replace=False)]
        geo_pairs = []
        if cfg.geo_every > 0 and epoch % cfg.geo_every == 0 and cfg.loss_weights.lambda3 > 0:
            geo_pairs = [tuple(pair_arr[k]) for k in
                         rng.choice(len(pair_arr),
                                    min(cfg.geo_pairs_per_epoch, len(pair_arr)),
                                    replace=False)]
        breakdown, enc_g, dec_g = _loss_and_grads(
            model, dataset, train_idx, geo_pairs, tan_pairs, cfg.loss_weights,
            cfg.geo_cfg, arm, want_grads=True)
        if not np.isfinite(breakdown.total):
            raise TrainingDivergedError(
                f"loss became non-finite at epoch {epoch}: {breakdown}")
        if geo_pairs:
            last_geo = breakdown.geo
        opt.step(enc_g.arrays() + dec_g.arrays())

        val_rec = _reconstruction_error(model, dataset, val_idx)
        if val_rec < best_val:
            best_val = val_rec
            best_params = [p.copy() for p in params]
        log_rows.append({
            "epoch": epoch, "rec": breakdown.rec, "smooth": breakdown.smooth,
            "dyn": breakdown.dyn, "geo": breakdown.geo if geo_pairs else last_geo,
            "tan": breakdown.tan, "total": breakdown.total, "val_rec": val_rec,
        })
    for p, b in zip(params, best_params):
        p[...] = b
    return model, log_rows


def _reconstruction_error(model: ManifoldModel, dataset: Dataset, indices) -> float:
    xi_std, cond_std, _ = _batch_tensors(model, dataset, indices)
    Z, _ = forward_batch(model.encoder, np.concatenate([xi_std, cond_std], axis=1))
    Y, _ = forward_batch(model.decoder, np.concatenate([Z, cond_std], axis=1))
    diff = Y - xi_std
    return float(np.mean(diff * diff))


def heldout_position_rmse(model: ManifoldModel, dataset: Dataset,
                          indices=None) -> float:
    """Joint-position reconstruction RMSE (rad) on the given records."""
    idx = np.asarray(indices if indices is not None else model.val_indices)
    xi_std, cond_std, _ = _batch_tensors(model, dataset, idx)
    Z, _ = forward_batch(model.encoder, np.concatenate([xi_std, cond_std], axis=1))
    Y, _ = forward_batch(model.decoder, np.concatenate([Z, cond_std], axis=1))
    xi_hat = Y * model.scalers.xi_std + model.scalers.xi_mean
    xi = xi_std * model.scalers.xi_std + model.scalers.xi_mean
    hn = model.align.H * model.align.n_joints
    err = xi_hat[:, :hn] - xi[:, :hn]
    return float(np.sqrt(np.mean(err * err)))


# ---------------------------------------------------------------------------
# condition-to-latent map
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionMapConfig:
    epochs: int = 1500
    lr: float = 1e-2
    momentum: float = 0.9
    hidden: tuple[int, ...] = (32, 32)
    seed: int = 0


@dataclass
class ConditionMap:
    net: Mlp  # cond -> latent
    cond_mean: np.ndarray
    cond_std: np.ndarray
    latent_dim: int
    dataset_fingerprint: str = ""


def fit_condition_map(dataset: Dataset, model: ManifoldModel,
                      cfg: ConditionMapConfig = ConditionMapConfig(),
                      fingerprint: str = "") -> ConditionMap:
    """Regress object initial state -> latent code on the training split."""
    idx = np.asarray(model.train_indices if model.train_indices else range(len(dataset)))
    xi_std, cond_std, _ = _batch_tensors(model, dataset, idx)
    Z, _ = forward_batch(model.encoder, np.concatenate([xi_std, cond_std], axis=1))
    rng = np.random.default_rng(cfg.seed)
    net = mlp_init([model.cond_dim, *cfg.hidden, model.latent_dim], rng)
    opt = MomentumOptimizer(net.parameters(), cfg.lr, cfg.momentum)
    for _ in range(cfg.epochs):
        pred, cache = forward_batch(net, cond_std)
        diff = pred - Z
        grads, _ = backward_batch(net, cache, 2.0 * diff / diff.size)
        opt.step(grads.arrays())
    return ConditionMap(net, model.scalers.cond_mean.copy(),
                        model.scalers.cond_std.copy(), model.latent_dim,
                        fingerprint)


def predict_latent(cmap: ConditionMap, x_o0) -> np.ndarray:
    cond = _cond_vector(x_o0)
    if cond.shape != cmap.cond_mean.shape:
        raise ValueError(f"condition dim {cond.shape} != {cmap.cond_mean.shape}")
    z, _ = forward_batch(cmap.net, ((cond - cmap.cond_mean) / cmap.cond_std)[None, :])
    return z[0]
