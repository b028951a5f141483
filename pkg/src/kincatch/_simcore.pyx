# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled episode kernel.

Line-for-line mirror of the arithmetic in ``kincatch.dynamics.step_world``,
the controller loop in ``kincatch._simcore_py.run_episode`` and the formulas
in ``kincatch.reward.reward_step``: same operations in the same order, so the
two backends produce bit-identical traces (the extension is compiled with
-ffp-contract=off for exactly this reason). Planar workspace, n_joints <= 8.
"""

from libc.math cimport cos, sin, sqrt, exp, fabs, isfinite

DEF MAXN = 8

# keep in sync with kincatch.engine.SCALAR_LAYOUT (guarded by a unit test)
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

cdef enum:
    S_DT, S_PALM_R, S_LINK_R, S_FLOOR, S_KP_C, S_KD_C, S_REST, S_CAPTURE, \
    S_ATT_K, S_ATT_C, S_BREAK, S_NSUB, S_OBJ_M, S_OBJ_R, S_GX, S_GY, \
    S_BASE_X, S_BASE_Y, S_SOFT, S_GAIN_SCALE, S_SIG_D, S_SIG_V, S_SIG_S, \
    S_F_REF, S_F_SOFT, S_PROG_CLIP, S_L1, S_L2, S_L3, S_L4, S_L5, S_L6, \
    S_L7, S_L8, S_L9, S_L10, S_L11, S_L12, S_ACT_GAIN, S_TAU_DELAY, S_P_DELAY, \
    S_CAPTURE_CONE


cdef struct ArmP:
    int n
    double L[MAXN]
    double m[MAXN]
    double com[MAXN]
    double damp[MAXN]
    double arma[MAXN]
    double gx, gy
    double base_x, base_y


cdef void _chain_trig(double* q, int n, double* cs, double* ss) noexcept nogil:
    cdef double acc = 0.0
    cdef int j
    for j in range(n):
        acc = acc + q[j]
        cs[j] = cos(acc)
        ss[j] = sin(acc)


cdef void _inv_dyn(ArmP* A, double* q, double* qd, double* qdd, double* tau) noexcept nogil:
    # mirrors dynamics.inverse_dynamics (point-mass chain)
    cdef double cs[MAXN]
    cdef double ss[MAXN]
    cdef double thd[MAXN]
    cdef double thdd[MAXN]
    cdef double ax, ay, fx, fy, jx, jy, r, w2
    cdef int n = A.n
    cdef int i, j, a
    _chain_trig(q, n, cs, ss)
    cdef double acc = 0.0
    for j in range(n):
        acc = acc + qd[j]
        thd[j] = acc
    acc = 0.0
    for j in range(n):
        acc = acc + qdd[j]
        thdd[j] = acc
    for a in range(n):
        tau[a] = 0.0
    for i in range(n):
        ax = 0.0
        ay = 0.0
        for j in range(i + 1):
            r = A.com[i] if j == i else A.L[j]
            w2 = thd[j] * thd[j]
            ax += r * (-ss[j] * thdd[j] - cs[j] * w2)
            ay += r * (cs[j] * thdd[j] - ss[j] * w2)
        fx = A.m[i] * (ax - A.gx)
        fy = A.m[i] * (ay - A.gy)
        for a in range(i + 1):
            jx = 0.0
            jy = 0.0
            for j in range(a, i + 1):
                r = A.com[i] if j == i else A.L[j]
                jx -= r * ss[j]
                jy += r * cs[j]
            tau[a] += jx * fx + jy * fy
    for a in range(n):
        tau[a] += A.damp[a] * qd[a] + A.arma[a] * qdd[a]


cdef int _arm_accel(ArmP* A, double* q, double* qd, double* tau_app, double* qdd_out) noexcept nogil:
    # mirrors dynamics.arm_accel: M(q) qdd = tau - bias(q, qd); Cholesky solve
    cdef double cs[MAXN]
    cdef double ss[MAXN]
    cdef double zeros[MAXN]
    cdef double bias[MAXN]
    cdef double M[MAXN][MAXN]
    cdef double Lm[MAXN][MAXN]
    cdef double colx[MAXN]
    cdef double coly[MAXN]
    cdef double y[MAXN]
    cdef double rhs[MAXN]
    cdef double s, r, jx, jy
    cdef int n = A.n
    cdef int i, j, a, b, k
    for a in range(n):
        zeros[a] = 0.0
    _inv_dyn(A, q, qd, zeros, bias)
    _chain_trig(q, n, cs, ss)
    for a in range(n):
        for b in range(n):
            M[a][b] = 0.0
    for i in range(n):
        for a in range(n):
            jx = 0.0
            jy = 0.0
            if a <= i:
                for j in range(a, i + 1):
                    r = A.com[i] if j == i else A.L[j]
                    jx -= r * ss[j]
                    jy += r * cs[j]
            colx[a] = jx
            coly[a] = jy
        for a in range(i + 1):
            for b in range(a + 1):
                M[a][b] += A.m[i] * (colx[a] * colx[b] + coly[a] * coly[b])
    for a in range(n):
        M[a][a] += A.arma[a]
        for b in range(a):
            M[b][a] = M[a][b]
    for a in range(n):
        rhs[a] = tau_app[a] - bias[a]
    # Cholesky
    for i in range(n):
        for j in range(i + 1):
            s = M[i][j]
            for k in range(j):
                s -= Lm[i][k] * Lm[j][k]
            if i == j:
                if s <= 0.0:
                    return 0
                Lm[i][i] = sqrt(s)
            else:
                Lm[i][j] = s / Lm[j][j]
    for i in range(n):
        s = rhs[i]
        for k in range(i):
            s -= Lm[i][k] * y[k]
        y[i] = s / Lm[i][i]
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= Lm[k][i] * qdd_out[k]
        qdd_out[i] = s / Lm[i][i]
    return 1


cdef void _fk(ArmP* A, double* q, double* qd,
              double* px, double* py,  # n+1 joint positions
              double* pos, double* vel, double* nrm,
              double* angle, double* omega,
              double* cs, double* ss) noexcept nogil:
    # mirrors dynamics.fk_palm / _joint_positions
    cdef int n = A.n
    cdef int a, j
    cdef double vx = 0.0
    cdef double vy = 0.0
    cdef double om = 0.0
    cdef double jx, jy, acc
    _chain_trig(q, n, cs, ss)
    px[0] = A.base_x
    py[0] = A.base_y
    for j in range(n):
        px[j + 1] = px[j] + A.L[j] * cs[j]
        py[j + 1] = py[j] + A.L[j] * ss[j]
    for a in range(n):
        jx = 0.0
        jy = 0.0
        for j in range(a, n):
            jx -= A.L[j] * ss[j]
            jy += A.L[j] * cs[j]
        vx += jx * qd[a]
        vy += jy * qd[a]
        om += qd[a]
    acc = 0.0
    for j in range(n):
        acc = acc + q[j]
    pos[0] = px[n]
    pos[1] = py[n]
    vel[0] = vx
    vel[1] = vy
    nrm[0] = -ss[n - 1]
    nrm[1] = cs[n - 1]
    angle[0] = acc
    omega[0] = om


cdef double _seg_point_dist2(double ax, double ay, double bx, double by,
                             double ppx, double ppy) noexcept nogil:
    cdef double abx = bx - ax
    cdef double aby = by - ay
    cdef double apx = ppx - ax
    cdef double apy = ppy - ay
    cdef double denom = abx * abx + aby * aby
    cdef double t, ex, ey
    if denom <= 0.0:
        return apx * apx + apy * apy
    t = (apx * abx + apy * aby) / denom
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    ex = apx - t * abx
    ey = apy - t * aby
    return ex * ex + ey * ey


cdef int _collision(ArmP* A, double* px, double* py, double* cs, double* ss,
                    double obj_x, double obj_y, double obj_r,
                    double palm_radius, double link_radius,
                    double floor_height) noexcept nogil:
    # mirrors dynamics.check_collision (planar)
    cdef int n = A.n
    cdef int i
    cdef double ax, ay, bx, by, cut, lo, d2, r, ln
    for i in range(n):
        ax = px[i]
        ay = py[i]
        bx = px[i + 1]
        by = py[i + 1]
        if i == n - 1:
            ln = A.L[i]
            cut = palm_radius if palm_radius < ln else ln
            bx = bx - cut * cs[i]
            by = by - cut * ss[i]
        lo = ay if ay < by else by
        if lo - link_radius < floor_height:
            return 1
        d2 = _seg_point_dist2(ax, ay, bx, by, obj_x, obj_y)
        r = link_radius + obj_r
        if d2 < r * r:
            return 1
    return 0


def run_episode(double[:, ::1] out_q, double[:, ::1] out_qd,
                double[:, ::1] out_obj_p, double[:, ::1] out_obj_v,
                double[:, ::1] out_palm_pos, double[:, ::1] out_palm_vel,
                double[:, ::1] out_palm_normal, double[::1] out_palm_angle,
                unsigned char[::1] out_attached, unsigned char[::1] out_dropped,
                double[:, ::1] out_tau_cmd, double[:, ::1] out_tau_app,
                double[:, ::1] out_contact_force, double[:, ::1] out_bond_force,
                unsigned char[::1] out_contact_flag, unsigned char[::1] out_collision,
                double[::1] out_peak_pen, double[:, ::1] out_reward,
                const double[:, ::1] ref_q, const double[:, ::1] ref_qd,
                const long long[::1] ref_index,
                const double[::1] q0, const double[::1] qd0,
                const double[::1] obj_p0, const double[::1] obj_v0,
                const double[::1] link_lengths, const double[::1] link_masses,
                const double[::1] link_com, const double[::1] damping,
                const double[::1] armature,
                const double[:, ::1] q_lim, const double[:, ::1] qd_lim,
                const double[:, ::1] tau_lim,
                const double[::1] kp, const double[::1] kd, const double[::1] scal,
                const double[:, ::1] noise_q, const double[:, ::1] noise_qd,
                const unsigned char[::1] packet_keep):
    """Run the episode loop; returns the number of completed steps."""
    cdef int T = out_tau_cmd.shape[0]
    cdef int n = out_q.shape[1]
    cdef int t_ref = ref_q.shape[0]
    if n > MAXN:
        raise ValueError(f"compiled kernel supports at most {MAXN} joints")

    cdef ArmP A
    cdef int i, j, a, k
    A.n = n
    for a in range(n):
        A.L[a] = link_lengths[a]
        A.m[a] = link_masses[a]
        A.com[a] = link_com[a]
        A.damp[a] = damping[a]
        A.arma[a] = armature[a]
    A.gx = scal[S_GX]
    A.gy = scal[S_GY]
    A.base_x = scal[S_BASE_X]
    A.base_y = scal[S_BASE_Y]

    cdef double dt = scal[S_DT]
    cdef double palm_radius = scal[S_PALM_R]
    cdef double link_radius = scal[S_LINK_R]
    cdef double floor_height = scal[S_FLOOR]
    cdef double k_p = scal[S_KP_C]
    cdef double k_d = scal[S_KD_C]
    cdef double rest_cap = scal[S_REST]
    cdef double capture_speed = scal[S_CAPTURE]
    cdef double att_k = scal[S_ATT_K]
    cdef double att_c = scal[S_ATT_C]
    cdef double break_dist = scal[S_BREAK]
    cdef int n_sub = <int>scal[S_NSUB]
    cdef double obj_m = scal[S_OBJ_M]
    cdef double obj_r = scal[S_OBJ_R]
    cdef double soft_zone = scal[S_SOFT]
    cdef double gain_scale = scal[S_GAIN_SCALE]
    cdef double sigma_d = scal[S_SIG_D]
    cdef double sigma_v = scal[S_SIG_V]
    cdef double sigma_s = scal[S_SIG_S]
    cdef double f_ref = scal[S_F_REF]
    cdef double f_soft = scal[S_F_SOFT]
    cdef double prog_clip = scal[S_PROG_CLIP]
    cdef double act_gain = scal[S_ACT_GAIN]
    cdef int tau_delay = <int>scal[S_TAU_DELAY]
    cdef int p_delay = <int>scal[S_P_DELAY]
    cdef double capture_cone = scal[S_CAPTURE_CONE]
    cdef double r_sum = palm_radius + obj_r
    cdef int have_noise_q = noise_q.shape[0] == T
    cdef int have_noise_qd = noise_qd.shape[0] == T
    cdef int have_packet = packet_keep.shape[0] == T

    # state
    cdef double q[MAXN]
    cdef double qd[MAXN]
    cdef double obj_px_, obj_py_, obj_vx, obj_vy
    cdef int attached = 0
    cdef int dropped = 0
    cdef int in_contact = 0
    cdef double entry_speed = 0.0
    cdef double bond_lx = 0.0
    cdef double bond_ly = 0.0
    cdef double t_now = 0.0

    # scratch
    cdef double cs[MAXN]
    cdef double ss[MAXN]
    cdef double jpx[MAXN + 1]
    cdef double jpy[MAXN + 1]
    cdef double palm_pos[2]
    cdef double palm_vel[2]
    cdef double palm_nrm[2]
    cdef double palm_angle = 0.0
    cdef double palm_omega = 0.0
    cdef double prev_palm_x, prev_palm_y, prev_angle
    cdef double q_meas[MAXN]
    cdef double qd_meas[MAXN]
    cdef double zeros[MAXN]
    cdef double g_comp[MAXN]
    cdef double tau_cmd[MAXN]
    cdef double tau_eff[MAXN]
    cdef double tau_eff_prev[MAXN]
    cdef double tau_app[MAXN]
    cdef double a1[MAXN]
    cdef double a2[MAXN]
    cdef double a3[MAXN]
    cdef double a4[MAXN]
    cdef double qb[MAXN]
    cdef double vb[MAXN]
    cdef double qc[MAXN]
    cdef double vc[MAXN]
    cdef double qd_[MAXN]
    cdef double vd[MAXN]
    cdef double q1[MAXN]
    cdef double qd1[MAXN]
    cdef int km, ke, rk, sub, ok
    cdef double d_here, d_prev, scale, lim_lo, lim_hi
    cdef double dx0, dx1, dist, gap, mag, closing, rel, rel0, rel1, speed, cap, sc2
    cdef double frac, ipx, ipy, th, c_, s_, rx, ry, ex, ey, ext, avx, avy
    cdef double fbx, fby, fcx, fcy, fx_, fy_, peak_pen
    cdef double pvx, pvy, om_step, th0, th1, pw0x, pw0y, pw1x, pw1y
    cdef double dt_sub, trial_x, trial_y
    cdef double fc_mag, prev_fc, t_new, dt_step
    cdef double r_dist, r_align, r_progress, r_vel, r_drag, r_impact
    cdef double r_grasp, r_stable, p_impulse, p_col, p_limit, p_drop
    cdef double stage1, stage2, stage3, penalty, total
    cdef double speed_o, align, over, prog, v_rel, hsum, width, face
    cdef int collided_event, gate2
    cdef int capture_enabled

    for a in range(n):
        q[a] = q0[a]
        qd[a] = qd0[a]
        tau_eff_prev[a] = 0.0
        zeros[a] = 0.0
    obj_px_ = obj_p0[0]
    obj_py_ = obj_p0[1]
    obj_vx = obj_v0[0]
    obj_vy = obj_v0[1]

    _fk(&A, q, qd, jpx, jpy, palm_pos, palm_vel, palm_nrm, &palm_angle,
        &palm_omega, cs, ss)
    for a in range(n):
        out_q[0, a] = q[a]
        out_qd[0, a] = qd[a]
    out_obj_p[0, 0] = obj_px_
    out_obj_p[0, 1] = obj_py_
    out_obj_v[0, 0] = obj_vx
    out_obj_v[0, 1] = obj_vy
    out_palm_pos[0, 0] = palm_pos[0]
    out_palm_pos[0, 1] = palm_pos[1]
    out_palm_vel[0, 0] = palm_vel[0]
    out_palm_vel[0, 1] = palm_vel[1]
    out_palm_normal[0, 0] = palm_nrm[0]
    out_palm_normal[0, 1] = palm_nrm[1]
    out_palm_angle[0] = palm_angle
    out_attached[0] = 0
    out_dropped[0] = 0

    prev_fc = 0.0
    dx0 = palm_pos[0] - obj_px_
    dx1 = palm_pos[1] - obj_py_
    d_here = sqrt(dx0 * dx0 + dx1 * dx1)

    for k in range(T):
        # ---- controller (mirrors _simcore_py.run_episode) ----
        km = k - p_delay if k - p_delay > 0 else 0
        for a in range(n):
            q_meas[a] = out_q[km, a]
            qd_meas[a] = out_qd[km, a]
        if have_noise_q:
            for a in range(n):
                q_meas[a] += noise_q[k, a]
        if have_noise_qd:
            for a in range(n):
                qd_meas[a] += noise_qd[k, a]
        scale = gain_scale if (d_here <= soft_zone or attached) else 1.0
        rk = <int>ref_index[k]
        if rk < 0:
            rk = 0
        elif rk >= t_ref:
            rk = t_ref - 1
        _inv_dyn(&A, q_meas, zeros, zeros, g_comp)
        for a in range(n):
            tau_cmd[a] = scale * (kp[a] * (ref_q[rk, a] - q_meas[a])
                                  + kd[a] * (ref_qd[rk, a] - qd_meas[a])) + g_comp[a]
            out_tau_cmd[k, a] = tau_cmd[a]
        ke = k - tau_delay if k - tau_delay > 0 else 0
        for a in range(n):
            tau_eff[a] = out_tau_cmd[ke, a]
        if have_packet and packet_keep[k] == 0:
            for a in range(n):
                tau_eff[a] = tau_eff_prev[a]
        for a in range(n):
            tau_eff_prev[a] = tau_eff[a]
        for a in range(n):
            tau_eff[a] = act_gain * tau_eff[a]
        for a in range(n):
            lim_lo = tau_lim[a, 0]
            lim_hi = tau_lim[a, 1]
            tau_app[a] = tau_eff[a]
            if tau_app[a] < lim_lo:
                tau_app[a] = lim_lo
            elif tau_app[a] > lim_hi:
                tau_app[a] = lim_hi

        # ---- arm RK4 (mirrors dynamics.step_world) ----
        ok = _arm_accel(&A, q, qd, tau_app, a1)
        for a in range(n):
            qb[a] = q[a] + 0.5 * dt * qd[a]
            vb[a] = qd[a] + 0.5 * dt * a1[a]
        ok = ok and _arm_accel(&A, qb, vb, tau_app, a2)
        for a in range(n):
            qc[a] = q[a] + 0.5 * dt * vb[a]
            vc[a] = qd[a] + 0.5 * dt * a2[a]
        ok = ok and _arm_accel(&A, qc, vc, tau_app, a3)
        for a in range(n):
            qd_[a] = q[a] + dt * vc[a]
            vd[a] = qd[a] + dt * a3[a]
        ok = ok and _arm_accel(&A, qd_, vd, tau_app, a4)
        if not ok:
            return k
        for a in range(n):
            q1[a] = q[a] + dt / 6.0 * (qd[a] + 2.0 * vb[a] + 2.0 * vc[a] + vd[a])
            qd1[a] = qd[a] + dt / 6.0 * (a1[a] + 2.0 * a2[a] + 2.0 * a3[a] + a4[a])

        prev_palm_x = palm_pos[0]
        prev_palm_y = palm_pos[1]
        prev_angle = palm_angle
        d_prev = d_here

        _fk(&A, q1, qd1, jpx, jpy, palm_pos, palm_vel, palm_nrm, &palm_angle,
            &palm_omega, cs, ss)

        # ---- object phase (mirrors dynamics._object_phase) ----
        fcx = 0.0
        fcy = 0.0
        fbx = 0.0
        fby = 0.0
        peak_pen = 0.0
        capture_enabled = not dropped
        pw0x = prev_palm_x
        pw0y = prev_palm_y
        pw1x = palm_pos[0]
        pw1y = palm_pos[1]
        th0 = prev_angle
        th1 = palm_angle
        sub = 1
        if not attached and not in_contact:
            trial_x = obj_px_ + obj_vx * dt + 0.5 * A.gx * dt * dt
            trial_y = obj_py_ + obj_vy * dt + 0.5 * A.gy * dt * dt
            dx0 = trial_x - pw1x
            dx1 = trial_y - pw1y
            dist = sqrt(dx0 * dx0 + dx1 * dx1)
            if dist - r_sum > 0.0:
                obj_px_ = trial_x
                obj_py_ = trial_y
                obj_vx = obj_vx + A.gx * dt
                obj_vy = obj_vy + A.gy * dt
                sub = 0  # skip the substep loop
        if sub:
            dt_sub = dt / n_sub
            pvx = (pw1x - pw0x) / dt
            pvy = (pw1y - pw0y) / dt
            om_step = (th1 - th0) / dt
            for j in range(1, n_sub + 1):
                frac = (<double>j) / (<double>n_sub)
                ipx = pw0x + frac * (pw1x - pw0x)
                ipy = pw0y + frac * (pw1y - pw0y)
                th = th0 + frac * (th1 - th0)
                fcx = 0.0
                fcy = 0.0
                fbx = 0.0
                fby = 0.0
                fx_ = 0.0
                fy_ = 0.0
                if attached:
                    c_ = cos(th)
                    s_ = sin(th)
                    rx = c_ * bond_lx - s_ * bond_ly
                    ry = s_ * bond_lx + c_ * bond_ly
                    ex = (ipx + rx) - obj_px_
                    ey = (ipy + ry) - obj_py_
                    ext = sqrt(ex * ex + ey * ey)
                    if ext > break_dist:
                        attached = 0
                        in_contact = 0
                        entry_speed = 0.0
                    else:
                        avx = pvx - om_step * ry
                        avy = pvy + om_step * rx
                        fbx = att_k * ex + att_c * (avx - obj_vx)
                        fby = att_k * ey + att_c * (avy - obj_vy)
                        fx_ = fbx
                        fy_ = fby
                if not attached:
                    dx0 = obj_px_ - ipx
                    dx1 = obj_py_ - ipy
                    dist = sqrt(dx0 * dx0 + dx1 * dx1)
                    gap = dist - r_sum
                    if gap <= 0.0:
                        if dist > 1e-12:
                            rel0 = dx0 / dist
                            rel1 = dx1 / dist
                        else:
                            rel0 = -sin(th)
                            rel1 = cos(th)
                        closing = rel0 * (pvx - obj_vx) + rel1 * (pvy - obj_vy)
                        mag = k_p * (-gap) + k_d * closing
                        if mag < 0.0:
                            mag = 0.0
                        fcx = mag * rel0
                        fcy = mag * rel1
                        if -gap > peak_pen:
                            peak_pen = -gap
                        dx0 = obj_vx - pvx
                        dx1 = obj_vy - pvy
                        rel = sqrt(dx0 * dx0 + dx1 * dx1)
                        if not in_contact:
                            entry_speed = rel
                            in_contact = 1
                        face = rel0 * (-sin(th)) + rel1 * cos(th)
                        if (capture_enabled and rel <= capture_speed
                                and face >= capture_cone):
                            attached = 1
                            c_ = cos(th)
                            s_ = sin(th)
                            ex = obj_px_ - ipx
                            ey = obj_py_ - ipy
                            bond_lx = c_ * ex + s_ * ey
                            bond_ly = -s_ * ex + c_ * ey
                            in_contact = 0
                            avx = pvx - om_step * ey
                            avy = pvy + om_step * ex
                            fbx = att_c * (avx - obj_vx)
                            fby = att_c * (avy - obj_vy)
                            fcx = 0.0
                            fcy = 0.0
                            fx_ = fbx
                            fy_ = fby
                        else:
                            fx_ = fcx
                            fy_ = fcy
                    else:
                        if in_contact:
                            rel0 = obj_vx - pvx
                            rel1 = obj_vy - pvy
                            speed = sqrt(rel0 * rel0 + rel1 * rel1)
                            cap = rest_cap * entry_speed
                            if speed > cap and speed > 1e-12:
                                sc2 = cap / speed
                                obj_vx = pvx + rel0 * sc2
                                obj_vy = pvy + rel1 * sc2
                            in_contact = 0
                obj_vx = obj_vx + dt_sub * (A.gx + fx_ / obj_m)
                obj_px_ = obj_px_ + dt_sub * obj_vx
                obj_vy = obj_vy + dt_sub * (A.gy + fy_ / obj_m)
                obj_py_ = obj_py_ + dt_sub * obj_vy
        if attached:
            in_contact = 0

        # finiteness check (mirrors the NumericError raise in step_world)
        ok = isfinite(obj_px_) and isfinite(obj_py_) and isfinite(obj_vx) and isfinite(obj_vy)
        for a in range(n):
            ok = ok and isfinite(q1[a]) and isfinite(qd1[a])
        if not ok:
            return k
        for a in range(n):
            out_tau_app[k, a] = tau_app[a]

        if not dropped and (not attached) and obj_py_ < floor_height:
            dropped = 1
        collided_event = _collision(&A, jpx, jpy, cs, ss, obj_px_, obj_py_,
                                    obj_r, palm_radius, link_radius, floor_height)
        fc_mag = sqrt(fcx * fcx + fcy * fcy)

        # ---- record state k+1 ----
        for a in range(n):
            q[a] = q1[a]
            qd[a] = qd1[a]
            out_q[k + 1, a] = q[a]
            out_qd[k + 1, a] = qd[a]
        out_obj_p[k + 1, 0] = obj_px_
        out_obj_p[k + 1, 1] = obj_py_
        out_obj_v[k + 1, 0] = obj_vx
        out_obj_v[k + 1, 1] = obj_vy
        out_palm_pos[k + 1, 0] = palm_pos[0]
        out_palm_pos[k + 1, 1] = palm_pos[1]
        out_palm_vel[k + 1, 0] = palm_vel[0]
        out_palm_vel[k + 1, 1] = palm_vel[1]
        out_palm_normal[k + 1, 0] = palm_nrm[0]
        out_palm_normal[k + 1, 1] = palm_nrm[1]
        out_palm_angle[k + 1] = palm_angle
        out_attached[k + 1] = 1 if attached else 0
        out_dropped[k + 1] = 1 if dropped else 0
        out_contact_force[k, 0] = fcx
        out_contact_force[k, 1] = fcy
        out_peak_pen[k] = peak_pen
        out_contact_flag[k] = 1 if in_contact else 0
        out_collision[k] = 1 if collided_event else 0
        if attached:
            # fresh bond-force evaluation at the recorded end-of-step state
            c_ = cos(palm_angle)
            s_ = sin(palm_angle)
            rx = c_ * bond_lx - s_ * bond_ly
            ry = s_ * bond_lx + c_ * bond_ly
            ex = (palm_pos[0] + rx) - obj_px_
            ey = (palm_pos[1] + ry) - obj_py_
            avx = palm_vel[0] - palm_omega * ry
            avy = palm_vel[1] + palm_omega * rx
            out_bond_force[k, 0] = att_k * ex + att_c * (avx - obj_vx)
            out_bond_force[k, 1] = att_k * ey + att_c * (avy - obj_vy)
        else:
            out_bond_force[k, 0] = 0.0
            out_bond_force[k, 1] = 0.0

        # ---- rewards (mirrors reward.reward_step) ----
        t_new = t_now + dt
        dt_step = t_new - t_now
        t_now = t_new
        dx0 = palm_pos[0] - obj_px_
        dx1 = palm_pos[1] - obj_py_
        d_here = sqrt(dx0 * dx0 + dx1 * dx1)
        r_dist = exp(-d_here / sigma_d)
        speed_o = sqrt(obj_vx * obj_vx + obj_vy * obj_vy)
        if speed_o > 1e-9:
            align = 0.0
            align -= palm_nrm[0] * (obj_vx / speed_o)
            align -= palm_nrm[1] * (obj_vy / speed_o)
            r_align = align if align > 0.0 else 0.0
        else:
            r_align = 0.0
        prog = (d_prev - d_here) / dt_step
        if prog > prog_clip:
            prog = prog_clip
        elif prog < -prog_clip:
            prog = -prog_clip
        r_progress = prog / prog_clip
        dx0 = obj_vx - palm_vel[0]
        dx1 = obj_vy - palm_vel[1]
        v_rel = sqrt(dx0 * dx0 + dx1 * dx1)
        gate2 = 1 if (d_here <= soft_zone or attached) else 0
        r_vel = exp(-v_rel / sigma_v) if gate2 else 0.0
        r_drag = exp(-v_rel / sigma_v) if attached else 0.0
        over = fc_mag - f_soft
        if gate2:
            r_impact = -(over if over > 0.0 else 0.0) / f_ref
        else:
            r_impact = 0.0
        r_grasp = 1.0 if attached else 0.0
        r_stable = exp(-v_rel / sigma_s) if attached else 0.0
        p_impulse = fabs(fc_mag - prev_fc) / f_ref
        p_col = 1.0 if collided_event else 0.0
        hsum = 0.0
        for a in range(n):
            lim_lo = q_lim[a, 0]
            lim_hi = q_lim[a, 1]
            width = lim_hi - lim_lo
            if q[a] < lim_lo:
                hsum += (lim_lo - q[a]) / width
            elif q[a] > lim_hi:
                hsum += (q[a] - lim_hi) / width
            lim_lo = qd_lim[a, 0]
            lim_hi = qd_lim[a, 1]
            width = lim_hi - lim_lo
            if qd[a] < lim_lo:
                hsum += (lim_lo - qd[a]) / width
            elif qd[a] > lim_hi:
                hsum += (qd[a] - lim_hi) / width
            lim_lo = tau_lim[a, 0]
            lim_hi = tau_lim[a, 1]
            width = lim_hi - lim_lo
            if tau_cmd[a] < lim_lo:
                hsum += (lim_lo - tau_cmd[a]) / width
            elif tau_cmd[a] > lim_hi:
                hsum += (tau_cmd[a] - lim_hi) / width
        p_limit = hsum
        p_drop = 1.0 if (dropped and out_dropped[k] == 0) else 0.0
        stage1 = scal[S_L1] * r_dist + scal[S_L2] * r_align + scal[S_L3] * r_progress
        stage2 = scal[S_L4] * r_vel + scal[S_L5] * r_drag + scal[S_L6] * r_impact
        stage3 = scal[S_L7] * r_grasp + scal[S_L8] * r_stable
        penalty = (scal[S_L9] * p_impulse + scal[S_L10] * p_col
                   + scal[S_L11] * p_limit + scal[S_L12] * p_drop)
        total = stage1 + stage2 + stage3 - penalty
        out_reward[k, 0] = r_dist
        out_reward[k, 1] = r_align
        out_reward[k, 2] = r_progress
        out_reward[k, 3] = r_vel
        out_reward[k, 4] = r_drag
        out_reward[k, 5] = r_impact
        out_reward[k, 6] = r_grasp
        out_reward[k, 7] = r_stable
        out_reward[k, 8] = p_impulse
        out_reward[k, 9] = p_col
        out_reward[k, 10] = p_limit
        out_reward[k, 11] = p_drop
        out_reward[k, 12] = stage1
        out_reward[k, 13] = stage2
        out_reward[k, 14] = stage3
        out_reward[k, 15] = penalty
        out_reward[k, 16] = total
        prev_fc = fc_mag
    return T

