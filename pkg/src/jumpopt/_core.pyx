# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of the two hot dynamics kernels.

`step` and `step_derivatives` replicate the pure-Python implementations
operation for operation: same branch thresholds, same series expansions,
same accumulation structure.  Robot constants arrive as the flat array
built by `centroidal._pack_params`; everything else is stack arithmetic,
so the heavy part runs without the GIL and the thread-pool path scales.
"""

from libc.math cimport acos, atan2, cos, fabs, hypot, sin, sqrt

import numpy as np

from .robot import LEG_NAMES, SingularJacobianError

cdef double _SMALL = 1e-8
cdef double _SERIES = 0.1
cdef double _SHELL_SLACK = 1e-12
cdef double _COND_LIMIT = 1e8


# ---------------------------------------------------------------------------
# Small dense helpers, row-major 3x3.


cdef inline void _mat3_mul(const double* a, const double* b, double* out) noexcept nogil:
    cdef int i, j, k
    cdef double s
    for i in range(3):
        for j in range(3):
            s = 0.0
            for k in range(3):
                s += a[3 * i + k] * b[3 * k + j]
            out[3 * i + j] = s


cdef inline void _mat3_mul_t(const double* a, const double* b, double* out) noexcept nogil:
    # a @ b.T
    cdef int i, j, k
    cdef double s
    for i in range(3):
        for j in range(3):
            s = 0.0
            for k in range(3):
                s += a[3 * i + k] * b[3 * j + k]
            out[3 * i + j] = s


cdef inline void _mat3_t_mul(const double* a, const double* b, double* out) noexcept nogil:
    # a.T @ b
    cdef int i, j, k
    cdef double s
    for i in range(3):
        for j in range(3):
            s = 0.0
            for k in range(3):
                s += a[3 * k + i] * b[3 * k + j]
            out[3 * i + j] = s


cdef inline void _mat3_vec(const double* a, const double* v, double* out) noexcept nogil:
    cdef int i
    for i in range(3):
        out[i] = a[3 * i] * v[0] + a[3 * i + 1] * v[1] + a[3 * i + 2] * v[2]


cdef inline void _mat3_t_vec(const double* a, const double* v, double* out) noexcept nogil:
    cdef int i
    for i in range(3):
        out[i] = a[i] * v[0] + a[3 + i] * v[1] + a[6 + i] * v[2]


cdef inline void _cross(const double* a, const double* b, double* out) noexcept nogil:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


cdef inline double _dot(const double* a, const double* b) noexcept nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef inline double _norm3(const double* v) noexcept nogil:
    return sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])


cdef inline void _skew(const double* v, double* out) noexcept nogil:
    out[0] = 0.0;    out[1] = -v[2]; out[2] = v[1]
    out[3] = v[2];   out[4] = 0.0;   out[5] = -v[0]
    out[6] = -v[1];  out[7] = v[0];  out[8] = 0.0


cdef inline void _eye3(double* out) noexcept nogil:
    cdef int i
    for i in range(9):
        out[i] = 0.0
    out[0] = 1.0
    out[4] = 1.0
    out[8] = 1.0


cdef inline int _inv3(const double* a, double* out) noexcept nogil:
    # Adjugate inverse; returns nonzero on a vanishing determinant.
    cdef double c00 = a[4] * a[8] - a[5] * a[7]
    cdef double c01 = a[5] * a[6] - a[3] * a[8]
    cdef double c02 = a[3] * a[7] - a[4] * a[6]
    cdef double det = a[0] * c00 + a[1] * c01 + a[2] * c02
    if det == 0.0:
        return 1
    cdef double inv_det = 1.0 / det
    out[0] = c00 * inv_det
    out[1] = (a[2] * a[7] - a[1] * a[8]) * inv_det
    out[2] = (a[1] * a[5] - a[2] * a[4]) * inv_det
    out[3] = c01 * inv_det
    out[4] = (a[0] * a[8] - a[2] * a[6]) * inv_det
    out[5] = (a[2] * a[3] - a[0] * a[5]) * inv_det
    out[6] = c02 * inv_det
    out[7] = (a[1] * a[6] - a[0] * a[7]) * inv_det
    out[8] = (a[0] * a[4] - a[1] * a[3]) * inv_det
    return 0


cdef int _solve3(const double* a_in, const double* b_in, double* out) noexcept nogil:
    # Gaussian elimination with partial pivoting, three right-hand sides.
    cdef double a[9]
    cdef double b[9]
    cdef int i, j, k, piv
    cdef double mx, tmp, f
    for i in range(9):
        a[i] = a_in[i]
        b[i] = b_in[i]
    for k in range(3):
        piv = k
        mx = fabs(a[3 * k + k])
        for i in range(k + 1, 3):
            if fabs(a[3 * i + k]) > mx:
                mx = fabs(a[3 * i + k])
                piv = i
        if mx == 0.0:
            return 1
        if piv != k:
            for j in range(3):
                tmp = a[3 * k + j]; a[3 * k + j] = a[3 * piv + j]; a[3 * piv + j] = tmp
                tmp = b[3 * k + j]; b[3 * k + j] = b[3 * piv + j]; b[3 * piv + j] = tmp
        for i in range(k + 1, 3):
            f = a[3 * i + k] / a[3 * k + k]
            a[3 * i + k] = 0.0
            for j in range(k + 1, 3):
                a[3 * i + j] -= f * a[3 * k + j]
            for j in range(3):
                b[3 * i + j] -= f * b[3 * k + j]
    for k in range(2, -1, -1):
        for j in range(3):
            tmp = b[3 * k + j]
            for i in range(k + 1, 3):
                tmp -= a[3 * k + i] * out[3 * i + j]
            out[3 * k + j] = tmp / a[3 * k + k]
    return 0


cdef double _svd3_condition(const double* j) noexcept nogil:
    # 2-norm condition of a 3x3 via one-sided Jacobi on the columns.
    # Eigenvalues of J^T J lose all relative accuracy once the condition
    # nears 1/sqrt(eps), which is exactly where the threshold test lives;
    # Jacobi keeps small singular values accurate.  Returns -1 if singular.
    cdef double v[9]
    cdef int p, q, k, sweep
    cdef double a, b, c, zeta, t, cs, sn, vp, vq, off
    for k in range(9):
        v[k] = j[k]
    for sweep in range(30):
        off = 0.0
        for p in range(2):
            for q in range(p + 1, 3):
                a = v[p] * v[p] + v[3 + p] * v[3 + p] + v[6 + p] * v[6 + p]
                b = v[q] * v[q] + v[3 + q] * v[3 + q] + v[6 + q] * v[6 + q]
                c = v[p] * v[q] + v[3 + p] * v[3 + q] + v[6 + p] * v[6 + q]
                if c * c <= 1e-30 * a * b:
                    continue
                off = 1.0
                zeta = (b - a) / (2.0 * c)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                cs = 1.0 / sqrt(1.0 + t * t)
                sn = cs * t
                for k in range(3):
                    vp = v[3 * k + p]
                    vq = v[3 * k + q]
                    v[3 * k + p] = cs * vp - sn * vq
                    v[3 * k + q] = sn * vp + cs * vq
        if off == 0.0:
            break
    cdef double lo = -1.0, hi = -1.0, s
    for p in range(3):
        s = sqrt(v[p] * v[p] + v[3 + p] * v[3 + p] + v[6 + p] * v[6 + p])
        if lo < 0.0 or s < lo: lo = s
        if s > hi: hi = s
    if lo <= 0.0:
        return -1.0
    return hi / lo


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z) and the SE(3) pieces the step needs.


cdef inline void _quat_multiply(const double* a, const double* b, double* out) noexcept nogil:
    out[0] = (a[0] * b[0] - a[1] * b[1]) - (a[2] * b[2] + a[3] * b[3])
    out[1] = (a[0] * b[1] + a[1] * b[0]) + (a[2] * b[3] - a[3] * b[2])
    out[2] = (a[0] * b[2] + a[2] * b[0]) + (a[3] * b[1] - a[1] * b[3])
    out[3] = (a[0] * b[3] + a[3] * b[0]) + (a[1] * b[2] - a[2] * b[1])


cdef inline void _quat_rotate(const double* q, const double* v, double* out) noexcept nogil:
    cdef double t[3]
    cdef double ct[3]
    t[0] = 2.0 * (q[2] * v[2] - q[3] * v[1])
    t[1] = 2.0 * (q[3] * v[0] - q[1] * v[2])
    t[2] = 2.0 * (q[1] * v[1] - q[2] * v[0])
    ct[0] = q[2] * t[2] - q[3] * t[1]
    ct[1] = q[3] * t[0] - q[1] * t[2]
    ct[2] = q[1] * t[1] - q[2] * t[0]
    out[0] = v[0] + q[0] * t[0] + ct[0]
    out[1] = v[1] + q[0] * t[1] + ct[1]
    out[2] = v[2] + q[0] * t[2] + ct[2]


cdef inline void _quat_rotate_conj(const double* q, const double* v, double* out) noexcept nogil:
    cdef double qc[4]
    qc[0] = q[0]
    qc[1] = -q[1]
    qc[2] = -q[2]
    qc[3] = -q[3]
    _quat_rotate(qc, v, out)


cdef inline void _quat_to_matrix(const double* q, double* r) noexcept nogil:
    cdef double w = q[0], x = q[1], y = q[2], z = q[3]
    r[0] = 1.0 - 2.0 * (y * y + z * z)
    r[1] = 2.0 * (x * y - w * z)
    r[2] = 2.0 * (x * z + w * y)
    r[3] = 2.0 * (x * y + w * z)
    r[4] = 1.0 - 2.0 * (x * x + z * z)
    r[5] = 2.0 * (y * z - w * x)
    r[6] = 2.0 * (x * z - w * y)
    r[7] = 2.0 * (y * z + w * x)
    r[8] = 1.0 - 2.0 * (x * x + y * y)


cdef void _exp_so3(const double* theta, double* q) noexcept nogil:
    cdef double angle = _norm3(theta)
    cdef double f, half
    if angle < _SMALL:
        f = 0.5 - angle * angle / 48.0
        q[0] = 1.0 - angle * angle / 8.0
        q[1] = f * theta[0]
        q[2] = f * theta[1]
        q[3] = f * theta[2]
        return
    half = 0.5 * angle
    f = sin(half) / angle
    q[0] = cos(half)
    q[1] = f * theta[0]
    q[2] = f * theta[1]
    q[3] = f * theta[2]


cdef void _jl_coeffs(double angle, double* a1, double* c) noexcept nogil:
    cdef double half, a2
    if angle < _SMALL:
        a1[0] = 0.5 - angle * angle / 24.0
        c[0] = 1.0 / 6.0 - angle * angle / 120.0
        return
    half = 0.5 * angle
    a1[0] = 2.0 * sin(half) * sin(half) / (angle * angle)
    if angle < _SERIES:
        a2 = angle * angle
        c[0] = 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0 - a2 * a2 * a2 / 362880.0
    else:
        c[0] = (angle - sin(angle)) / (angle * angle * angle)


cdef void _so3_left_jacobian(const double* theta, double* j) noexcept nogil:
    cdef double angle = _norm3(theta)
    cdef double a1, c
    cdef double s[9]
    cdef double ss[9]
    _jl_coeffs(angle, &a1, &c)
    _skew(theta, s)
    _mat3_mul(s, s, ss)
    cdef int i
    _eye3(j)
    for i in range(9):
        j[i] += a1 * s[i] + c * ss[i]


cdef void _coupling_coeffs(double angle, double* c1, double* m2, double* m3) noexcept nogil:
    cdef double a2 = angle * angle
    cdef double sa, ca
    if angle < _SERIES:
        c1[0] = 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0 - a2 * a2 * a2 / 362880.0
        m2[0] = -1.0 / 24.0 + a2 / 720.0 - a2 * a2 / 40320.0 + a2 * a2 * a2 / 3628800.0
        m3[0] = -1.0 / 120.0 + a2 / 5040.0 - a2 * a2 / 362880.0
        return
    sa = sin(angle)
    ca = cos(angle)
    c1[0] = (angle - sa) / (a2 * angle)
    m2[0] = (1.0 - 0.5 * a2 - ca) / (a2 * a2)
    m3[0] = (angle - sa - angle * a2 / 6.0) / (a2 * a2 * angle)


cdef void _se3_coupling(const double* rho, const double* theta, double* q) noexcept nogil:
    cdef double angle = _norm3(theta)
    cdef double c1, m2, m3
    _coupling_coeffs(angle, &c1, &m2, &m3)
    cdef double p[9]
    cdef double t[9]
    cdef double tp[9]
    cdef double pt[9]
    cdef double tpt[9]
    cdef double ttp[9]
    cdef double ptt[9]
    cdef double tptt[9]
    cdef double ttpt[9]
    _skew(rho, p)
    _skew(theta, t)
    _mat3_mul(t, p, tp)
    _mat3_mul(p, t, pt)
    _mat3_mul(tp, t, tpt)
    _mat3_mul(t, tp, ttp)
    _mat3_mul(pt, t, ptt)
    _mat3_mul(tpt, t, tptt)
    _mat3_mul(t, tpt, ttpt)
    cdef double c4 = -0.5 * (m2 - 3.0 * m3)
    cdef int i
    for i in range(9):
        q[i] = (0.5 * p[i]
                + c1 * (tp[i] + pt[i] + tpt[i])
                - m2 * (ttp[i] + ptt[i] - 3.0 * tpt[i])
                + c4 * (tptt[i] + ttpt[i]))


cdef void _se3_exp(const double* tau, double* dp, double* dq) noexcept nogil:
    cdef double jl[9]
    _so3_left_jacobian(tau + 3, jl)
    _mat3_vec(jl, tau, dp)
    _exp_so3(tau + 3, dq)


cdef void _se3_right_jacobian(const double* tau, double* jr) noexcept nogil:
    # Jr(tau) = Jl(-tau); 6x6 row-major.
    cdef double neg_rho[3]
    cdef double neg_theta[3]
    cdef double jl[9]
    cdef double q[9]
    cdef int i, j
    for i in range(3):
        neg_rho[i] = -tau[i]
        neg_theta[i] = -tau[3 + i]
    _so3_left_jacobian(neg_theta, jl)
    _se3_coupling(neg_rho, neg_theta, q)
    for i in range(36):
        jr[i] = 0.0
    for i in range(3):
        for j in range(3):
            jr[6 * i + j] = jl[3 * i + j]
            jr[6 * (3 + i) + 3 + j] = jl[3 * i + j]
            jr[6 * i + 3 + j] = q[3 * i + j]


cdef void _se3_adjoint_of_exp_neg(const double* xi, double* ad) noexcept nogil:
    # Adjoint of Exp(-xi), 6x6 row-major.
    cdef double neg[6]
    cdef double dp[3]
    cdef double dq[4]
    cdef double r[9]
    cdef double sp[9]
    cdef double spr[9]
    cdef int i, j
    for i in range(6):
        neg[i] = -xi[i]
    _se3_exp(neg, dp, dq)
    _quat_to_matrix(dq, r)
    _skew(dp, sp)
    _mat3_mul(sp, r, spr)
    for i in range(36):
        ad[i] = 0.0
    for i in range(3):
        for j in range(3):
            ad[6 * i + j] = r[3 * i + j]
            ad[6 * (3 + i) + 3 + j] = r[3 * i + j]
            ad[6 * i + 3 + j] = spr[3 * i + j]


# ---------------------------------------------------------------------------
# Packed robot constants (layout owned by centroidal._pack_params).


cdef struct LegC:
    double side
    double knee_sign
    double d_ab
    double l_thigh
    double l_shank
    double hip_offset[3]
    double limits[6]          # lo, hi per joint
    double link_mass[3]
    double link_com[9]        # 3 links x 3
    double link_inertia[27]   # 3 links x 9


cdef struct RobotC:
    double total_mass
    double gravity[3]
    double r_min
    double r_max
    double clamp_margin
    double base_mass
    double base_com[3]
    double base_inertia[9]
    LegC legs[4]


cdef void _unpack(const double* p, RobotC* rc) noexcept nogil:
    cdef int i, j, o, b
    rc.total_mass = p[0]
    for i in range(3):
        rc.gravity[i] = p[1 + i]
    rc.r_min = p[4]
    rc.r_max = p[5]
    rc.clamp_margin = p[6]
    rc.base_mass = p[7]
    for i in range(3):
        rc.base_com[i] = p[8 + i]
    for i in range(9):
        rc.base_inertia[i] = p[11 + i]
    cdef int k
    for i in range(4):
        o = 20 + 53 * i
        rc.legs[i].side = p[o]
        rc.legs[i].knee_sign = p[o + 1]
        rc.legs[i].d_ab = p[o + 2]
        rc.legs[i].l_thigh = p[o + 3]
        rc.legs[i].l_shank = p[o + 4]
        for j in range(3):
            rc.legs[i].hip_offset[j] = p[o + 5 + j]
        for j in range(6):
            rc.legs[i].limits[j] = p[o + 8 + j]
        for j in range(3):
            b = o + 14 + 13 * j
            rc.legs[i].link_mass[j] = p[b]
            rc.legs[i].link_com[3 * j] = p[b + 1]
            rc.legs[i].link_com[3 * j + 1] = p[b + 2]
            rc.legs[i].link_com[3 * j + 2] = p[b + 3]
            for k in range(9):
                rc.legs[i].link_inertia[9 * j + k] = p[b + 4 + k]


# ---------------------------------------------------------------------------
# Leg kinematics.


cdef inline void _rot_x(double a, double* r) noexcept nogil:
    cdef double c = cos(a), s = sin(a)
    r[0] = 1.0; r[1] = 0.0; r[2] = 0.0
    r[3] = 0.0; r[4] = c;   r[5] = -s
    r[6] = 0.0; r[7] = s;   r[8] = c


cdef inline void _rot_y(double a, double* r) noexcept nogil:
    cdef double c = cos(a), s = sin(a)
    r[0] = c;   r[1] = 0.0; r[2] = s
    r[3] = 0.0; r[4] = 1.0; r[5] = 0.0
    r[6] = -s;  r[7] = 0.0; r[8] = c


cdef void _leg_fk(const LegC* leg, const double* q, double* foot) noexcept nogil:
    cdef double ry2[9]
    cdef double ry3[9]
    cdef double rx[9]
    cdef double shank[3]
    cdef double planar[3]
    cdef double tmp[3]
    _rot_y(q[1], ry2)
    _rot_y(q[2], ry3)
    _rot_x(q[0], rx)
    tmp[0] = 0.0; tmp[1] = 0.0; tmp[2] = -leg.l_shank
    _mat3_vec(ry3, tmp, shank)
    shank[2] += -leg.l_thigh
    _mat3_vec(ry2, shank, planar)
    planar[1] += leg.side * leg.d_ab
    _mat3_vec(rx, planar, foot)


cdef void _leg_fk_jacobian(const LegC* leg, const double* q, double* j) noexcept nogil:
    cdef double rx[9]
    cdef double ry2[9]
    cdef double foot[3]
    cdef double ax23[3]
    cdef double o2[3]
    cdef double o3[3]
    cdef double rel[3]
    cdef double col[3]
    cdef double tmp[3]
    cdef int k
    _rot_x(q[0], rx)
    _leg_fk(leg, q, foot)
    ax23[0] = rx[1]; ax23[1] = rx[4]; ax23[2] = rx[7]  # Rx @ e_y
    tmp[0] = 0.0; tmp[1] = leg.side * leg.d_ab; tmp[2] = 0.0
    _mat3_vec(rx, tmp, o2)
    _rot_y(q[1], ry2)
    tmp[0] = 0.0; tmp[1] = 0.0; tmp[2] = -leg.l_thigh
    _mat3_vec(ry2, tmp, rel)
    _mat3_vec(rx, rel, tmp)
    for k in range(3):
        o3[k] = o2[k] + tmp[k]
    # column 0: e_x x foot
    col[0] = 0.0
    col[1] = -foot[2]
    col[2] = foot[1]
    j[0] = col[0]; j[3] = col[1]; j[6] = col[2]
    for k in range(3):
        rel[k] = foot[k] - o2[k]
    _cross(ax23, rel, col)
    j[1] = col[0]; j[4] = col[1]; j[7] = col[2]
    for k in range(3):
        rel[k] = foot[k] - o3[k]
    _cross(ax23, rel, col)
    j[2] = col[0]; j[5] = col[1]; j[8] = col[2]


cdef void _leg_ik(const LegC* leg, const double* target, double* q_out) noexcept nogil:
    # Targets arrive workspace-normalised, so the shell test always holds.
    cdef double x = target[0], y = target[1], z = target[2]
    cdef double rho = hypot(y, z)
    cdef double off = leg.side * leg.d_ab
    cdef double q1, wz, alpha, d_sq, c3, q3, s3, q2
    cdef int k
    if rho <= fabs(off):
        q1 = atan2(z, y) if rho > 0.0 else 0.0
        wz = 0.0
    else:
        c3 = off / rho
        if c3 > 1.0:
            c3 = 1.0
        elif c3 < -1.0:
            c3 = -1.0
        alpha = acos(c3)
        q1 = atan2(z, y) + alpha
        q1 = atan2(sin(q1), cos(q1))
        wz = -sin(q1) * y + cos(q1) * z
    d_sq = x * x + wz * wz
    c3 = (d_sq - leg.l_thigh * leg.l_thigh - leg.l_shank * leg.l_shank) / (
        2.0 * leg.l_thigh * leg.l_shank)
    if c3 > 1.0:
        c3 = 1.0
    elif c3 < -1.0:
        c3 = -1.0
    q3 = leg.knee_sign * acos(c3)
    s3 = sin(q3)
    c3 = cos(q3)
    q2 = atan2(-x, -wz) - atan2(leg.l_shank * s3, leg.l_thigh + leg.l_shank * c3)
    q_out[0] = q1
    q_out[1] = q2
    q_out[2] = q3
    for k in range(3):
        if q_out[k] < leg.limits[2 * k]:
            q_out[k] = leg.limits[2 * k]
        elif q_out[k] > leg.limits[2 * k + 1]:
            q_out[k] = leg.limits[2 * k + 1]


cdef void _normalise_workspace(const RobotC* rc, const double* target, double* out) noexcept nogil:
    cdef double lo = rc.r_min + rc.clamp_margin
    cdef double hi = rc.r_max - rc.clamp_margin
    cdef double r = _norm3(target)
    cdef double f
    if r < 1e-12:
        out[0] = 0.0
        out[1] = 0.0
        out[2] = -lo
        return
    if r < lo * (1.0 - _SHELL_SLACK):
        f = lo / r
    elif r > hi * (1.0 + _SHELL_SLACK):
        f = hi / r
    else:
        f = 1.0
    out[0] = f * target[0]
    out[1] = f * target[1]
    out[2] = f * target[2]


cdef void _normalise_workspace_jacobian(const RobotC* rc, const double* target, double* j) noexcept nogil:
    cdef double lo = rc.r_min + rc.clamp_margin
    cdef double hi = rc.r_max - rc.clamp_margin
    cdef double r = _norm3(target)
    cdef double bound, f
    cdef double u[3]
    cdef int a, b
    if r < 1e-12:
        for a in range(9):
            j[a] = 0.0
        return
    if lo * (1.0 - _SHELL_SLACK) <= r <= hi * (1.0 + _SHELL_SLACK):
        _eye3(j)
        return
    bound = lo if r < lo else hi
    f = bound / r
    u[0] = target[0] / r
    u[1] = target[1] / r
    u[2] = target[2] / r
    for a in range(3):
        for b in range(3):
            j[3 * a + b] = f * ((1.0 if a == b else 0.0) - u[a] * u[b])


cdef void _hip_targets(const RobotC* rc, const double* p, const double* q,
                       const double* feet, double* targets) noexcept nogil:
    cdef double rel[3]
    cdef int i, k
    for i in range(4):
        for k in range(3):
            rel[k] = feet[3 * i + k] - p[k]
        _quat_rotate_conj(q, rel, targets + 3 * i)
        for k in range(3):
            targets[3 * i + k] -= rc.legs[i].hip_offset[k]


cdef void _implicit_configuration(const RobotC* rc, const double* p, const double* q,
                                  const double* feet, double* q_cfg) noexcept nogil:
    cdef double targets[12]
    cdef double t_norm[3]
    cdef int i
    _hip_targets(rc, p, q, feet, targets)
    for i in range(4):
        _normalise_workspace(rc, targets + 3 * i, t_norm)
        _leg_ik(&rc.legs[i], t_norm, q_cfg + 3 * i)


cdef int _configuration_jacobian(const RobotC* rc, const double* p, const double* q,
                                 const double* feet, double* out,
                                 int* bad_leg, double* bad_cond) noexcept nogil:
    # out is (12, 24) row-major; zero rows for limit-clamped joints.
    cdef double r_t[9]
    cdef double r_mat[9]
    cdef double targets[12]
    cdef double t_norm[3]
    cdef double q_leg[3]
    cdef double j_fk[9]
    cdef double w_jac[9]
    cdef double c[9]
    cdef double sk_rb[9]
    cdef double tmp[9]
    cdef double r_b[3]
    cdef double cond
    cdef int i, a, b, row
    _quat_to_matrix(q, r_mat)
    for a in range(3):
        for b in range(3):
            r_t[3 * a + b] = r_mat[3 * b + a]
    _hip_targets(rc, p, q, feet, targets)
    for a in range(288):
        out[a] = 0.0
    for i in range(4):
        _normalise_workspace(rc, targets + 3 * i, t_norm)
        _leg_ik(&rc.legs[i], t_norm, q_leg)
        _leg_fk_jacobian(&rc.legs[i], q_leg, j_fk)
        cond = _svd3_condition(j_fk)
        if cond < 0.0 or cond > _COND_LIMIT:
            bad_leg[0] = i
            bad_cond[0] = cond
            return 1
        _normalise_workspace_jacobian(rc, targets + 3 * i, w_jac)
        if _solve3(j_fk, w_jac, c):
            bad_leg[0] = i
            bad_cond[0] = -1.0
            return 1
        for a in range(3):
            if (q_leg[a] <= rc.legs[i].limits[2 * a]
                    or q_leg[a] >= rc.legs[i].limits[2 * a + 1]):
                c[3 * a] = 0.0
                c[3 * a + 1] = 0.0
                c[3 * a + 2] = 0.0
        for a in range(3):
            r_b[a] = targets[3 * i + a] + rc.legs[i].hip_offset[a]
        _skew(r_b, sk_rb)
        _mat3_mul(c, sk_rb, tmp)
        for a in range(3):
            row = 24 * (3 * i + a)
            for b in range(3):
                out[row + b] = -c[3 * a + b]
                out[row + 3 + b] = tmp[3 * a + b]
        _mat3_mul(c, r_t, tmp)
        for a in range(3):
            row = 24 * (3 * i + a)
            for b in range(3):
                out[row + 12 + 3 * i + b] = tmp[3 * a + b]
    return 0


# ---------------------------------------------------------------------------
# Composite inertia about the instantaneous CoM, with derivatives.


cdef void _composite_inertia(const RobotC* rc, const double* q_cfg, int want_derivs,
                             double* inertia, double* com,
                             double* d_inertia, double* d_com) noexcept nogil:
    # d_inertia is (3, 3, 12) laid out [x][y][q]; d_com is (3, 12).
    cdef double masses[13]
    cdef double coms[39]
    cdef double rotated[117]
    cdef double dcoms[468]        # 13 x 3 x 12
    cdef double drot[1404]        # 13 x 9 x 12
    cdef double rx[9]
    cdef double r2[9]
    cdef double r3[9]
    cdef double ry[9]
    cdef double tmp3[3]
    cdef double tmp9[9]
    cdef double tmp9b[9]
    cdef double o_hip[3]
    cdef double o_hfe[3]
    cdef double o_kfe[3]
    cdef double axes[9]           # per-joint rotation axes, 3 x 3
    cdef double origins[9]
    cdef double a_vec[3]
    cdef double d_vec[3]
    cdef double s_ax[9]
    cdef const LegC* leg
    cdef const double* rcur
    cdef const double* ocur
    cdef double m_total, w
    cdef int i, jl, g, k, a, b, idx, col, base

    cdef int n_links = 13
    for i in range(468):
        dcoms[i] = 0.0
    for i in range(1404):
        drot[i] = 0.0

    masses[0] = rc.base_mass
    for k in range(3):
        coms[k] = rc.base_com[k]
    for k in range(9):
        rotated[k] = rc.base_inertia[k]

    for i in range(4):
        leg = &rc.legs[i]
        _rot_x(q_cfg[3 * i], rx)
        _rot_y(q_cfg[3 * i + 1], ry)
        _mat3_mul(rx, ry, r2)
        _rot_y(q_cfg[3 * i + 2], ry)
        _mat3_mul(r2, ry, r3)
        for k in range(3):
            o_hip[k] = leg.hip_offset[k]
        tmp3[0] = 0.0; tmp3[1] = leg.side * leg.d_ab; tmp3[2] = 0.0
        _mat3_vec(rx, tmp3, o_hfe)
        for k in range(3):
            o_hfe[k] += o_hip[k]
        tmp3[0] = 0.0; tmp3[1] = 0.0; tmp3[2] = -leg.l_thigh
        _mat3_vec(r2, tmp3, o_kfe)
        for k in range(3):
            o_kfe[k] += o_hfe[k]
        # joint axes in the base frame
        axes[0] = 1.0; axes[1] = 0.0; axes[2] = 0.0
        axes[3] = rx[1]; axes[4] = rx[4]; axes[5] = rx[7]
        axes[6] = axes[3]; axes[7] = axes[4]; axes[8] = axes[5]
        for k in range(3):
            origins[k] = o_hip[k]
            origins[3 + k] = o_hfe[k]
            origins[6 + k] = o_kfe[k]
        for jl in range(3):
            idx = 1 + 3 * i + jl
            masses[idx] = leg.link_mass[jl]
            if jl == 0:
                rcur = rx
                ocur = o_hip
            elif jl == 1:
                rcur = r2
                ocur = o_hfe
            else:
                rcur = r3
                ocur = o_kfe
            _mat3_vec(rcur, &leg.link_com[3 * jl], tmp3)
            for k in range(3):
                coms[3 * idx + k] = ocur[k] + tmp3[k]
            _mat3_mul(rcur, &leg.link_inertia[9 * jl], tmp9)
            _mat3_mul_t(tmp9, rcur, &rotated[9 * idx])
            if not want_derivs:
                continue
            for g in range(jl + 1):
                col = 3 * i + g
                for k in range(3):
                    a_vec[k] = axes[3 * g + k]
                    d_vec[k] = coms[3 * idx + k] - origins[3 * g + k]
                _cross(a_vec, d_vec, tmp3)
                base = 36 * idx
                for k in range(3):
                    dcoms[base + 12 * k + col] = tmp3[k]
                _skew(a_vec, s_ax)
                _mat3_mul(s_ax, &rotated[9 * idx], tmp9)
                _mat3_mul(&rotated[9 * idx], s_ax, tmp9b)
                base = 108 * idx
                for k in range(9):
                    drot[base + 12 * k + col] = tmp9[k] - tmp9b[k]

    m_total = 0.0
    for i in range(n_links):
        m_total += masses[i]
    for k in range(3):
        com[k] = 0.0
    for i in range(n_links):
        for k in range(3):
            com[k] += masses[i] * coms[3 * i + k]
    for k in range(3):
        com[k] /= m_total
    if want_derivs:
        for k in range(36):
            d_com[k] = 0.0
        for i in range(n_links):
            for k in range(3):
                for col in range(12):
                    d_com[12 * k + col] += masses[i] * dcoms[36 * i + 12 * k + col]
        for k in range(36):
            d_com[k] /= m_total

    cdef double d0, d1, d2, dsq
    cdef double dd[36]
    for k in range(9):
        inertia[k] = 0.0
    if want_derivs:
        for k in range(108):
            d_inertia[k] = 0.0
    for i in range(n_links):
        d0 = coms[3 * i] - com[0]
        d1 = coms[3 * i + 1] - com[1]
        d2 = coms[3 * i + 2] - com[2]
        dsq = d0 * d0 + d1 * d1 + d2 * d2
        w = masses[i]
        inertia[0] += rotated[9 * i] + w * (dsq - d0 * d0)
        inertia[1] += rotated[9 * i + 1] - w * d0 * d1
        inertia[2] += rotated[9 * i + 2] - w * d0 * d2
        inertia[3] += rotated[9 * i + 3] - w * d1 * d0
        inertia[4] += rotated[9 * i + 4] + w * (dsq - d1 * d1)
        inertia[5] += rotated[9 * i + 5] - w * d1 * d2
        inertia[6] += rotated[9 * i + 6] - w * d2 * d0
        inertia[7] += rotated[9 * i + 7] - w * d2 * d1
        inertia[8] += rotated[9 * i + 8] + w * (dsq - d2 * d2)
        if not want_derivs:
            continue
        for k in range(3):
            for col in range(12):
                dd[12 * k + col] = dcoms[36 * i + 12 * k + col] - d_com[12 * k + col]
        for col in range(12):
            w = 2.0 * (d0 * dd[col] + d1 * dd[12 + col] + d2 * dd[24 + col])
            d_inertia[col] += masses[i] * w
            d_inertia[12 * 4 + col] += masses[i] * w
            d_inertia[12 * 8 + col] += masses[i] * w
        for a in range(3):
            for b in range(3):
                base = 12 * (3 * a + b)
                d0 = coms[3 * i + a] - com[a]
                d1 = coms[3 * i + b] - com[b]
                for col in range(12):
                    d_inertia[base + col] += (
                        drot[108 * i + 12 * (3 * a + b) + col]
                        - masses[i] * (dd[12 * a + col] * d1 + d0 * dd[12 * b + col])
                    )


# ---------------------------------------------------------------------------
# World-frame balance terms shared by the step and its derivatives.


cdef struct TermsC:
    double r[9]
    double q_cfg[12]
    double inertia[9]
    double com[3]
    double d_inertia[108]
    double d_com[36]
    double i_w[9]
    double w_inv[9]
    double w_w[3]
    double l_w[3]
    double p_c[3]
    double arms[12]
    double f_tot[3]
    double a_vw[3]
    double a_ww[3]


cdef int _world_terms(const RobotC* rc, const double* xv, const double* uv,
                      int want_derivs, TermsC* t) noexcept nogil:
    cdef double tmp9[9]
    cdef double tau[3]
    cdef double cr[3]
    cdef int i, k
    _quat_to_matrix(xv + 3, t.r)
    _implicit_configuration(rc, xv, xv + 3, xv + 13, t.q_cfg)
    _composite_inertia(rc, t.q_cfg, want_derivs, t.inertia, t.com,
                       t.d_inertia, t.d_com)
    _mat3_mul(t.r, t.inertia, tmp9)
    _mat3_mul_t(tmp9, t.r, t.i_w)
    if _inv3(t.i_w, t.w_inv):
        return 1
    _mat3_vec(t.r, xv + 10, t.w_w)
    _mat3_vec(t.i_w, t.w_w, t.l_w)
    _mat3_vec(t.r, t.com, t.p_c)
    for k in range(3):
        t.p_c[k] += xv[k]
    for k in range(3):
        t.f_tot[k] = 0.0
        tau[k] = 0.0
    for i in range(4):
        for k in range(3):
            t.arms[3 * i + k] = xv[13 + 3 * i + k] - t.p_c[k]
        _cross(t.arms + 3 * i, uv + 6 * i, cr)
        for k in range(3):
            t.f_tot[k] += uv[6 * i + k]
            tau[k] += cr[k]
    _cross(t.w_w, t.l_w, cr)
    for k in range(3):
        tau[k] -= cr[k]
    for k in range(3):
        t.a_vw[k] = t.f_tot[k] / rc.total_mass + rc.gravity[k]
    _mat3_vec(t.w_inv, tau, t.a_ww)
    return 0


cdef void _project_base(const TermsC* t, const double* xv,
                        double* a_v, double* a_w) noexcept nogil:
    cdef double c[3]
    cdef double cr1[3]
    cdef double cr2[3]
    cdef int k
    _mat3_t_vec(t.r, t.a_ww, a_w)
    for k in range(3):
        c[k] = -t.com[k]
    _mat3_t_vec(t.r, t.a_vw, a_v)
    _cross(a_w, c, cr1)
    for k in range(3):
        a_v[k] += cr1[k]
    _cross(xv + 10, c, cr1)
    _cross(xv + 10, cr1, cr2)
    for k in range(3):
        a_v[k] += cr2[k]
    _cross(xv + 10, xv + 7, cr1)
    for k in range(3):
        a_v[k] -= cr1[k]


cdef int _step_core(const RobotC* rc, const double* xv, const double* uv,
                    double dt, double* out) noexcept nogil:
    cdef TermsC t
    cdef double a_v[3]
    cdef double a_w[3]
    cdef double delta6[6]
    cdef double dp[3]
    cdef double dq[4]
    cdef double rotated_dp[3]
    cdef int i, k
    if _world_terms(rc, xv, uv, 0, &t):
        return 1
    _project_base(&t, xv, a_v, a_w)
    for k in range(3):
        delta6[k] = dt * (xv[7 + k] + dt * a_v[k])     # dt * v_new
        delta6[3 + k] = dt * (xv[10 + k] + dt * a_w[k])  # dt * w_new
    _se3_exp(delta6, dp, dq)
    _quat_rotate(xv + 3, dp, rotated_dp)
    for k in range(3):
        out[k] = xv[k] + rotated_dp[k]
    _quat_multiply(xv + 3, dq, out + 3)
    for k in range(3):
        out[7 + k] = xv[7 + k] + dt * a_v[k]
        out[10 + k] = xv[10 + k] + dt * a_w[k]
    for i in range(4):
        for k in range(3):
            out[13 + 3 * i + k] = xv[13 + 3 * i + k] + dt * uv[6 * i + 3 + k]
    return 0


cdef int _derivatives_core(const RobotC* rc, const double* xv, const double* uv,
                           double dt, double* fx, double* fu,
                           int* bad_leg, double* bad_cond) noexcept nogil:
    cdef TermsC t
    cdef double j_q[288]          # (12, 24)
    cdef double dm[72]            # (3, 24)
    cdef double dm_q[36]          # (3, 12)
    cdef double da_w[72]
    cdef double da_v[72]
    cdef double dc[72]
    cdef double du_w[72]
    cdef double du_v[72]
    cdef double v_blk[144]        # (6, 24)
    cdef double u_blk[144]
    cdef double jr[36]
    cdef double ad[36]
    cdef double a_v[3]
    cdef double a_w[3]
    cdef double c[3]
    cdef double sk_f[9]
    cdef double sk_l[9]
    cdef double sk_ww[9]
    cdef double gyro[9]
    cdef double sk_com[9]
    cdef double sk_w[9]
    cdef double sk_c[9]
    cdef double sk_aw[9]
    cdef double curv[9]
    cdef double tmp9[9]
    cdef double tmp9b[9]
    cdef double tmp9c[9]
    cdef double tiw[108]
    cdef double tmp3[3]
    cdef double tmp3b[3]
    cdef double xi[6]
    cdef int i, k, a, b, col, row
    cdef double s

    if _world_terms(rc, xv, uv, 1, &t):
        return 2
    if _configuration_jacobian(rc, xv, xv + 3, xv + 13, j_q, bad_leg, bad_cond):
        return 1
    _project_base(&t, xv, a_v, a_w)
    for k in range(3):
        c[k] = -t.com[k]

    _skew(t.f_tot, sk_f)
    _skew(t.l_w, sk_l)
    _skew(t.w_w, sk_ww)
    # gyro = skew(L) - skew(w_W) I_W
    _mat3_mul(sk_ww, t.i_w, tmp9)
    for k in range(9):
        gyro[k] = sk_l[k] - tmp9[k]

    for k in range(72):
        dm[k] = 0.0
    # columns 0:3, base position
    _mat3_mul(sk_f, t.r, tmp9)
    for a in range(3):
        for b in range(3):
            dm[24 * a + b] = tmp9[3 * a + b]
    # columns 3:6, base rotation
    _skew(t.com, sk_com)
    _mat3_mul(t.r, sk_com, tmp9b)
    _mat3_mul(sk_f, tmp9b, tmp9)
    _skew(xv + 10, sk_w)
    _mat3_mul(t.r, sk_w, tmp9c)
    _mat3_mul(gyro, tmp9c, tmp9b)
    for a in range(3):
        for b in range(3):
            dm[24 * a + 3 + b] = -tmp9[3 * a + b] - tmp9b[3 * a + b]
    # inertia conjugation terms for the three rotation columns
    for k in range(3):
        # dIW = R (E_k I - I E_k) R^T
        tmp3[0] = 0.0; tmp3[1] = 0.0; tmp3[2] = 0.0
        tmp3[k] = 1.0
        _skew(tmp3, tmp9c)
        _mat3_mul(tmp9c, t.inertia, tmp9)
        _mat3_mul(t.inertia, tmp9c, tmp9b)
        for a in range(9):
            tmp9[a] -= tmp9b[a]
        _mat3_mul(t.r, tmp9, tmp9b)
        _mat3_mul_t(tmp9b, t.r, curv)
        _mat3_vec(curv, t.w_w, tmp3)
        _mat3_vec(sk_ww, tmp3, tmp3b)
        _mat3_vec(curv, t.a_ww, tmp3)
        for a in range(3):
            dm[24 * a + 3 + k] += -tmp3b[a] - tmp3[a]
    # columns 9:12, angular velocity
    _mat3_mul(gyro, t.r, tmp9)
    for a in range(3):
        for b in range(3):
            dm[24 * a + 9 + b] = tmp9[3 * a + b]
    # foothold columns
    for i in range(4):
        _skew(uv + 6 * i, tmp9)
        for a in range(3):
            for b in range(3):
                dm[24 * a + 12 + 3 * i + b] = -tmp9[3 * a + b]
    # configuration chain: TIW[:, :, j] = R dI_dq[:, :, j] R^T
    for col in range(12):
        for a in range(3):
            for b in range(3):
                tmp9[3 * a + b] = t.d_inertia[12 * (3 * a + b) + col]
        _mat3_mul(t.r, tmp9, tmp9b)
        _mat3_mul_t(tmp9b, t.r, tmp9c)
        for k in range(9):
            tiw[12 * k + col] = tmp9c[k]
    for col in range(12):
        for k in range(3):
            tmp3[k] = (t.d_com[col] * t.r[3 * k]
                       + t.d_com[12 + col] * t.r[3 * k + 1]
                       + t.d_com[24 + col] * t.r[3 * k + 2])
        _mat3_vec(sk_f, tmp3, tmp3b)
        for k in range(3):
            dm_q[12 * k + col] = tmp3b[k]
        for k in range(9):
            tmp9[k] = tiw[12 * k + col]
        _mat3_vec(tmp9, t.w_w, tmp3)
        _mat3_vec(sk_ww, tmp3, tmp3b)
        _mat3_vec(tmp9, t.a_ww, tmp3)
        for k in range(3):
            dm_q[12 * k + col] -= tmp3b[k] + tmp3[k]
    # DM += DM_q @ J_q
    for a in range(3):
        for b in range(24):
            s = 0.0
            for col in range(12):
                s += dm_q[12 * a + col] * j_q[24 * col + b]
            dm[24 * a + b] += s

    # Da_w = R^T (W DM); rotation columns pick up the frame ride-along.
    for b in range(24):
        for k in range(3):
            tmp3[k] = dm[24 * k + b]
        _mat3_vec(t.w_inv, tmp3, tmp3b)
        _mat3_t_vec(t.r, tmp3b, tmp3)
        for k in range(3):
            da_w[24 * k + b] = tmp3[k]
    _skew(a_w, sk_aw)
    for a in range(3):
        for b in range(3):
            da_w[24 * a + 3 + b] += sk_aw[3 * a + b]

    # Dc = -dcom_dq @ J_q
    for a in range(3):
        for b in range(24):
            s = 0.0
            for col in range(12):
                s += t.d_com[12 * a + col] * j_q[24 * col + b]
            dc[24 * a + b] = -s

    # Da_v = -skew(c) Da_w + (skew(a_w) + skew(w)^2) Dc + frame terms
    _skew(c, sk_c)
    _mat3_mul(sk_w, sk_w, tmp9)
    for k in range(9):
        curv[k] = sk_aw[k] + tmp9[k]
    cdef double tmp3c[3]
    for b in range(24):
        for k in range(3):
            tmp3[k] = da_w[24 * k + b]
        _mat3_vec(sk_c, tmp3, tmp3b)
        for k in range(3):
            tmp3[k] = dc[24 * k + b]
        _mat3_vec(curv, tmp3, tmp3c)
        for k in range(3):
            da_v[24 * k + b] = -tmp3b[k] + tmp3c[k]
    _mat3_t_vec(t.r, t.a_vw, tmp3)
    _skew(tmp3, tmp9)
    for a in range(3):
        for b in range(3):
            da_v[24 * a + 3 + b] += tmp9[3 * a + b]
    for a in range(3):
        for b in range(3):
            da_v[24 * a + 6 + b] -= sk_w[3 * a + b]
    # columns 9:12: skew(v_b) - skew(w x c) - skew(w) skew(c)
    _skew(xv + 7, tmp9)
    _cross(xv + 10, c, tmp3)
    _skew(tmp3, tmp9b)
    _mat3_mul(sk_w, sk_c, tmp9c)
    for a in range(3):
        for b in range(3):
            da_v[24 * a + 9 + b] += tmp9[3 * a + b] - tmp9b[3 * a + b] - tmp9c[3 * a + b]

    # Control side: only forces enter the accelerations.
    for k in range(72):
        du_w[k] = 0.0
        du_v[k] = 0.0
    for i in range(4):
        _skew(t.arms + 3 * i, tmp9)
        _mat3_mul(t.w_inv, tmp9, tmp9b)
        _mat3_t_mul(t.r, tmp9b, tmp9c)     # R^T W skew(arm_i)
        _mat3_mul(sk_c, tmp9c, tmp9)
        for a in range(3):
            for b in range(3):
                du_w[24 * a + 6 * i + b] = tmp9c[3 * a + b]
                du_v[24 * a + 6 * i + b] = -tmp9[3 * a + b] + t.r[3 * b + a] / rc.total_mass

    # Discrete composition through the group.
    for k in range(144):
        v_blk[k] = 0.0
        u_blk[k] = 0.0
    for b in range(24):
        for k in range(3):
            v_blk[24 * k + b] = dt * da_v[24 * k + b]
            v_blk[24 * (3 + k) + b] = dt * da_w[24 * k + b]
            u_blk[24 * k + b] = dt * du_v[24 * k + b]
            u_blk[24 * (3 + k) + b] = dt * du_w[24 * k + b]
    for k in range(3):
        v_blk[24 * k + 6 + k] += 1.0
        v_blk[24 * (3 + k) + 9 + k] += 1.0
    for k in range(3):
        xi[k] = dt * (xv[7 + k] + dt * a_v[k])
        xi[3 + k] = dt * (xv[10 + k] + dt * a_w[k])
    _se3_right_jacobian(xi, jr)
    _se3_adjoint_of_exp_neg(xi, ad)

    for k in range(576):
        fx[k] = 0.0
        fu[k] = 0.0
    for a in range(6):
        for b in range(6):
            fx[24 * a + b] = ad[6 * a + b]
    for a in range(6):
        for b in range(24):
            s = 0.0
            for k in range(6):
                s += jr[6 * a + k] * v_blk[24 * k + b]
            fx[24 * a + b] += dt * s
            s = 0.0
            for k in range(6):
                s += jr[6 * a + k] * u_blk[24 * k + b]
            fu[24 * a + b] = dt * s
    for a in range(6):
        for b in range(24):
            fx[24 * (6 + a) + b] = v_blk[24 * a + b]
            fu[24 * (6 + a) + b] = u_blk[24 * a + b]
    for k in range(12):
        fx[24 * (12 + k) + 12 + k] = 1.0
    for i in range(4):
        for k in range(3):
            fu[24 * (12 + 3 * i + k) + 6 * i + 3 + k] = dt
    return 0


def step(double[::1] packed, double[::1] xv, double[::1] uv, double dt):
    """Discrete step; returns the next state as a 25-vector."""
    cdef RobotC rc
    cdef double out[25]
    cdef int err
    with nogil:
        _unpack(&packed[0], &rc)
        err = _step_core(&rc, &xv[0], &uv[0], dt, out)
    if err:
        raise ArithmeticError("singular world inertia")
    result = np.empty(25)
    cdef double[::1] rv = result
    cdef int k
    for k in range(25):
        rv[k] = out[k]
    return result


def step_derivatives(double[::1] packed, double[::1] xv, double[::1] uv, double dt):
    """Tangent-space Jacobians of `step`; returns (fx, fu) as (24, 24) arrays."""
    cdef RobotC rc
    cdef int err, bad_leg = -1
    cdef double bad_cond = 0.0
    fx = np.empty((24, 24))
    fu = np.empty((24, 24))
    cdef double[:, ::1] fxv = fx
    cdef double[:, ::1] fuv = fu
    with nogil:
        _unpack(&packed[0], &rc)
        err = _derivatives_core(&rc, &xv[0], &uv[0], dt,
                                &fxv[0, 0], &fuv[0, 0], &bad_leg, &bad_cond)
    if err == 1:
        raise SingularJacobianError(
            f"leg {LEG_NAMES[bad_leg]}: FK Jacobian condition {bad_cond:.2e}"
        )
    if err:
        raise ArithmeticError("singular world inertia")
    return fx, fu
