"""State manifold of a floating base with four world-frame footholds.

A state lives on SE(3) x R^18: base pose (position + unit quaternion),
body-frame linear and angular velocity, and four foothold positions in the
world frame.  Tangent vectors are 24-dimensional and laid out as

    [dp (3), dtheta (3), dv (3), domega (3), dfeet (12)]

with the pose block expressed in the body frame (right perturbations,
``x * Exp(tau)``).  The pose is treated as a full SE(3) element, so the
position and orientation blocks of the pose tangent couple through the SE(3)
exponential, not componentwise.

Quaternions are stored (w, x, y, z) with w >= 0; the two antipodal
representations of a rotation are collapsed on construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NX = 25
NT = 24

# Tangent-vector blocks.
POS = slice(0, 3)
ROT = slice(3, 6)
LIN = slice(6, 9)
ANG = slice(9, 12)
FEET = slice(12, 24)

LEG_NAMES = ("lf", "lh", "rf", "rh")

_SMALL = 1e-8
# Cancellation-prone scalar coefficients switch to series well before the
# formulas hit 0/0; the series carry enough terms to stay below 1e-13 there.
_SERIES = 0.1


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z), Hamilton convention.


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    # Grouped so that conj(q) * q cancels exactly in floating point.
    return np.array(
        [
            (aw * bw - ax * bx) - (ay * by + az * bz),
            (aw * bx + ax * bw) + (ay * bz - az * by),
            (aw * by + ay * bw) + (az * bx - ax * bz),
            (aw * bz + az * bw) + (ax * by - ay * bx),
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply the rotation R(q) to a 3-vector."""
    w = q[0]
    u = q[1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def exp_so3(theta: np.ndarray) -> np.ndarray:
    """Rotation-vector exponential, returned as a unit quaternion."""
    theta = np.asarray(theta, dtype=float)
    angle = float(np.linalg.norm(theta))
    if angle < _SMALL:
        # sin(a/2)/a = 1/2 - a^2/48 + ...
        f = 0.5 - angle * angle / 48.0
        return np.array([1.0 - angle * angle / 8.0, *(f * theta)])
    half = 0.5 * angle
    return np.array([np.cos(half), *(np.sin(half) / angle * theta)])


def log_so3(q: np.ndarray) -> np.ndarray:
    """Principal-branch rotation vector of a unit quaternion (norm <= pi)."""
    w = float(q[0])
    v = np.asarray(q[1:], dtype=float)
    s = float(np.linalg.norm(v))
    if w < 0.0:
        w, v = -w, -v
    if s < _SMALL:
        # atan2(s, w)/s = 1/w - s^2/(3 w^3) + ...
        return (2.0 / w - 2.0 * s * s / (3.0 * w**3)) * v
    return (2.0 * np.arctan2(s, w) / s) * v


# ---------------------------------------------------------------------------
# SO(3) left Jacobian and its inverse.


def _jl_coeffs(angle: float) -> tuple[float, float]:
    """(1-cos a)/a^2 and (a-sin a)/a^3, cancellation-free."""
    if angle < _SMALL:
        return 0.5 - angle * angle / 24.0, 1.0 / 6.0 - angle * angle / 120.0
    half = 0.5 * angle
    a1 = 2.0 * np.sin(half) ** 2 / (angle * angle)
    if angle < _SERIES:
        a2 = angle * angle
        c = 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0 - a2 * a2 * a2 / 362880.0
    else:
        c = (angle - np.sin(angle)) / angle**3
    return a1, c


def _jl_inv_coeff(angle: float) -> float:
    """b(a) with Jl^-1 = I - skew/2 + b * skew^2; b = 1/a^2 - cot(a/2)/(2a)."""
    if angle < _SERIES:
        a2 = angle * angle
        return (
            1.0 / 12.0
            + a2 / 720.0
            + a2 * a2 / 30240.0
            + a2 * a2 * a2 / 1209600.0
        )
    half = 0.5 * angle
    return 1.0 / (angle * angle) - np.cos(half) / (2.0 * angle * np.sin(half))


def _jl_inv_coeff_prime_over(angle: float) -> float:
    """b'(a)/a, regular at a = 0."""
    if angle < _SERIES:
        a2 = angle * angle
        return 1.0 / 360.0 + a2 / 7560.0 + a2 * a2 / 201600.0
    half = 0.5 * angle
    cot = np.cos(half) / np.sin(half)
    bp = -2.0 / angle**3 + (angle * (1.0 + cot * cot) + 2.0 * cot) / (
        4.0 * angle * angle
    )
    return bp / angle


def so3_left_jacobian(theta: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(theta))
    a1, a2 = _jl_coeffs(angle)
    s = skew(theta)
    return np.eye(3) + a1 * s + a2 * (s @ s)


def so3_left_jacobian_inv(theta: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(theta))
    b = _jl_inv_coeff(angle)
    s = skew(theta)
    return np.eye(3) - 0.5 * s + b * (s @ s)


def so3_left_jacobian_inv_dtheta(theta: np.ndarray) -> np.ndarray:
    """d(Jl^-1)/dtheta_k stacked over k, shape (3, 3, 3)."""
    angle = float(np.linalg.norm(theta))
    b = _jl_inv_coeff(angle)
    bp_over = _jl_inv_coeff_prime_over(angle)
    s = skew(theta)
    ss = s @ s
    out = np.empty((3, 3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        ek = skew(e)
        out[:, :, k] = -0.5 * ek + (bp_over * theta[k]) * ss + b * (ek @ s + s @ ek)
    return out


# ---------------------------------------------------------------------------
# SE(3): tau = (rho, theta), Exp(tau) = (Jl(theta) rho, Exp(theta)).


def _coupling_coeffs(angle: float) -> tuple[float, float, float]:
    """c1 = (a-sin a)/a^3, m2 = (1-a^2/2-cos a)/a^4, m3 = (a-sin a-a^3/6)/a^5."""
    a2 = angle * angle
    if angle < _SERIES:
        c1 = 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0 - a2 * a2 * a2 / 362880.0
        m2 = -1.0 / 24.0 + a2 / 720.0 - a2 * a2 / 40320.0 + a2 * a2 * a2 / 3628800.0
        m3 = -1.0 / 120.0 + a2 / 5040.0 - a2 * a2 / 362880.0
        return c1, m2, m3
    sa, ca = np.sin(angle), np.cos(angle)
    c1 = (angle - sa) / angle**3
    m2 = (1.0 - 0.5 * a2 - ca) / angle**4
    m3 = (angle - sa - angle * a2 / 6.0) / angle**5
    return c1, m2, m3


def _coupling_coeffs_prime_over(angle: float) -> tuple[float, float, float]:
    """(c1'/a, m2'/a, m3'/a), regular at a = 0."""
    a2 = angle * angle
    if angle < _SERIES:
        c1p = -1.0 / 60.0 + a2 / 1260.0 - a2 * a2 / 60480.0
        m2p = 1.0 / 360.0 - a2 / 10080.0 + a2 * a2 / 604800.0
        m3p = 1.0 / 2520.0 - a2 / 90720.0
        return c1p, m2p, m3p
    c1, m2, m3 = _coupling_coeffs(angle)
    ca = np.cos(angle)
    c1p = ((1.0 - ca) / angle**3 - 3.0 * c1 / angle) / angle
    m2p = (-(angle - np.sin(angle)) / angle**4 - 4.0 * m2 / angle) / angle
    m3p = ((m2 - 5.0 * m3) / angle) / angle
    return c1p, m2p, m3p


def se3_coupling(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Off-diagonal block Q(rho, theta) of the SE(3) left Jacobian."""
    angle = float(np.linalg.norm(theta))
    c1, m2, m3 = _coupling_coeffs(angle)
    P = skew(rho)
    T = skew(theta)
    TP = T @ P
    PT = P @ T
    TPT = TP @ T
    return (
        0.5 * P
        + c1 * (TP + PT + TPT)
        - m2 * (T @ TP + PT @ T - 3.0 * TPT)
        - 0.5 * (m2 - 3.0 * m3) * (TPT @ T + T @ TPT)
    )


def se3_coupling_dtheta(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """dQ/dtheta_k stacked over k, shape (3, 3, 3)."""
    angle = float(np.linalg.norm(theta))
    c1, m2, m3 = _coupling_coeffs(angle)
    c1p, m2p, m3p = _coupling_coeffs_prime_over(angle)
    c4 = -0.5 * (m2 - 3.0 * m3)
    c4p = -0.5 * (m2p - 3.0 * m3p)
    P = skew(rho)
    T = skew(theta)
    TP = T @ P
    PT = P @ T
    TT = T @ T
    TPT = TP @ T
    G1 = TP + PT + TPT
    G2 = TT @ P + PT @ T - 3.0 * TPT
    G3 = TPT @ T + T @ TPT
    out = np.empty((3, 3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        E = skew(e)
        EP = E @ P
        PE = P @ E
        dG1 = EP + PE + EP @ T + T @ PE
        dG2 = (E @ T + T @ E) @ P + P @ (E @ T + T @ E) - 3.0 * (EP @ T + T @ PE)
        dG3 = (
            EP @ TT
            + T @ PE @ T
            + TP @ T @ E
            + E @ TP @ T
            + T @ EP @ T
            + TT @ PE
        )
        out[:, :, k] = (
            (c1p * theta[k]) * G1
            + c1 * dG1
            - (m2p * theta[k]) * G2
            - m2 * dG2
            + (c4p * theta[k]) * G3
            + c4 * dG3
        )
    return out


def se3_exp(tau: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exponential of a 6-vector (rho, theta) -> (translation, quaternion)."""
    rho = tau[:3]
    theta = tau[3:]
    return so3_left_jacobian(theta) @ rho, exp_so3(theta)


def se3_log(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    theta = log_so3(q)
    rho = so3_left_jacobian_inv(theta) @ p
    return np.concatenate([rho, theta])


def se3_left_jacobian_inv(tau: np.ndarray) -> np.ndarray:
    A = so3_left_jacobian_inv(tau[3:])
    Q = se3_coupling(tau[:3], tau[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = A
    out[3:, 3:] = A
    out[:3, 3:] = -A @ Q @ A
    return out


def se3_left_jacobian_inv_dtau(tau: np.ndarray) -> np.ndarray:
    """d(Jl^-1)/dtau_m stacked over m, shape (6, 6, 6)."""
    rho, theta = tau[:3], tau[3:]
    A = so3_left_jacobian_inv(theta)
    Q = se3_coupling(rho, theta)
    dA = so3_left_jacobian_inv_dtheta(theta)
    dQth = se3_coupling_dtheta(rho, theta)
    out = np.zeros((6, 6, 6))
    for m in range(3):
        e = np.zeros(3)
        e[m] = 1.0
        dQ = se3_coupling(e, theta)  # Q is linear in rho
        out[:3, 3:, m] = -A @ dQ @ A
    for k in range(3):
        dAk = dA[:, :, k]
        out[:3, :3, 3 + k] = dAk
        out[3:, 3:, 3 + k] = dAk
        out[:3, 3:, 3 + k] = -(dAk @ Q @ A + A @ dQth[:, :, k] @ A + A @ Q @ dAk)
    return out


def se3_right_jacobian(tau: np.ndarray) -> np.ndarray:
    """Jr(tau) = Jl(-tau)."""
    theta = -tau[3:]
    Jl = so3_left_jacobian(theta)
    Q = se3_coupling(-tau[:3], theta)
    out = np.zeros((6, 6))
    out[:3, :3] = Jl
    out[3:, 3:] = Jl
    out[:3, 3:] = Q
    return out


def se3_adjoint(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    R = quat_to_matrix(q)
    out = np.zeros((6, 6))
    out[:3, :3] = R
    out[3:, 3:] = R
    out[:3, 3:] = skew(p) @ R
    return out


# ---------------------------------------------------------------------------
# State container.


@dataclass(frozen=True, eq=False)
class Pose:
    """Base pose; the quaternion is normalised and flipped to w >= 0."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.p, dtype=float).reshape(3).copy()
        q = np.asarray(self.q, dtype=float).reshape(4).copy()
        q /= np.linalg.norm(q)
        if q[0] < 0.0:
            q = -q
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def compose(self, dp: np.ndarray, dq: np.ndarray) -> "Pose":
        return Pose(self.p + quat_rotate(self.q, dp), quat_multiply(self.q, dq))


@dataclass(frozen=True, eq=False)
class State:
    """Full planner state: base pose, body twist and world footholds."""

    pose: Pose
    v_b: np.ndarray
    omega: np.ndarray
    feet: np.ndarray  # (4, 3), legs ordered LF, LH, RF, RH

    def __post_init__(self) -> None:
        object.__setattr__(self, "v_b", np.asarray(self.v_b, dtype=float).reshape(3).copy())
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3).copy())
        object.__setattr__(self, "feet", np.asarray(self.feet, dtype=float).reshape(4, 3).copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.pose.p, self.pose.q, self.v_b, self.omega, self.feet.ravel()]
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "State":
        vec = np.asarray(vec, dtype=float).reshape(NX)
        return cls(
            Pose(vec[0:3], vec[3:7]),
            vec[7:10],
            vec[10:13],
            vec[13:25].reshape(4, 3),
        )


def integrate(x: State, dx: np.ndarray) -> State:
    """x (+) dx through the SE(3) exponential; Euclidean blocks add."""
    dx = np.asarray(dx, dtype=float).reshape(NT)
    dp, dq = se3_exp(dx[0:6])
    return State(
        x.pose.compose(dp, dq),
        x.v_b + dx[LIN],
        x.omega + dx[ANG],
        x.feet + dx[FEET].reshape(4, 3),
    )


def difference(x_ref: State, x: State) -> np.ndarray:
    """x_ref (-) x, a tangent vector at x (Log of the relative pose)."""
    out = np.empty(NT)
    q_rel = quat_multiply(quat_conjugate(x.pose.q), x_ref.pose.q)
    p_rel = quat_rotate(quat_conjugate(x.pose.q), x_ref.pose.p - x.pose.p)
    out[0:6] = se3_log(p_rel, q_rel)
    out[LIN] = x_ref.v_b - x.v_b
    out[ANG] = x_ref.omega - x.omega
    out[FEET] = (x_ref.feet - x.feet).ravel()
    return out


def difference_jacobian(x_ref: State, x: State) -> np.ndarray:
    """Derivative of difference(x_ref, x) with respect to x.

    The SE(3) block is -Jl^-1 of the relative pose tangent; every Euclidean
    block is -I.
    """
    tau = difference(x_ref, x)[0:6]
    out = -np.eye(NT)
    out[0:6, 0:6] = -se3_left_jacobian_inv(tau)
    return out


class DifferenceHessian:
    """Second derivative of the difference operator with respect to x.

    Only the SE(3) pose block is non-zero; it is kept as six dense 6x6
    slices indexed by the perturbation direction.  ``dense()`` expands the
    full (24, 24, 24) tensor, ``contract(w)`` returns sum_i w_i H[i, :, :].
    """

    __slots__ = ("se3",)

    def __init__(self, se3_block: np.ndarray):
        self.se3 = se3_block  # (6, 6, 6), indices [i, j, k]

    def contract(self, w: np.ndarray) -> np.ndarray:
        out = np.zeros((NT, NT))
        out[0:6, 0:6] = np.einsum("i,ijk->jk", w[0:6], self.se3)
        return out

    def dense(self) -> np.ndarray:
        out = np.zeros((NT, NT, NT))
        out[0:6, 0:6, 0:6] = self.se3
        return out


def difference_hessian(x_ref: State, x: State) -> DifferenceHessian:
    """Derivative of difference_jacobian along tangent perturbations of x.

    Chain rule through the relative pose tangent: the slice in direction k is
    sum_m d(-Jl^-1)/dtau_m * (dtau/dx)[m, k] with dtau/dx = -Jl^-1.
    """
    tau = difference(x_ref, x)[0:6]
    Jinv = se3_left_jacobian_inv(tau)
    dJinv = se3_left_jacobian_inv_dtau(tau)  # (6,6,6) over m
    # H[i, j, k] = sum_m dJinv[i, j, m] * Jinv[m, k]
    block = np.einsum("ijm,mk->ijk", dJinv, Jinv)
    return DifferenceHessian(block)
