"""Running-cost terms of the planner and their tangent-space derivatives.

Four ingredients per knot: a manifold quadratic pulling the state towards a
reference, a Euclidean quadratic on the controls, a reachability barrier on
the hip-to-foot distance, and a friction-pyramid penalty on stance forces.
Hessians are exact: the state quadratic carries the curvature of the
difference operator, the barrier the curvature of its radial residual, and
the friction term is Gauss-Newton, which is already exact because its
residuals are linear in the force.

All quadratics follow the 1/2 r' W r convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .centroidal import Control, FORCE_COLS, NU
from .manifold import (
    NT,
    State,
    difference,
    difference_hessian,
    difference_jacobian,
    skew,
)
from .robot import RobotParams

__all__ = [
    "CostWeights",
    "CostEval",
    "state_cost",
    "control_cost",
    "kinematic_barrier",
    "friction_penalty",
    "total_cost",
]


@dataclass(frozen=True, eq=False)
class CostWeights:
    """Diagonal weights plus the penalty scales for one phase."""

    Q: np.ndarray   # (24,) state
    R: np.ndarray   # (24,) control
    w_kin: float
    w_fr: float
    mu: float

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float).reshape(NT)
        R = np.asarray(self.R, dtype=float).reshape(NU)
        if np.any(Q < 0.0) or np.any(R < 0.0):
            raise ValueError("state and control weights must be non-negative")
        if self.w_kin < 0.0 or self.w_fr < 0.0:
            raise ValueError("penalty weights must be non-negative")
        if self.mu <= 0.0:
            raise ValueError("friction coefficient must be positive")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)


@dataclass(frozen=True, eq=False)
class CostEval:
    value: float
    l_x: np.ndarray   # (24,)
    l_u: np.ndarray   # (24,)
    l_xx: np.ndarray  # (24, 24)
    l_uu: np.ndarray  # (24, 24)
    l_xu: np.ndarray  # (24, 24), zero for every term here


def state_cost(x_ref: State, x: State, Q: np.ndarray, curvature: bool = True):
    """1/2 ||x_ref (-) x||^2_Q with gradient and Hessian.

    The Hessian is J' diag(Q) J plus the residual-weighted curvature of the
    difference operator; `curvature=False` drops the second term and leaves
    plain Gauss-Newton, which is measurably wrong for large rotation
    residuals.
    """
    r = difference(x_ref, x)
    J = difference_jacobian(x_ref, x)
    Qr = Q * r
    value = 0.5 * float(r @ Qr)
    l_x = J.T @ Qr
    l_xx = J.T @ (Q[:, None] * J)
    if curvature:
        l_xx = l_xx + difference_hessian(x_ref, x).contract(Qr)
    return value, l_x, l_xx


def control_cost(u_ref: Control, u: Control, R: np.ndarray):
    """1/2 ||u_ref - u||^2_R, plain Euclidean."""
    e = u.as_vector() - u_ref.as_vector()
    Re = R * e
    return 0.5 * float(e @ Re), Re, np.diag(R)


def _hip_vectors(params: RobotParams, x: State):
    """Hip-frame foot vectors y_i and their tangent Jacobians, per leg."""
    R = x.pose.rotation()
    ys = np.empty((4, 3))
    Js = np.zeros((4, 3, NT))
    for i, leg in enumerate(params.legs):
        y = R.T @ (x.feet[i] - x.pose.p)
        ys[i] = y - leg.hip_offset
        Js[i, :, 0:3] = -np.eye(3)
        Js[i, :, 3:6] = skew(y)
        Js[i, :, 12 + 3 * i : 15 + 3 * i] = R.T
    return ys, Js


def kinematic_barrier(params: RobotParams, x: State, w_kin: float):
    """Quadratic barrier on the hip-to-foot distance leaving the shell.

    The shell is shrunk by the configured soft margin so the penalty engages
    before the hard workspace clamp does.  The Hessian keeps the curvature
    of the active radial residuals (direction change of the unit vector plus
    the chart derivative of the gradient row), so it matches finite
    differences away from the activation kink.
    """
    ws = params.workspace
    hi = ws.r_max - ws.barrier_margin
    lo = ws.r_min + ws.barrier_margin
    value = 0.0
    l_x = np.zeros(NT)
    l_xx = np.zeros((NT, NT))
    if w_kin == 0.0:
        return value, l_x, l_xx
    ys, Js = _hip_vectors(params, x)
    R = x.pose.rotation()
    for i in range(4):
        d = float(np.linalg.norm(ys[i]))
        if d > hi:
            s, sign = d - hi, 1.0
        elif d < lo:
            s, sign = lo - d, -1.0
        else:
            continue
        dh = ys[i] / d
        row = sign * dh @ Js[i]  # d s / d x
        value += 0.5 * w_kin * s * s
        l_x += w_kin * s * row
        sk = skew(dh)
        N = np.zeros((NT, NT))
        N[3:6, :] = sk @ Js[i]
        N[12 + 3 * i : 15 + 3 * i, 3:6] = -R @ sk
        curv = Js[i].T @ ((np.eye(3) - np.outer(dh, dh)) / d) @ Js[i] + N
        l_xx += w_kin * (np.outer(row, row) + s * sign * curv)
    return value, l_x, l_xx


# Pyramid facet normals in force space: the four tangential facets of the
# outer linearisation plus the unilateral floor.
_FACETS = np.array(
    [
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 0.0],
    ]
)


def friction_penalty(x: State, u: Control, stance, mu: float, w_fr: float):
    """Penalty on stance forces outside the flat-ground friction pyramid.

    Residuals per stance leg: F_x - mu F_z, -F_x - mu F_z, F_y - mu F_z,
    -F_y - mu F_z, and -F_z.  Linear in the force, so Gauss-Newton is the
    exact Hessian.
    """
    value = 0.0
    l_u = np.zeros(NU)
    l_uu = np.zeros((NU, NU))
    if w_fr == 0.0:
        return value, l_u, l_uu
    rows = _FACETS.copy()
    rows[:4, 2] = -mu
    rows[4, 2] = -1.0
    for i in range(4):
        if not stance[i]:
            continue
        c = rows @ u.forces[i]
        active = c > 0.0
        if not np.any(active):
            continue
        cols = FORCE_COLS[i]
        act = rows[active]
        value += 0.5 * w_fr * float(c[active] @ c[active])
        l_u[cols] += w_fr * (c[active] @ act)
        l_uu[cols, cols] += w_fr * (act.T @ act)
    return value, l_u, l_uu


def total_cost(
    params: RobotParams,
    weights: CostWeights,
    x_ref: State,
    u_ref: Control,
    stance,
    x: State,
    u: Control,
    curvature: bool = True,
) -> CostEval:
    """Sum of the four terms for one knot; no state-control cross coupling."""
    value, l_x, l_xx = state_cost(x_ref, x, weights.Q, curvature)
    cv, l_u, l_uu = control_cost(u_ref, u, weights.R)
    value += cv
    kv, k_x, k_xx = kinematic_barrier(params, x, weights.w_kin)
    value += kv
    l_x = l_x + k_x
    l_xx = l_xx + k_xx
    fv, f_u, f_uu = friction_penalty(x, u, stance, weights.mu, weights.w_fr)
    value += fv
    l_u = l_u + f_u
    l_uu = l_uu + f_uu
    return CostEval(value, l_x, l_u, l_xx, l_uu, np.zeros((NT, NU)))
