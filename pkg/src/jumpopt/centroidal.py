"""Lumped rigid-body dynamics of the quadruped and its discrete integration.

The robot is treated as a single rigid body whose inertia and centre of
mass track the leg configuration implied by the state.  Contact forces act
at the footholds in world frame; foothold velocities are direct inputs.
One integration step updates the velocities first and then moves the pose
with the updated twist, so free fall reduces to an exact discrete parabola.

`step_derivatives` returns exact tangent-space Jacobians of `step`: the
acceleration derivatives (force arms, gyroscopic terms, inertia
conjugation, configuration chain) composed with the group-level
derivatives of the pose update.  A compiled twin of the two hot kernels
can be selected through `set_backend` when the extension is built.
"""

from __future__ import annotations

import os
import weakref
from dataclasses import dataclass

import numpy as np

from .manifold import (
    ANG,
    FEET,
    LIN,
    NT,
    State,
    integrate,
    se3_adjoint,
    se3_exp,
    se3_right_jacobian,
    skew,
)
from .robot import (
    InertiaResult,
    RobotParams,
    composite_inertia,
    configuration_jacobian,
    implicit_configuration,
)

NU = 24

# Control vector layout: per leg [F (3), rdot (3)], legs in LF, LH, RF, RH order.
FORCE_COLS = tuple(slice(6 * i, 6 * i + 3) for i in range(4))
RATE_COLS = tuple(slice(6 * i + 3, 6 * i + 6) for i in range(4))

_E = tuple(skew(e) for e in np.eye(3))


@dataclass(frozen=True, eq=False)
class Control:
    """World-frame contact forces and foothold velocities, one row per leg."""

    forces: np.ndarray      # (4, 3) N
    foot_rates: np.ndarray  # (4, 3) m/s

    def __post_init__(self):
        object.__setattr__(self, "forces", np.asarray(self.forces, dtype=float).reshape(4, 3))
        object.__setattr__(self, "foot_rates", np.asarray(self.foot_rates, dtype=float).reshape(4, 3))

    def as_vector(self) -> np.ndarray:
        return np.hstack([self.forces, self.foot_rates]).ravel()

    @staticmethod
    def from_vector(u: np.ndarray) -> "Control":
        u = np.asarray(u, dtype=float).reshape(4, 6)
        return Control(u[:, :3].copy(), u[:, 3:].copy())

    @staticmethod
    def zero() -> "Control":
        return Control(np.zeros((4, 3)), np.zeros((4, 3)))


@dataclass(frozen=True, eq=False)
class DynamicsDerivatives:
    fx: np.ndarray  # (24, 24) tangent-space
    fu: np.ndarray  # (24, 24)


# ---------------------------------------------------------------------------
# Equations of motion.


@dataclass(frozen=True, eq=False)
class _Terms:
    """Shared intermediates of the world-frame balance equations."""

    R: np.ndarray
    q_cfg: np.ndarray
    body: InertiaResult
    I_W: np.ndarray
    W: np.ndarray       # inverse of I_W
    w_W: np.ndarray     # world angular velocity
    L_W: np.ndarray     # angular momentum about the CoM
    p_c: np.ndarray     # world CoM
    arms: np.ndarray    # (4, 3) foothold minus CoM
    F_tot: np.ndarray
    a_vW: np.ndarray    # CoM linear acceleration, world
    a_wW: np.ndarray    # angular acceleration, world


def _world_terms(params: RobotParams, x: State, forces: np.ndarray) -> _Terms:
    R = x.pose.rotation()
    q_cfg = implicit_configuration(params, x)
    body = composite_inertia(params, q_cfg)
    I_W = R @ body.inertia @ R.T
    W = np.linalg.inv(I_W)
    w_W = R @ x.omega
    L_W = I_W @ w_W
    p_c = x.pose.p + R @ body.com
    arms = x.feet - p_c
    F_tot = forces.sum(axis=0)
    tau = np.cross(arms, forces).sum(axis=0) - np.cross(w_W, L_W)
    a_vW = F_tot / params.total_mass + params.gravity
    a_wW = W @ tau
    return _Terms(R, q_cfg, body, I_W, W, w_W, L_W, p_c, arms, F_tot, a_vW, a_wW)


def world_accelerations(params: RobotParams, x: State, u: Control):
    """CoM linear and angular acceleration in the world frame."""
    t = _world_terms(params, x, u.forces)
    return t.a_vW, t.a_wW


def _project_base(t: _Terms, x: State):
    """Base accelerations in body frame from the world CoM accelerations.

    Exact time derivative of p_com = p + R c for a frozen leg configuration;
    the configuration-rate terms are dropped.
    """
    a_w = t.R.T @ t.a_wW
    c = -t.body.com
    w = x.omega
    a_v = (
        t.R.T @ t.a_vW
        + np.cross(a_w, c)
        + np.cross(w, np.cross(w, c))
        - np.cross(w, x.v_b)
    )
    return a_v, a_w


def continuous_dynamics(params: RobotParams, x: State, u: Control) -> np.ndarray:
    """State rate as a 24-vector: base twist, base accelerations, foot rates."""
    t = _world_terms(params, x, u.forces)
    a_v, a_w = _project_base(t, x)
    rate = np.empty(NT)
    rate[0:3] = x.v_b
    rate[3:6] = x.omega
    rate[LIN] = a_v
    rate[ANG] = a_w
    rate[FEET] = u.foot_rates.ravel()
    return rate


# ---------------------------------------------------------------------------
# Discrete step and its exact Jacobians.


def _py_step(params: RobotParams, x: State, u: Control, dt: float) -> State:
    t = _world_terms(params, x, u.forces)
    a_v, a_w = _project_base(t, x)
    v_new = x.v_b + dt * a_v
    w_new = x.omega + dt * a_w
    delta = np.empty(NT)
    delta[0:3] = dt * v_new  # pose moves with the updated twist
    delta[3:6] = dt * w_new
    delta[LIN] = dt * a_v
    delta[ANG] = dt * a_w
    delta[FEET] = dt * u.foot_rates.ravel()
    return integrate(x, delta)


def _py_step_derivatives(params: RobotParams, x: State, u: Control, dt: float) -> DynamicsDerivatives:
    t = _world_terms(params, x, u.forces)
    J_q = configuration_jacobian(params, x)
    R = t.R
    body = t.body
    w = x.omega
    c = -body.com
    a_v, a_w = _project_base(t, x)

    # Angular balance: a_wW = W tau with W = inv(I_W), so
    # d a_wW = W (d tau - d I_W a_wW).  Accumulate the bracket into DM.
    DM = np.zeros((3, NT))
    skF = skew(t.F_tot)
    skL = skew(t.L_W)
    skwW = skew(t.w_W)
    gyro = skL - skwW @ t.I_W  # d tau_gyro / d w_W
    DM[:, 0:3] = skF @ R  # CoM translates with the base; arms shrink
    DM[:, 3:6] = skF @ (-R @ skew(body.com)) + gyro @ (-R @ skew(w))
    for k in range(3):
        dIW = R @ (_E[k] @ body.inertia - body.inertia @ _E[k]) @ R.T
        DM[:, 3 + k] += -skwW @ (dIW @ t.w_W) - dIW @ t.a_wW
    DM[:, 9:12] = gyro @ R
    for i in range(4):
        DM[:, 12 + 3 * i : 15 + 3 * i] = -skew(u.forces[i])
    # Configuration chain: inertia and CoM move with q, q moves with the state.
    TIW = np.einsum("ab,bcj,dc->adj", R, body.dI_dq, R)
    DM_q = skF @ (R @ body.dcom_dq)
    DM_q -= skwW @ np.einsum("abj,b->aj", TIW, t.w_W)
    DM_q -= np.einsum("abj,b->aj", TIW, t.a_wW)
    DM += DM_q @ J_q

    Da_w = R.T @ (t.W @ DM)
    Da_w[:, 3:6] += skew(a_w)  # body-frame output rides the perturbed R

    Dc = -body.dcom_dq @ J_q
    skc = skew(c)
    skw = skew(w)
    Da_v = -skc @ Da_w + (skew(a_w) + skw @ skw) @ Dc
    Da_v[:, 3:6] += skew(R.T @ t.a_vW)
    Da_v[:, 6:9] -= skw
    Da_v[:, 9:12] += skew(x.v_b) - skew(np.cross(w, c)) - skw @ skc

    # Control side: only forces enter the accelerations.
    Du_w = np.zeros((3, NU))
    for i in range(4):
        Du_w[:, FORCE_COLS[i]] = t.W @ skew(t.arms[i])
    Du_w = R.T @ Du_w
    Du_v = -skc @ Du_w
    for i in range(4):
        Du_v[:, FORCE_COLS[i]] += R.T / params.total_mass

    # Discrete step: d(v+, w+) first, then the pose update through the group.
    v_new = x.v_b + dt * a_v
    w_new = x.omega + dt * a_w
    xi = dt * np.concatenate([v_new, w_new])
    V = np.zeros((6, NT))
    V[0:3] = dt * Da_v
    V[3:6] = dt * Da_w
    V[0:3, LIN] += np.eye(3)
    V[3:6, ANG] += np.eye(3)
    U = np.zeros((6, NU))
    U[0:3] = dt * Du_v
    U[3:6] = dt * Du_w

    Jr = se3_right_jacobian(xi)
    Ad = se3_adjoint(*se3_exp(-xi))
    fx = np.zeros((NT, NT))
    fx[0:6, 0:6] = Ad
    fx[0:6, :] += Jr @ (dt * V)
    fx[6:12, :] = V
    fx[12:24, 12:24] = np.eye(12)

    fu = np.zeros((NT, NU))
    fu[0:6, :] = Jr @ (dt * U)
    fu[6:12, :] = U
    for i in range(4):
        fu[12 + 3 * i : 15 + 3 * i, RATE_COLS[i]] = dt * np.eye(3)
    return DynamicsDerivatives(fx, fu)


# ---------------------------------------------------------------------------
# Backend selection.  The compiled extension, when built, provides the same
# two kernels; everything else stays in Python.

_backends = {"python": (_py_step, _py_step_derivatives)}
_active_name = "python"

try:
    from . import _core
except ImportError:
    _core = None


def _native_step(params, x, u, dt):
    return State.from_vector(_core.step(_packed(params), x.as_vector(), u.as_vector(), dt))


def _native_step_derivatives(params, x, u, dt):
    fx, fu = _core.step_derivatives(_packed(params), x.as_vector(), u.as_vector(), dt)
    return DynamicsDerivatives(fx, fu)


if _core is not None:
    _backends["native"] = (_native_step, _native_step_derivatives)
    _active_name = "native"


def available_backends() -> list[str]:
    return sorted(_backends)


def active_backend() -> str:
    return _active_name


def set_backend(name: str) -> None:
    global _active_name
    if name not in _backends:
        raise ValueError(f"unknown backend {name!r}; available: {', '.join(sorted(_backends))}")
    _active_name = name


_requested = os.environ.get("JUMPOPT_BACKEND")
if _requested:
    set_backend(_requested)
del _requested


def step(params: RobotParams, x: State, u: Control, dt: float) -> State:
    """One symplectic Euler step of the discrete dynamics."""
    return _backends[_active_name][0](params, x, u, dt)


def step_derivatives(params: RobotParams, x: State, u: Control, dt: float) -> DynamicsDerivatives:
    """Exact tangent-space Jacobians fx, fu of `step`."""
    return _backends[_active_name][1](params, x, u, dt)


# ---------------------------------------------------------------------------
# Parameter packing for the compiled kernels.

_pack_cache: "weakref.WeakKeyDictionary[RobotParams, np.ndarray]" = weakref.WeakKeyDictionary()


def _pack_params(params: RobotParams) -> np.ndarray:
    """Flatten RobotParams into one float array the extension can walk.

    Layout (float offsets):
      0       total mass
      1:4     gravity
      4:7     workspace r_min, r_max, clamp margin
      7:20    base link: mass, com (3), inertia row-major (9)
      20:     four 53-float leg blocks:
                side, knee sign, abduction offset, thigh length, shank length,
                hip offset (3), joint limits lo/hi interleaved (6),
                three links of [mass, com (3), inertia row-major (9)]
    """
    out = np.empty(20 + 4 * 53)
    out[0] = params.total_mass
    out[1:4] = params.gravity
    ws = params.workspace
    out[4:7] = (ws.r_min, ws.r_max, ws.clamp_margin)
    out[7] = params.base.mass
    out[8:11] = params.base.com
    out[11:20] = params.base.inertia.ravel()
    o = 20
    for leg in params.legs:
        out[o : o + 5] = (leg.side, leg.knee_sign, leg.d_ab, leg.l_thigh, leg.l_shank)
        out[o + 5 : o + 8] = leg.hip_offset
        out[o + 8 : o + 14] = leg.limits.ravel()
        p = o + 14
        for link in leg.links:
            out[p] = link.mass
            out[p + 1 : p + 4] = link.com
            out[p + 4 : p + 13] = link.inertia.ravel()
            p += 13
        o += 53
    return out


def _packed(params: RobotParams) -> np.ndarray:
    arr = _pack_cache.get(params)
    if arr is None:
        arr = _pack_params(params)
        _pack_cache[params] = arr
    return arr
