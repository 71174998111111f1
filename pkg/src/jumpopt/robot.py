"""Quadruped model: leg geometry, closed-form kinematics, composite inertia.

Each leg is a 3-DoF chain: hip abduction about the body x-axis, then hip and
knee flexion about parallel y-axes.  Legs are ordered LF, LH, RF, RH.  The
hip frames translate with the base but do not rotate relative to it, so all
leg quantities live in the base frame shifted by the hip offset.

The whole-body configuration never appears as a decision variable: it is
recovered from base pose and world footholds through the closed-form inverse
kinematics, with footholds radially clamped into a spherical workspace shell
around each hip first so the mapping is total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
import yaml

from .manifold import Pose, State, quat_rotate, quat_conjugate, quat_to_matrix, skew

LEG_NAMES = ("lf", "lh", "rf", "rh")
NQ = 12


class RobotConfigError(ValueError):
    """Malformed or inconsistent robot description file."""


class UnreachableTargetError(RuntimeError):
    """IK target outside the workspace shell; indicates a model/config bug."""


class SingularJacobianError(RuntimeError):
    """Leg Jacobian condition number beyond the invertibility threshold."""


@dataclass(frozen=True, eq=False)
class LinkParams:
    mass: float
    com: np.ndarray       # (3,) in link frame
    inertia: np.ndarray   # (3, 3) about the link CoM, link frame

    def __post_init__(self):
        object.__setattr__(self, "com", np.asarray(self.com, dtype=float).reshape(3))
        object.__setattr__(self, "inertia", np.asarray(self.inertia, dtype=float).reshape(3, 3))


@dataclass(frozen=True, eq=False)
class LegParams:
    name: str
    hip_offset: np.ndarray  # (3,) base frame
    side: float             # +1 left, -1 right: sign of the abduction offset
    knee_sign: float        # +1 fore, -1 hind: knee flexion branch
    d_ab: float             # lateral offset from the HAA to the flexion plane
    l_thigh: float
    l_shank: float
    links: tuple            # (hip, thigh, shank) LinkParams
    limits: np.ndarray      # (3, 2) lower/upper joint bounds

    def __post_init__(self):
        object.__setattr__(self, "hip_offset", np.asarray(self.hip_offset, dtype=float).reshape(3))
        object.__setattr__(self, "limits", np.asarray(self.limits, dtype=float).reshape(3, 2))


@dataclass(frozen=True)
class Workspace:
    r_min: float
    r_max: float
    clamp_margin: float = 1e-3   # radial margin used by normalise_workspace
    barrier_margin: float = 0.02  # soft margin used by the kinematic penalty


@dataclass(frozen=True, eq=False)
class RobotParams:
    gravity: np.ndarray
    base: LinkParams
    legs: tuple  # 4 LegParams, LF LH RF RH
    workspace: Workspace
    nominal_height: float
    nominal_q: np.ndarray  # (12,)
    total_mass: float

    def __post_init__(self):
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float).reshape(3))
        object.__setattr__(self, "nominal_q", np.asarray(self.nominal_q, dtype=float).reshape(NQ))

    @classmethod
    def from_file(cls, path) -> "RobotParams":
        try:
            with open(path) as f:
                doc = yaml.safe_load(f)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            line = f", line {mark.line + 1}" if mark is not None else ""
            raise RobotConfigError(f"{path}{line}: {e}") from e
        except OSError as e:
            raise RobotConfigError(f"{path}: {e}") from e
        return cls.from_dict(doc, source=str(path))

    @classmethod
    def from_dict(cls, doc: dict, source: str = "<dict>") -> "RobotParams":
        def get(node, key, where):
            if not isinstance(node, dict) or key not in node:
                raise RobotConfigError(f"{source}: missing key '{where}.{key}'")
            return node[key]

        def vec(node, key, where, n):
            raw = get(node, key, where)
            arr = np.asarray(raw, dtype=float)
            if arr.shape != (n,):
                raise RobotConfigError(
                    f"{source}: '{where}.{key}' must be a {n}-vector, got shape {arr.shape}"
                )
            return arr

        def link(node, where):
            mass = float(get(node, "mass", where))
            if mass <= 0.0:
                raise RobotConfigError(f"{source}: '{where}.mass' must be positive")
            com = vec(node, "com", where, 3)
            i6 = vec(node, "inertia", where, 6)  # ixx iyy izz ixy ixz iyz
            inertia = np.array(
                [
                    [i6[0], i6[3], i6[4]],
                    [i6[3], i6[1], i6[5]],
                    [i6[4], i6[5], i6[2]],
                ]
            )
            if np.any(np.linalg.eigvalsh(inertia) <= 0.0):
                raise RobotConfigError(f"{source}: '{where}.inertia' must be positive definite")
            return LinkParams(mass, com, inertia)

        base_node = get(doc, "base", "")
        base = link(base_node, "base")
        gravity = vec(doc, "gravity", "", 3) if "gravity" in doc else np.array([0.0, 0.0, -9.81])

        legs_node = get(doc, "legs", "")
        legs = []
        for name in LEG_NAMES:
            ln = get(legs_node, name, "legs")
            where = f"legs.{name}"
            lengths = get(ln, "lengths", where)
            limits_node = get(ln, "limits", where)
            limits = np.array(
                [
                    vec(limits_node, "haa", f"{where}.limits", 2),
                    vec(limits_node, "hfe", f"{where}.limits", 2),
                    vec(limits_node, "kfe", f"{where}.limits", 2),
                ]
            )
            if np.any(limits[:, 0] >= limits[:, 1]):
                raise RobotConfigError(f"{source}: '{where}.limits' lower bound >= upper bound")
            links_node = get(ln, "links", where)
            legs.append(
                LegParams(
                    name=name,
                    hip_offset=vec(ln, "hip_offset", where, 3),
                    side=float(get(ln, "side", where)),
                    knee_sign=float(get(ln, "knee_sign", where)),
                    d_ab=float(get(lengths, "abduction", f"{where}.lengths")),
                    l_thigh=float(get(lengths, "thigh", f"{where}.lengths")),
                    l_shank=float(get(lengths, "shank", f"{where}.lengths")),
                    links=(
                        link(get(links_node, "hip", f"{where}.links"), f"{where}.links.hip"),
                        link(get(links_node, "thigh", f"{where}.links"), f"{where}.links.thigh"),
                        link(get(links_node, "shank", f"{where}.links"), f"{where}.links.shank"),
                    ),
                    limits=limits,
                )
            )

        ws_node = get(doc, "workspace", "")
        workspace = Workspace(
            r_min=float(get(ws_node, "r_min", "workspace")),
            r_max=float(get(ws_node, "r_max", "workspace")),
            clamp_margin=float(ws_node.get("clamp_margin", 1e-3)),
            barrier_margin=float(ws_node.get("barrier_margin", 0.02)),
        )
        if not 0.0 < workspace.r_min < workspace.r_max:
            raise RobotConfigError(f"{source}: workspace radii must satisfy 0 < r_min < r_max")
        for leg in legs:
            if workspace.r_min < _reach_lo(leg) or workspace.r_max > _reach_hi(leg):
                raise RobotConfigError(
                    f"{source}: workspace shell [{workspace.r_min}, {workspace.r_max}] exceeds "
                    f"the reach of legs.{leg.name} [{_reach_lo(leg):.4f}, {_reach_hi(leg):.4f}]"
                )

        nominal = get(doc, "nominal", "")
        total = base.mass + sum(l.mass for leg in legs for l in leg.links)
        declared = float(get(doc, "mass", ""))
        if abs(total - declared) > 1e-9:
            raise RobotConfigError(
                f"{source}: 'mass' ({declared}) does not equal the link-mass sum ({total:.9f})"
            )
        return cls(
            gravity=gravity,
            base=base,
            legs=tuple(legs),
            workspace=workspace,
            nominal_height=float(get(nominal, "standing_height", "nominal")),
            nominal_q=vec(nominal, "q_cfg", "nominal", NQ),
            total_mass=total,
        )

    @classmethod
    def default(cls) -> "RobotParams":
        ref = resources.files("jumpopt").joinpath("configs/quadruped_55kg.yaml")
        with resources.as_file(ref) as path:
            return cls.from_file(path)


def _rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


# ---------------------------------------------------------------------------
# Leg kinematics (hip frame).


def leg_fk(leg: LegParams, q: np.ndarray) -> np.ndarray:
    """Foot position in the hip frame for joint angles (haa, hfe, kfe)."""
    q1, q2, q3 = q
    planar = _rot_y(q2) @ (
        np.array([0.0, 0.0, -leg.l_thigh]) + _rot_y(q3) @ np.array([0.0, 0.0, -leg.l_shank])
    )
    return _rot_x(q1) @ (np.array([0.0, leg.side * leg.d_ab, 0.0]) + planar)


def leg_fk_jacobian(leg: LegParams, q: np.ndarray) -> np.ndarray:
    """Geometric Jacobian d(foot)/dq in the hip frame, shape (3, 3)."""
    q1, q2, q3 = q
    Rx = _rot_x(q1)
    foot = leg_fk(leg, q)
    ax1 = np.array([1.0, 0.0, 0.0])
    ax23 = Rx @ np.array([0.0, 1.0, 0.0])
    o2 = Rx @ np.array([0.0, leg.side * leg.d_ab, 0.0])
    o3 = o2 + Rx @ (_rot_y(q2) @ np.array([0.0, 0.0, -leg.l_thigh]))
    J = np.empty((3, 3))
    J[:, 0] = np.cross(ax1, foot)
    J[:, 1] = np.cross(ax23, foot - o2)
    J[:, 2] = np.cross(ax23, foot - o3)
    return J


def leg_ik(params: RobotParams, leg: LegParams, target: np.ndarray) -> np.ndarray:
    """Closed-form IK on the configured knee branch.

    The abduction angle comes from the frontal-plane projection, the two
    flexion angles from the planar cosine rule.  Raises UnreachableTargetError
    when the target lies outside the workspace shell (callers are expected to
    normalise first); degenerate frontal-plane targets are clamped instead of
    failing so the overall configuration map stays total.
    """
    x, y, z = target
    ws = params.workspace
    ws_r = float(np.linalg.norm(target))
    if ws_r < ws.r_min - 1e-9 or ws_r > ws.r_max + 1e-9:
        raise UnreachableTargetError(
            f"leg {leg.name}: target radius {ws_r:.4f} outside [{ws.r_min:.4f}, {ws.r_max:.4f}]"
        )
    rho = math.hypot(y, z)
    off = leg.side * leg.d_ab
    if rho <= abs(off):
        # Target on (or inside) the abduction axis cylinder: keep the foot in
        # the frontal plane of the axis and solve the flexion pair only.
        q1 = math.atan2(z, y) if rho > 0.0 else 0.0
        wz = 0.0
    else:
        alpha = math.acos(min(1.0, max(-1.0, off / rho)))
        q1 = math.atan2(z, y) + alpha
        # Wrap to (-pi, pi].
        q1 = math.atan2(math.sin(q1), math.cos(q1))
        wz = -math.sin(q1) * y + math.cos(q1) * z
    d_sq = x * x + wz * wz
    l1, l2 = leg.l_thigh, leg.l_shank
    c3 = (d_sq - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    q3 = leg.knee_sign * math.acos(min(1.0, max(-1.0, c3)))
    s3, c3 = math.sin(q3), math.cos(q3)
    q2 = math.atan2(-x, -wz) - math.atan2(l2 * s3, l1 + l2 * c3)
    q_out = np.array([q1, q2, q3])
    return np.clip(q_out, leg.limits[:, 0], leg.limits[:, 1])


def _reach_lo(leg: LegParams) -> float:
    d = abs(leg.l_thigh - leg.l_shank)
    return math.sqrt(d * d + leg.d_ab * leg.d_ab)


def _reach_hi(leg: LegParams) -> float:
    s = leg.l_thigh + leg.l_shank
    return math.sqrt(s * s + leg.d_ab * leg.d_ab)


# Relative slack on the shell bounds so that projecting twice is a no-op:
# the rescaled norm lands within a few ulps of the bound and must not be
# rescaled again.
_SHELL_SLACK = 1e-12


def normalise_workspace(params: RobotParams, target: np.ndarray) -> np.ndarray:
    """Radially project a hip-frame foothold into the workspace shell."""
    ws = params.workspace
    lo = ws.r_min + ws.clamp_margin
    hi = ws.r_max - ws.clamp_margin
    r = float(np.linalg.norm(target))
    if r < 1e-12:
        # Degenerate target at the hip: no radial direction; drop straight down.
        return np.array([0.0, 0.0, -lo])
    if r < lo * (1.0 - _SHELL_SLACK):
        return target * (lo / r)
    if r > hi * (1.0 + _SHELL_SLACK):
        return target * (hi / r)
    return np.asarray(target, dtype=float).copy()


def normalise_workspace_jacobian(params: RobotParams, target: np.ndarray) -> np.ndarray:
    ws = params.workspace
    lo = ws.r_min + ws.clamp_margin
    hi = ws.r_max - ws.clamp_margin
    r = float(np.linalg.norm(target))
    if r < 1e-12:
        return np.zeros((3, 3))
    if lo * (1.0 - _SHELL_SLACK) <= r <= hi * (1.0 + _SHELL_SLACK):
        return np.eye(3)
    bound = lo if r < lo else hi
    unit = target / r
    return (bound / r) * (np.eye(3) - np.outer(unit, unit))


# ---------------------------------------------------------------------------
# Whole-body configuration from base pose and footholds.


def hip_targets(params: RobotParams, x: State) -> np.ndarray:
    """Raw hip-frame foothold targets, shape (4, 3), before normalisation."""
    q_inv = quat_conjugate(x.pose.q)
    out = np.empty((4, 3))
    for i, leg in enumerate(params.legs):
        out[i] = quat_rotate(q_inv, x.feet[i] - x.pose.p) - leg.hip_offset
    return out


def implicit_configuration(params: RobotParams, x: State) -> np.ndarray:
    """Joint angles implied by the state; total on all states."""
    targets = hip_targets(params, x)
    q = np.empty(NQ)
    for i, leg in enumerate(params.legs):
        q[3 * i : 3 * i + 3] = leg_ik(params, leg, normalise_workspace(params, targets[i]))
    return q


_COND_LIMIT = 1e8


def configuration_jacobian(params: RobotParams, x: State) -> np.ndarray:
    """Derivative of implicit_configuration w.r.t. the state tangent, (12, 24).

    Chains the inverted leg Jacobian with the workspace clamp and the
    base-pose dependence of the hip-frame targets.  Joint axes where the
    limit clamp binds get zero rows.
    """
    R_T = quat_to_matrix(x.pose.q).T
    targets = hip_targets(params, x)
    out = np.zeros((NQ, 24))
    for i, leg in enumerate(params.legs):
        t_norm = normalise_workspace(params, targets[i])
        q_leg = leg_ik(params, leg, t_norm)
        J_fk = leg_fk_jacobian(leg, q_leg)
        sv = np.linalg.svd(J_fk, compute_uv=False)
        if sv[-1] <= 0.0 or sv[0] / sv[-1] > _COND_LIMIT:
            raise SingularJacobianError(
                f"leg {leg.name}: FK Jacobian condition {sv[0] / max(sv[-1], 1e-300):.2e}"
            )
        C = np.linalg.solve(J_fk, normalise_workspace_jacobian(params, targets[i]))
        clamped = (q_leg <= leg.limits[:, 0]) | (q_leg >= leg.limits[:, 1])
        if np.any(clamped):
            C = C.copy()
            C[clamped, :] = 0.0
        r_b = targets[i] + leg.hip_offset  # base-frame foothold
        rows = slice(3 * i, 3 * i + 3)
        out[rows, 0:3] = -C
        out[rows, 3:6] = C @ skew(r_b)
        out[rows, 12 + 3 * i : 15 + 3 * i] = C @ R_T
    return out


# ---------------------------------------------------------------------------
# Composite rigid-body inertia about the instantaneous CoM.


@dataclass(frozen=True, eq=False)
class InertiaResult:
    inertia: np.ndarray  # (3, 3) base frame, about the composite CoM
    com: np.ndarray      # (3,) base frame
    dI_dq: np.ndarray    # (3, 3, 12)
    dcom_dq: np.ndarray  # (3, 12)


def composite_inertia(params: RobotParams, q_cfg: np.ndarray) -> InertiaResult:
    """Lumped inertia of base plus legs frozen at q_cfg, with derivatives.

    Direct summation over the 13 links: rotate each link inertia into the
    base frame and add the parallel-axis term about the composite CoM.  The
    derivatives chain through both the link motion and the CoM shift, so
    every link contributes to every dI/dq_j even when only one leg moves.
    """
    q_cfg = np.asarray(q_cfg, dtype=float).reshape(NQ)
    n_links = 1 + 12
    masses = np.empty(n_links)
    coms = np.empty((n_links, 3))      # link CoM, base frame
    rotated = np.empty((n_links, 3, 3))  # R I_link R^T
    # dcom/dq and d(R I R^T)/dq, only leg links move.
    dcoms = np.zeros((n_links, 3, NQ))
    drot = np.zeros((n_links, 3, 3, NQ))

    masses[0] = params.base.mass
    coms[0] = params.base.com
    rotated[0] = params.base.inertia

    for i, leg in enumerate(params.legs):
        q1, q2, q3 = q_cfg[3 * i : 3 * i + 3]
        Rx = _rot_x(q1)
        R2 = Rx @ _rot_y(q2)
        R3 = R2 @ _rot_y(q3)
        o_hip = leg.hip_offset
        o_hfe = o_hip + Rx @ np.array([0.0, leg.side * leg.d_ab, 0.0])
        o_kfe = o_hfe + R2 @ np.array([0.0, 0.0, -leg.l_thigh])
        frames = ((Rx, o_hip), (R2, o_hfe), (R3, o_kfe))
        axes = (
            np.array([1.0, 0.0, 0.0]),
            Rx @ np.array([0.0, 1.0, 0.0]),
            Rx @ np.array([0.0, 1.0, 0.0]),
        )
        origins = (o_hip, o_hfe, o_kfe)
        for j, (R, origin) in enumerate(frames):
            idx = 1 + 3 * i + j
            lp = leg.links[j]
            masses[idx] = lp.mass
            coms[idx] = origin + R @ lp.com
            rotated[idx] = R @ lp.inertia @ R.T
            # Joint g <= j of this leg moves link j.
            for g in range(j + 1):
                col = 3 * i + g
                a = axes[g]
                dcoms[idx, :, col] = np.cross(a, coms[idx] - origins[g])
                S = skew(a)
                RIR = rotated[idx]
                drot[idx, :, :, col] = S @ RIR - RIR @ S

    m_total = masses.sum()
    com = masses @ coms / m_total
    dcom = np.einsum("l,lxq->xq", masses, dcoms) / m_total

    inertia = np.zeros((3, 3))
    dI = np.zeros((3, 3, NQ))
    eye = np.eye(3)
    for l in range(n_links):
        d = coms[l] - com
        inertia += rotated[l] + masses[l] * (d @ d * eye - np.outer(d, d))
        dd = dcoms[l] - dcom  # (3, NQ)
        dI += drot[l]
        dI += masses[l] * (
            2.0 * np.einsum("x,xq->q", d, dd)[None, None, :] * eye[:, :, None]
            - np.einsum("xq,y->xyq", dd, d)
            - np.einsum("x,yq->xyq", d, dd)
        )
    return InertiaResult(inertia, com, dI, dcom)


def nominal_state(params: RobotParams, height: float | None = None) -> State:
    """Symmetric stance: base over the origin, feet under the hip flexion planes."""
    h = params.nominal_height if height is None else height
    feet = np.empty((4, 3))
    for i, leg in enumerate(params.legs):
        feet[i] = [
            leg.hip_offset[0],
            leg.hip_offset[1] + leg.side * leg.d_ab,
            0.0,
        ]
    return State(
        Pose(np.array([0.0, 0.0, h]), np.array([1.0, 0.0, 0.0, 0.0])),
        np.zeros(3),
        np.zeros(3),
        feet,
    )
