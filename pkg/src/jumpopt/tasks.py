"""Contact schedules, bounds assembly and the built-in reference tasks.

A task is a knot-level description: phase list with stance flags, sparse
state references with per-component weights, control references and force
bounds.  `build_problem` turns one into a solver problem; the builders are
pure, so the same inputs always produce the same problem.

The references are deliberately minimal: the jumps carry base-height (and,
for the rotational jump, yaw) targets plus mild regularisation, and the
swing motion is left to the kinematic-limit penalty.  Sparsity is encoded
by zero weights so every knot shares one cost structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import yaml

from . import centroidal as cn
from . import fddp
from . import manifold as mf
from .cost import CostWeights, kinematic_barrier, state_cost, total_cost
from .manifold import ANG, FEET, LIN, NT, POS, ROT, Pose, State
from .robot import RobotParams, nominal_state


class InvalidSpecError(ValueError):
    """A task description violates one of its invariants."""


@dataclass(frozen=True)
class ContactPhase:
    """Half-open knot range [start, end) with one stance flag per leg."""

    start: int
    end: int
    stance: tuple

    def __post_init__(self):
        object.__setattr__(self, "stance", tuple(bool(s) for s in self.stance))
        if len(self.stance) != 4:
            raise InvalidSpecError("a phase needs exactly four stance flags")
        if self.end <= self.start:
            raise InvalidSpecError(f"phase [{self.start}, {self.end}) is empty")

    @property
    def knots(self) -> int:
        return self.end - self.start


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """Everything build_problem needs, resolved to knot resolution.

    `weights[i]` holds the per-knot diagonal weights and penalty scales of
    phase i; `q_overlay[k]` adds knot-specific state weights on top (row N
    applies to the terminal cost).  `x_refs` has one entry per knot plus
    the terminal one; `u_refs` one per knot.
    """

    name: str
    dt: float
    phases: tuple
    weights: tuple            # CostWeights per phase
    x_refs: tuple             # State, length N + 1
    q_overlay: np.ndarray     # (N + 1, 24)
    u_refs: tuple             # Control, length N
    f_max: float

    def __post_init__(self):
        if self.dt <= 0.0:
            raise InvalidSpecError("dt must be positive")
        if self.f_max <= 0.0:
            raise InvalidSpecError("f_max must be positive")
        if not self.phases:
            raise InvalidSpecError("a task needs at least one phase")
        expected = 0
        for ph in self.phases:
            if ph.start != expected:
                raise InvalidSpecError(
                    f"phases must partition the horizon: phase starting at "
                    f"{ph.start} does not continue from knot {expected}"
                )
            expected = ph.end
        n = expected
        if len(self.weights) != len(self.phases):
            raise InvalidSpecError("need one weight set per phase")
        if len(self.x_refs) != n + 1:
            raise InvalidSpecError(f"need {n + 1} state references, got {len(self.x_refs)}")
        if len(self.u_refs) != n:
            raise InvalidSpecError(f"need {n} control references, got {len(self.u_refs)}")
        overlay = np.asarray(self.q_overlay, dtype=float)
        if overlay.shape != (n + 1, NT):
            raise InvalidSpecError(f"q_overlay must be ({n + 1}, {NT})")
        object.__setattr__(self, "q_overlay", overlay)

    @property
    def horizon(self) -> int:
        return self.phases[-1].end

    @property
    def duration(self) -> float:
        return self.horizon * self.dt

    def phase_of(self, k: int) -> int:
        for i, ph in enumerate(self.phases):
            if ph.start <= k < ph.end:
                return i
        raise IndexError(k)


# ---------------------------------------------------------------------------
# Problem assembly.


def planner_space() -> fddp.Space:
    return fddp.Space(
        NT,
        mf.integrate,
        mf.difference,
        lambda x: float(np.linalg.norm(x.as_vector())),
    )


def _knot_bounds(stance, f_max):
    lo = np.empty(cn.NU)
    hi = np.empty(cn.NU)
    for i in range(4):
        fc, rc = cn.FORCE_COLS[i], cn.RATE_COLS[i]
        if stance[i]:
            lo[fc] = (-f_max, -f_max, 0.0)
            hi[fc] = (f_max, f_max, f_max)
            lo[rc] = 0.0
            hi[rc] = 0.0
        else:
            lo[fc] = 0.0
            hi[fc] = 0.0
            lo[rc] = -np.inf
            hi[rc] = np.inf
    return lo, hi


def _make_knot(params, dt, weights, x_ref, u_ref, stance, f_max):
    lo, hi = _knot_bounds(stance, f_max)

    def dynamics(x, u):
        return cn.step(params, x, cn.Control.from_vector(u), dt)

    def dynamics_derivatives(x, u):
        der = cn.step_derivatives(params, x, cn.Control.from_vector(u), dt)
        return der.fx, der.fu

    def cost(x, u):
        return total_cost(params, weights, x_ref, u_ref, stance, x, cn.Control.from_vector(u))

    return fddp.Knot(dt, dynamics, dynamics_derivatives, cost, lo, hi)


def build_problem(params: RobotParams, spec: TaskSpec) -> fddp.Problem:
    """Assemble the solver problem for a task.

    Stance legs get zero-width foot-rate bounds and a one-sided normal
    force box; swing legs get zero-width force bounds and free rates.  The
    initial state is the first reference state.
    """
    n = spec.horizon
    knots = []
    for k in range(n):
        i = spec.phase_of(k)
        base = spec.weights[i]
        wk = CostWeights(
            Q=base.Q + spec.q_overlay[k],
            R=base.R,
            w_kin=base.w_kin,
            w_fr=base.w_fr,
            mu=base.mu,
        )
        knots.append(
            _make_knot(params, spec.dt, wk, spec.x_refs[k], spec.u_refs[k],
                       spec.phases[i].stance, spec.f_max)
        )

    last = spec.weights[-1]
    q_term = last.Q + spec.q_overlay[n]
    x_term = spec.x_refs[n]
    w_kin_term = last.w_kin

    def terminal(x):
        value, l_x, l_xx = state_cost(x_term, x, q_term)
        kv, k_x, k_xx = kinematic_barrier(params, x, w_kin_term)
        return value + kv, l_x + k_x, l_xx + k_xx

    return fddp.Problem(planner_space(), spec.x_refs[0], knots, terminal, cn.NU)


def stance_force(params: RobotParams, stance) -> cn.Control:
    """Gravity-compensating vertical forces shared by the stance legs."""
    forces = np.zeros((4, 3))
    n_c = sum(stance)
    if n_c:
        fz = params.total_mass * float(np.linalg.norm(params.gravity)) / n_c
        for i in range(4):
            if stance[i]:
                forces[i, 2] = fz
    return cn.Control(forces, np.zeros((4, 3)))


def default_init(params: RobotParams, spec: TaskSpec):
    """Cold start: the initial state replicated, controls at the references
    (gravity compensation during stance, zero in flight)."""
    xs = [spec.x_refs[0]] * (spec.horizon + 1)
    us = [u.as_vector() for u in spec.u_refs]
    return xs, us


# ---------------------------------------------------------------------------
# Built-in tasks.

# weight defaults shared by the builders; per-task entries override
_BASE_XY_W = 20.0
_ROLL_PITCH_W = 200.0
_VEL_W = 1.0
_FORCE_W = 3e-5
_RATE_W = 1e-2
_KIN_W = 1e3
_FRICTION_W = 1e3
_MU = 0.7


def _phase_schedule(durations, stances, dt):
    phases = []
    start = 0
    for dur, st in zip(durations, stances):
        knots = round(dur / dt)
        if abs(knots * dt - dur) > 1e-9:
            raise InvalidSpecError(f"phase duration {dur} is not a multiple of dt={dt}")
        if knots < 1:
            raise InvalidSpecError(f"phase duration {dur} shorter than dt={dt}")
        phases.append(ContactPhase(start, start + knots, st))
        start += knots
    return tuple(phases)


def _diag_weights(pos_xy=_BASE_XY_W, height=500.0, roll_pitch=_ROLL_PITCH_W,
                  yaw=_ROLL_PITCH_W, vel=_VEL_W, feet=0.0):
    Q = np.zeros(NT)
    Q[POS] = (pos_xy, pos_xy, height)
    Q[ROT] = (roll_pitch, roll_pitch, yaw)
    Q[LIN] = vel
    Q[ANG] = vel
    Q[FEET] = feet
    return Q


def _control_weights(force=_FORCE_W, rate=_RATE_W):
    R = np.empty(cn.NU)
    for i in range(4):
        R[cn.FORCE_COLS[i]] = force
        R[cn.RATE_COLS[i]] = rate
    return R


def _yawed_pose(p, yaw):
    half = 0.5 * yaw
    return Pose(np.asarray(p, dtype=float), np.array([math.cos(half), 0.0, 0.0, math.sin(half)]))


def _ref_state(p, yaw, feet):
    return State(_yawed_pose(p, yaw), np.zeros(3), np.zeros(3), feet)


def lemniscate_task(params: RobotParams, amplitude: float = 0.1,
                    duration: float = 4.0, dt: float = 0.01,
                    name: str = "lemniscate") -> TaskSpec:
    """All-stance base sway along a figure-eight at constant height.

    The x-y reference is the 1:2 Lissajous curve x = A sin(w t),
    y = (A/2) sin(2 w t), one loop over the horizon; amplitude 0 reduces
    to quiet standing.
    """
    n = round(duration / dt)
    if abs(n * dt - duration) > 1e-9 or n < 1:
        raise InvalidSpecError(f"duration {duration} is not a positive multiple of dt={dt}")
    stance = (True, True, True, True)
    phases = (ContactPhase(0, n, stance),)
    x0 = nominal_state(params)
    h = params.nominal_height
    omega = 2.0 * math.pi / duration
    x_refs = []
    for k in range(n + 1):
        t = k * dt
        p = np.array([
            amplitude * math.sin(omega * t),
            0.5 * amplitude * math.sin(2.0 * omega * t),
            h,
        ])
        x_refs.append(_ref_state(p, 0.0, x0.feet))
    weights = (CostWeights(
        Q=_diag_weights(pos_xy=500.0, height=500.0, vel=2.0),
        R=_control_weights(),
        w_kin=_KIN_W,
        w_fr=_FRICTION_W,
        mu=_MU,
    ),)
    u_ref = stance_force(params, stance)
    return TaskSpec(
        name=name,
        dt=dt,
        phases=phases,
        weights=weights,
        x_refs=tuple(x_refs),
        q_overlay=np.zeros((n + 1, NT)),
        u_refs=(u_ref,) * n,
        f_max=4.0 * params.total_mass * float(np.linalg.norm(params.gravity)),
    )


def standing_task(params: RobotParams, duration: float = 1.0,
                  dt: float = 0.01) -> TaskSpec:
    return lemniscate_task(params, amplitude=0.0, duration=duration, dt=dt,
                           name="standing")


# jump phase skeleton; flight length fixes the ballistic apex rise
_JUMP_DURATIONS = (2.0, 1.0, 0.5, 0.53, 2.0)
_JUMP_STANCES = (
    (True, True, True, True),
    (True, True, True, True),
    (False, False, False, False),
    (True, True, True, True),
    (True, True, True, True),
)


def _jump_spec(params, name, dt, apex_height, land_height, yaw_final,
               heights_weight, apex_weight, yaw_weight, feet_weight):
    phases = _phase_schedule(_JUMP_DURATIONS, _JUMP_STANCES, dt)
    n = phases[-1].end
    x0 = nominal_state(params)
    stand_h = params.nominal_height

    # per-phase references: stand, crouch window (height free), flight apex,
    # touchdown, recovery; the apex reference is applied around mid-flight
    # only, since the ballistic arc cannot track a constant height and a
    # whole-window pull would overshoot the peak
    # the crouch window keeps a light pull toward stand height: deep dives
    # otherwise run the legs into the lower workspace boundary
    ref_height = (stand_h, stand_h, apex_height, land_height, land_height)
    ref_yaw = (0.0, 0.0, yaw_final, yaw_final, yaw_final)
    height_w = (heights_weight, 50.0, 0.0, 0.0, heights_weight)
    yaw_w = (_ROLL_PITCH_W, _ROLL_PITCH_W, yaw_weight, yaw_weight, yaw_weight)
    feet_w = (0.0, 0.0, 0.0, feet_weight, feet_weight)

    cz = math.cos(yaw_final)
    sz = math.sin(yaw_final)
    rot_z = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    feet_final = x0.feet @ rot_z.T

    weights = []
    x_refs = [None] * (n + 1)
    u_refs = [None] * n
    for i, ph in enumerate(phases):
        weights.append(CostWeights(
            Q=_diag_weights(height=height_w[i], yaw=yaw_w[i], feet=feet_w[i]),
            R=_control_weights(),
            w_kin=_KIN_W,
            w_fr=_FRICTION_W,
            mu=_MU,
        ))
        feet_ref = feet_final if ref_yaw[i] != 0.0 else x0.feet
        x_ph = _ref_state(np.array([0.0, 0.0, ref_height[i]]), ref_yaw[i], feet_ref)
        u_ph = stance_force(params, ph.stance)
        for k in range(ph.start, ph.end):
            x_refs[k] = x_ph
            u_refs[k] = u_ph
    x_refs[n] = x_refs[n - 1]

    # settle the final stand: extra velocity damping on the tail
    overlay = np.zeros((n + 1, NT))
    overlay[n, LIN] = 50.0
    overlay[n, ANG] = 50.0
    # apex pull on the central fifth of the flight window
    flight = phases[2]
    centre = flight.start + flight.knots // 2
    half = max(1, flight.knots // 10)
    overlay[centre - half : centre + half + 1, 2] = apex_weight
    # touchdown absorption: the first part of the landing phase carries no
    # height reference so the base can decelerate from the ballistic arc
    landing = phases[3]
    absorb = 2 * landing.knots // 5
    overlay[landing.start + absorb : landing.end, 2] = heights_weight

    return TaskSpec(
        name=name,
        dt=dt,
        phases=phases,
        weights=tuple(weights),
        x_refs=tuple(x_refs),
        q_overlay=overlay,
        u_refs=tuple(u_refs),
        f_max=4.0 * params.total_mass * float(np.linalg.norm(params.gravity)),
    )


def squat_jump_task(params: RobotParams, dt: float = 0.01) -> TaskSpec:
    """Vertical jump: only base-height references (stand 0.52 m, flight
    apex 0.72 m, land 0.52 m); swing clearance is left to emerge from the
    kinematic limits."""
    return _jump_spec(
        params, "squat_jump", dt,
        apex_height=0.72, land_height=params.nominal_height, yaw_final=0.0,
        heights_weight=500.0, apex_weight=3000.0,
        yaw_weight=_ROLL_PITCH_W, feet_weight=0.0,
    )


def rotational_jump_task(params: RobotParams, yaw_deg: float = 40.0,
                         dt: float = 0.01) -> TaskSpec:
    """Twisting jump: height references plus a yaw target from the flight
    phase onward and weak touchdown foothold references at the nominal
    stance rotated about the vertical axis."""
    return _jump_spec(
        params, "rotational_jump", dt,
        apex_height=0.70, land_height=params.nominal_height,
        yaw_final=math.radians(yaw_deg),
        heights_weight=500.0, apex_weight=3000.0,
        yaw_weight=800.0, feet_weight=30.0,
    )


BUILTIN_TASKS = {
    "standing": standing_task,
    "lemniscate": lemniscate_task,
    "squat_jump": squat_jump_task,
    "rotational_jump": rotational_jump_task,
}


# ---------------------------------------------------------------------------
# Task files.


def load_task(params: RobotParams, path) -> TaskSpec:
    """Parse a task description file.

    Layout (YAML, SI units, angles in degrees):

      task:       {name, duration, dt}
      phases:     [{duration, stance: [lf, lh, rf, rh]}, ...]
      references: base_height: [{phase, value, weight}, ...]
                  yaw:         [{phase, value, weight}, ...]
                  touchdown_feet: [{phase, yaw, weight}, ...]
      weights:    {position_xy, roll_pitch, velocity, force, foot_rate,
                   kinematic, friction, mu}          (all optional)
      bounds:     {f_max}                            (optional)

    Yaw angles convert to radians on load.  Phases are indexed from 0;
    unreferenced components keep zero weight.
    """
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = f", line {mark.line + 1}" if mark is not None else ""
        raise InvalidSpecError(f"{path}{line}: {e}") from e
    except OSError as e:
        raise InvalidSpecError(f"{path}: {e}") from e
    if not isinstance(doc, dict):
        raise InvalidSpecError(f"{path}: task file must be a mapping")

    def section(key, required=True, default=None):
        if key not in doc:
            if required:
                raise InvalidSpecError(f"{path}: missing section '{key}'")
            return default
        return doc[key]

    task = section("task")
    for key in ("name", "duration", "dt"):
        if not isinstance(task, dict) or key not in task:
            raise InvalidSpecError(f"{path}: missing 'task.{key}'")
    name = str(task["name"])
    duration = float(task["duration"])
    dt = float(task["dt"])

    raw_phases = section("phases")
    if not isinstance(raw_phases, list) or not raw_phases:
        raise InvalidSpecError(f"{path}: 'phases' must be a non-empty list")
    durations = []
    stances = []
    for i, ph in enumerate(raw_phases):
        if not isinstance(ph, dict) or "duration" not in ph or "stance" not in ph:
            raise InvalidSpecError(f"{path}: phase {i} needs 'duration' and 'stance'")
        st = ph["stance"]
        if not isinstance(st, list) or len(st) != 4:
            raise InvalidSpecError(f"{path}: phase {i} stance must list four flags")
        durations.append(float(ph["duration"]))
        stances.append(tuple(bool(b) for b in st))
    if abs(sum(durations) - duration) > 1e-9:
        raise InvalidSpecError(
            f"{path}: phase durations sum to {sum(durations)}, task duration is {duration}"
        )
    phases = _phase_schedule(durations, stances, dt)
    n = phases[-1].end

    wsec = section("weights", required=False, default={}) or {}
    known_weights = {"position_xy", "roll_pitch", "velocity", "force",
                     "foot_rate", "kinematic", "friction", "mu"}
    extra = set(wsec) - known_weights
    if extra:
        raise InvalidSpecError(f"{path}: unknown weight entries {sorted(extra)}")
    pos_xy = float(wsec.get("position_xy", _BASE_XY_W))
    roll_pitch = float(wsec.get("roll_pitch", _ROLL_PITCH_W))
    vel = float(wsec.get("velocity", _VEL_W))
    force = float(wsec.get("force", _FORCE_W))
    rate = float(wsec.get("foot_rate", _RATE_W))
    w_kin = float(wsec.get("kinematic", _KIN_W))
    w_fr = float(wsec.get("friction", _FRICTION_W))
    mu = float(wsec.get("mu", _MU))

    bsec = section("bounds", required=False, default={}) or {}
    f_max = float(bsec.get("f_max", 4.0 * params.total_mass * float(np.linalg.norm(params.gravity))))

    refs = section("references", required=False, default={}) or {}
    known_refs = {"base_height", "yaw", "touchdown_feet"}
    extra = set(refs) - known_refs
    if extra:
        raise InvalidSpecError(f"{path}: unknown reference components {sorted(extra)}")

    def per_phase(component, fields):
        out = {}
        for item in refs.get(component, []) or []:
            if not isinstance(item, dict) or any(f not in item for f in fields):
                raise InvalidSpecError(
                    f"{path}: '{component}' entries need fields {list(fields)}"
                )
            idx = int(item["phase"])
            if not 0 <= idx < len(phases):
                raise InvalidSpecError(f"{path}: '{component}' references phase {idx}, "
                                       f"task has {len(phases)}")
            if float(item["weight"]) < 0.0:
                raise InvalidSpecError(f"{path}: '{component}' weight must be non-negative")
            out[idx] = item
        return out

    height_refs = per_phase("base_height", ("phase", "value", "weight"))
    yaw_refs = per_phase("yaw", ("phase", "value", "weight"))
    feet_refs = per_phase("touchdown_feet", ("phase", "yaw", "weight"))

    x0 = nominal_state(params)
    weights = []
    x_refs = [None] * (n + 1)
    u_refs = [None] * n
    for i, ph in enumerate(phases):
        h = float(height_refs[i]["value"]) if i in height_refs else params.nominal_height
        h_w = float(height_refs[i]["weight"]) if i in height_refs else 0.0
        yaw = math.radians(float(yaw_refs[i]["value"])) if i in yaw_refs else 0.0
        yaw_w = float(yaw_refs[i]["weight"]) if i in yaw_refs else roll_pitch
        if i in feet_refs:
            fy = math.radians(float(feet_refs[i]["yaw"]))
            cz, sz = math.cos(fy), math.sin(fy)
            feet = x0.feet @ np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]]).T
            feet_w = float(feet_refs[i]["weight"])
        else:
            feet = x0.feet if yaw == 0.0 else x0.feet @ np.array(
                [[math.cos(yaw), -math.sin(yaw), 0.0],
                 [math.sin(yaw), math.cos(yaw), 0.0],
                 [0.0, 0.0, 1.0]]).T
            feet_w = 0.0
        weights.append(CostWeights(
            Q=_diag_weights(pos_xy=pos_xy, height=h_w, roll_pitch=roll_pitch,
                            yaw=yaw_w, vel=vel, feet=feet_w),
            R=_control_weights(force=force, rate=rate),
            w_kin=w_kin,
            w_fr=w_fr,
            mu=mu,
        ))
        x_ph = _ref_state(np.array([0.0, 0.0, h]), yaw, feet)
        u_ph = stance_force(params, ph.stance)
        for k in range(ph.start, ph.end):
            x_refs[k] = x_ph
            u_refs[k] = u_ph
    x_refs[n] = x_refs[n - 1]

    return TaskSpec(
        name=name,
        dt=dt,
        phases=phases,
        weights=tuple(weights),
        x_refs=tuple(x_refs),
        q_overlay=np.zeros((n + 1, NT)),
        u_refs=tuple(u_refs),
        f_max=f_max,
    )
