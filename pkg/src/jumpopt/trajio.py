"""Trajectory serialisation.

One CSV row per knot (plus the terminal state): time, base pose, twist,
footholds, contact forces, foothold rates and the implicit joint angles.
Values are printed with 17 significant digits so float64 round-trips
bitwise; reading does not renormalise quaternions for the same reason.
The terminal row carries zero controls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import centroidal as cn
from .manifold import Pose, State
from .robot import LEG_NAMES, RobotParams, implicit_configuration

_JOINTS = ("haa", "hfe", "kfe")

COLUMNS = (
    ["t", "p_x", "p_y", "p_z", "q_w", "q_x", "q_y", "q_z",
     "v_x", "v_y", "v_z", "w_x", "w_y", "w_z"]
    + [f"r_{leg}_{ax}" for leg in LEG_NAMES for ax in "xyz"]
    + [f"F_{leg}_{ax}" for leg in LEG_NAMES for ax in "xyz"]
    + [f"rd_{leg}_{ax}" for leg in LEG_NAMES for ax in "xyz"]
    + [f"q_{leg}_{joint}" for leg in LEG_NAMES for joint in _JOINTS]
)


@dataclass(frozen=True, eq=False)
class TrajectoryData:
    t: np.ndarray        # (N + 1,)
    xs: list             # N + 1 states
    us: list             # N controls
    q_cfg: np.ndarray    # (N + 1, 12)


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_trajectory(path, params: RobotParams, dts, xs, us) -> None:
    """`dts` holds the N knot durations; `us` may be Control objects or
    24-vectors."""
    n = len(us)
    if len(xs) != n + 1 or len(dts) != n:
        raise ValueError("trajectory lengths are inconsistent")
    t = np.concatenate([[0.0], np.cumsum(np.asarray(dts, dtype=float))])
    with open(path, "w") as f:
        f.write(",".join(COLUMNS) + "\n")
        for k, x in enumerate(xs):
            if k < n:
                u = us[k]
                u_vec = u.as_vector() if isinstance(u, cn.Control) else np.asarray(u, float)
                u_blocks = u_vec.reshape(4, 6)
                forces = u_blocks[:, 0:3].ravel()
                rates = u_blocks[:, 3:6].ravel()
            else:
                forces = np.zeros(12)
                rates = np.zeros(12)
            q_cfg = implicit_configuration(params, x)
            row = np.concatenate([
                [t[k]], x.pose.p, x.pose.q, x.v_b, x.omega,
                x.feet.ravel(), forces, rates, q_cfg,
            ])
            f.write(",".join(_fmt(v) for v in row) + "\n")


def read_trajectory(path) -> TrajectoryData:
    with open(path) as f:
        header = f.readline().strip().split(",")
        if header != COLUMNS:
            raise ValueError(f"{path}: unexpected trajectory header")
        rows = [np.array([float(tok) for tok in line.strip().split(",")])
                for line in f if line.strip()]
    if not rows:
        raise ValueError(f"{path}: empty trajectory")
    t = np.array([r[0] for r in rows])
    xs = []
    us = []
    q_cfg = np.empty((len(rows), 12))
    for k, r in enumerate(rows):
        pose = object.__new__(Pose)
        object.__setattr__(pose, "p", r[1:4].copy())
        object.__setattr__(pose, "q", r[4:8].copy())
        xs.append(State(pose, r[8:11], r[11:14], r[14:26].reshape(4, 3)))
        if k < len(rows) - 1:
            forces = r[26:38].reshape(4, 3)
            rates = r[38:50].reshape(4, 3)
            us.append(cn.Control(forces, rates))
        q_cfg[k] = r[50:62]
    return TrajectoryData(t, xs, us, q_cfg)
