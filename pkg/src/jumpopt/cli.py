"""Command-line front end.

Subcommands: `solve` (run a task and export trajectory/trace/summary),
`check-derivatives` (finite-difference audit of every analytic derivative
family), `bench` (per-knot timing statistics for each dynamics backend)
and `export-plots` (per-quantity CSV series from a solved trajectory).

Exit codes: 0 success, 1 input error, 2 non-convergence, 3 derivative
check failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import centroidal as cn
from . import fddp, manifold as mf, tasks, trajio
from .cost import CostWeights, state_cost, total_cost
from .robot import (RobotConfigError, RobotParams, composite_inertia, hip_targets,
                    implicit_configuration, nominal_state)

_FD_EPS = 1e-6


# ---------------------------------------------------------------------------
# Derivative audit.


def _rel_err(analytic, numeric) -> float:
    scale = max(1.0, float(np.abs(numeric).max())) if np.size(numeric) else 1.0
    return float(np.abs(analytic - numeric).max()) / scale


def _fd_state(fn, x, rows):
    """Central differences of fn over the state tangent."""
    out = np.empty((rows, mf.NT))
    for j in range(mf.NT):
        e = np.zeros(mf.NT)
        e[j] = _FD_EPS
        hi = np.asarray(fn(mf.integrate(x, e)), dtype=float).ravel()
        lo = np.asarray(fn(mf.integrate(x, -e)), dtype=float).ravel()
        out[:, j] = (hi - lo) / (2.0 * _FD_EPS)
    return out


def _fd_vector(fn, u, rows):
    out = np.empty((rows, u.size))
    for j in range(u.size):
        e = np.zeros(u.size)
        e[j] = _FD_EPS
        hi = np.asarray(fn(u + e), dtype=float).ravel()
        lo = np.asarray(fn(u - e), dtype=float).ravel()
        out[:, j] = (hi - lo) / (2.0 * _FD_EPS)
    return out


def _sample_knot(params, rng):
    """Random state/control pair staying clear of penalty kinks."""
    x0 = nominal_state(params)
    ws = params.workspace
    while True:
        dx = np.concatenate([
            rng.normal(0.0, 0.05, 3),          # base position
            rng.normal(0.0, 0.15, 3),          # rotation
            rng.normal(0.0, 0.5, 6),           # velocities
            rng.normal(0.0, 0.05, 12),         # feet
        ])
        x = mf.integrate(x0, dx)
        radii = [float(np.linalg.norm(y)) for y in hip_targets(params, x)]
        margin = min(min(abs(r - (ws.r_min + ws.barrier_margin)),
                         abs(r - (ws.r_max - ws.barrier_margin))) for r in radii)
        if margin > 2e-3:
            break
    forces = np.zeros((4, 3))
    forces[:, 2] = rng.uniform(20.0, 200.0, 4)
    forces[:, 0] = rng.normal(0.0, 0.3, 4) * 0.7 * forces[:, 2]
    forces[:, 1] = rng.normal(0.0, 0.3, 4) * 0.7 * forces[:, 2]
    u = cn.Control(forces, rng.normal(0.0, 0.5, (4, 3)))
    return x, u


def run_derivative_check(params: RobotParams, seed: int = 0, samples: int = 100,
                         curvature: bool = True):
    """Compare every analytic derivative family against central finite
    differences.  Returns ({family: (max_rel_err, threshold)}, all_ok).

    `curvature` feeds through to the reference-tracking Hessian; disabling
    it exists so the audit itself can be shown to catch the missing term.
    """
    rng = np.random.default_rng(seed)
    errs = {
        "manifold.difference_jacobian": [0.0, 1e-6],
        "manifold.difference_hessian": [0.0, 1e-5],
        "dynamics.fx": [0.0, 1e-5],
        "dynamics.fu": [0.0, 1e-5],
        "state_cost.l_x": [0.0, 1e-5],
        "state_cost.l_xx": [0.0, 1e-5],
        "cost.l_x": [0.0, 1e-5],
        "cost.l_u": [0.0, 1e-5],
        "cost.l_xx": [0.0, 1e-5],
        "cost.l_uu": [0.0, 1e-5],
        "inertia.d_inertia": [0.0, 1e-5],
        "inertia.d_com": [0.0, 1e-5],
    }

    def note(family, err):
        errs[family][0] = max(errs[family][0], err)

    weights = CostWeights(
        Q=np.full(mf.NT, 2.0), R=np.full(cn.NU, 1e-3),
        w_kin=100.0, w_fr=10.0, mu=0.7,
    )
    stance = (True, True, False, True)
    dt = 0.01

    for _ in range(samples):
        x, u = _sample_knot(params, rng)
        x_ref = mf.integrate(x, rng.normal(0.0, 0.3, mf.NT))
        u_ref = cn.Control.from_vector(u.as_vector() + rng.normal(0.0, 5.0, cn.NU))

        J = mf.difference_jacobian(x_ref, x)
        note("manifold.difference_jacobian",
             _rel_err(J, _fd_state(lambda xx: mf.difference(x_ref, xx), x, mf.NT)))
        w = rng.normal(0.0, 1.0, mf.NT)
        H = mf.difference_hessian(x_ref, x).contract(w)
        note("manifold.difference_hessian",
             _rel_err(H, _fd_state(
                 lambda xx: mf.difference_jacobian(x_ref, xx).T @ w, x, mf.NT)))

        der = cn.step_derivatives(params, x, u, dt)
        base_next = cn.step(params, x, u, dt)
        note("dynamics.fx", _rel_err(der.fx, _fd_state(
            lambda xx: mf.difference(cn.step(params, xx, u, dt), base_next), x, mf.NT)))
        note("dynamics.fu", _rel_err(der.fu, _fd_vector(
            lambda uu: mf.difference(cn.step(params, x, cn.Control.from_vector(uu), dt),
                                     base_next),
            u.as_vector(), mf.NT)))

        sv, s_lx, s_lxx = state_cost(x_ref, x, weights.Q, curvature=curvature)
        note("state_cost.l_x", _rel_err(s_lx, _fd_state(
            lambda xx: state_cost(x_ref, xx, weights.Q)[0], x, 1)))
        note("state_cost.l_xx", _rel_err(s_lxx, _fd_state(
            lambda xx: state_cost(x_ref, xx, weights.Q)[1], x, mf.NT)))

        ce = total_cost(params, weights, x_ref, u_ref, stance, x, u, curvature=curvature)
        note("cost.l_x", _rel_err(ce.l_x, _fd_state(
            lambda xx: total_cost(params, weights, x_ref, u_ref, stance, xx, u).value, x, 1)))
        note("cost.l_u", _rel_err(ce.l_u, _fd_vector(
            lambda uu: total_cost(params, weights, x_ref, u_ref, stance, x,
                                  cn.Control.from_vector(uu)).value, u.as_vector(), 1)))
        note("cost.l_xx", _rel_err(ce.l_xx, _fd_state(
            lambda xx: total_cost(params, weights, x_ref, u_ref, stance, xx, u).l_x, x, mf.NT)))
        note("cost.l_uu", _rel_err(ce.l_uu, _fd_vector(
            lambda uu: total_cost(params, weights, x_ref, u_ref, stance, x,
                                  cn.Control.from_vector(uu)).l_u, u.as_vector(), cn.NU)))

        q_cfg = implicit_configuration(params, x)
        res = composite_inertia(params, q_cfg)
        dI = np.empty((3, 3, 12))
        dc = np.empty((3, 12))
        for j in range(12):
            e = np.zeros(12)
            e[j] = _FD_EPS
            hi = composite_inertia(params, q_cfg + e)
            lo = composite_inertia(params, q_cfg - e)
            dI[:, :, j] = (hi.inertia - lo.inertia) / (2.0 * _FD_EPS)
            dc[:, j] = (hi.com - lo.com) / (2.0 * _FD_EPS)
        note("inertia.d_inertia", _rel_err(res.dI_dq, dI))
        note("inertia.d_com", _rel_err(res.dcom_dq, dc))

    ok = all(err <= tol for err, tol in errs.values())
    return {k: tuple(v) for k, v in errs.items()}, ok


# ---------------------------------------------------------------------------
# Commands.


def _load_params(args) -> RobotParams:
    if args.robot is None:
        return RobotParams.default()
    return RobotParams.from_file(args.robot)


def _load_task(params, args) -> tasks.TaskSpec:
    name = args.task
    if name in tasks.BUILTIN_TASKS:
        return tasks.BUILTIN_TASKS[name](params)
    if not os.path.exists(name):
        raise tasks.InvalidSpecError(
            f"task '{name}' is neither a builtin ({', '.join(sorted(tasks.BUILTIN_TASKS))}) "
            f"nor a file"
        )
    return tasks.load_task(params, name)


def cmd_solve(args) -> int:
    try:
        params = _load_params(args)
        spec = _load_task(params, args)
    except (RobotConfigError, tasks.InvalidSpecError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    problem = tasks.build_problem(params, spec)
    init = tasks.default_init(params, spec)
    settings = fddp.SolverSettings(max_iterations=args.max_iter)
    pool = ThreadPoolExecutor(max_workers=os.cpu_count()) if args.parallel else None
    t0 = time.perf_counter()
    try:
        sol, trace = fddp.solve(problem, init, settings, pool)
    finally:
        if pool is not None:
            pool.shutdown()
    wall = time.perf_counter() - t0

    dts = [knot.dt for knot in problem.knots]
    trajio.write_trajectory(os.path.join(args.out, "trajectory.csv"), params, dts,
                            sol.xs, sol.us)
    with open(os.path.join(args.out, "trace.jsonl"), "w") as f:
        for line in trace.lines():
            f.write(line + "\n")
    gaps = fddp.compute_gaps(problem, sol.xs, sol.us)
    summary = {
        "task": spec.name,
        "knots": spec.horizon,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "final_cost": fddp.trajectory_cost(problem, sol.xs, sol.us),
        "gap_norm": max(float(np.abs(g).max()) for g in gaps),
        "wall_time_s": wall,
    }
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"{spec.name}: {'converged' if sol.converged else 'NOT converged'} "
          f"in {sol.iterations} iterations, cost {summary['final_cost']:.6g}, "
          f"gap {summary['gap_norm']:.2e}, {wall:.1f} s")
    return 0 if sol.converged else 2


def cmd_check_derivatives(args) -> int:
    try:
        params = _load_params(args)
    except RobotConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    report, ok = run_derivative_check(params, seed=args.seed)
    for family, (err, tol) in report.items():
        status = "ok  " if err <= tol else "FAIL"
        print(f"{status} {family:32s} max rel err {err:.3e}  (tol {tol:.0e})")
    if not ok:
        failing = [f for f, (err, tol) in report.items() if err > tol]
        print(f"derivative check failed: {', '.join(failing)}", file=sys.stderr)
        return 3
    return 0


def cmd_bench(args) -> int:
    try:
        params = _load_params(args)
    except RobotConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.seed)
    knots = [_sample_knot(params, rng) for _ in range(1000)]
    dt = 0.01
    for backend in cn.available_backends():
        previous = cn.active_backend()
        cn.set_backend(backend)
        try:
            # warm-up, and a value checksum so runs are comparable
            checksum = 0.0
            for x, u in knots[:10]:
                checksum += float(np.sum(cn.step(params, x, u, dt).as_vector()))
            calc_ns = np.empty(len(knots))
            for i, (x, u) in enumerate(knots):
                t0 = time.perf_counter_ns()
                cn.step(params, x, u, dt)
                calc_ns[i] = time.perf_counter_ns() - t0
            diff_ns = np.empty(len(knots))
            for i, (x, u) in enumerate(knots):
                t0 = time.perf_counter_ns()
                cn.step_derivatives(params, x, u, dt)
                diff_ns[i] = time.perf_counter_ns() - t0
        finally:
            cn.set_backend(previous)
        print(f"backend {backend}: calc {calc_ns.mean() / 1e3:.2f} +/- "
              f"{calc_ns.std() / 1e3:.2f} us, calcDiff {diff_ns.mean() / 1e3:.2f} +/- "
              f"{diff_ns.std() / 1e3:.2f} us  (1000 samples, checksum {checksum:.9g})")
    return 0


def cmd_export_plots(args) -> int:
    traj_path = os.path.join(args.out, "trajectory.csv")
    if not os.path.exists(traj_path):
        print(f"error: no trajectory at {traj_path}; run solve first", file=sys.stderr)
        return 1
    data = trajio.read_trajectory(traj_path)
    n1 = len(data.xs)

    def series(name, header, rows):
        with open(os.path.join(args.out, name), "w") as f:
            f.write(",".join(header) + "\n")
            for row in rows:
                f.write(",".join(f"{v:.17g}" for v in row) + "\n")

    series("base_height.csv", ["t", "z"],
           [(data.t[k], data.xs[k].pose.p[2]) for k in range(n1)])
    series("yaw.csv", ["t", "yaw_deg"],
           [(data.t[k], math.degrees(mf.log_so3(data.xs[k].pose.q)[2])) for k in range(n1)])
    series("foot_height.csv", ["t"] + [f"z_{leg}" for leg in trajio.LEG_NAMES],
           [np.concatenate([[data.t[k]], data.xs[k].feet[:, 2]]) for k in range(n1)])
    series("force_z.csv", ["t"] + [f"fz_{leg}" for leg in trajio.LEG_NAMES],
           [np.concatenate([[data.t[k]], data.us[k].forces[:, 2]])
            for k in range(n1 - 1)])
    print(f"wrote plot series to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="jumpopt",
        description="Plan agile quadruped manoeuvres in task space.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, task=False):
        p.add_argument("--robot", help="robot description file (default: packaged 55 kg quadruped)")
        p.add_argument("--out", default="out", help="output directory (default: ./out)")
        p.add_argument("--seed", type=int, default=0, help="seed for randomised commands")
        if task:
            p.add_argument("--task", required=True,
                           help="builtin task name or task file path")
            p.add_argument("--max-iter", type=int, default=200, dest="max_iter")
            p.add_argument("--parallel", action="store_true",
                           help="evaluate per-knot derivatives in a thread pool")

    common(sub.add_parser("solve", help="solve a task and export the trajectory"), task=True)
    common(sub.add_parser("check-derivatives", help="finite-difference derivative audit"))
    common(sub.add_parser("bench", help="per-knot timing per dynamics backend"))
    common(sub.add_parser("export-plots", help="per-quantity CSV series from a solved task"))

    args = parser.parse_args(argv)
    if args.command == "solve":
        return cmd_solve(args)
    if args.command == "check-derivatives":
        return cmd_check_derivatives(args)
    if args.command == "bench":
        return cmd_bench(args)
    return cmd_export_plots(args)


if __name__ == "__main__":
    sys.exit(main())
