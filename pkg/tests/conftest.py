"""Session fixtures: the default robot and solved builtin tasks.

Solving the jump tasks dominates suite runtime, so each task is solved once
per session and shared between the behavioural tests and the acceptance
suite.  Fixtures return (spec, problem, solution, trace, wall_seconds).
"""

import time

import pytest

from jumpopt import fddp, tasks
from jumpopt.robot import RobotParams


@pytest.fixture(scope="session")
def params():
    return RobotParams.default()


def _solve(params, spec):
    problem = tasks.build_problem(params, spec)
    init = tasks.default_init(params, spec)
    t0 = time.perf_counter()
    solution, trace = fddp.solve(problem, init)
    wall = time.perf_counter() - t0
    return spec, problem, solution, trace, wall


@pytest.fixture(scope="session")
def standing_solved(params):
    return _solve(params, tasks.standing_task(params))


@pytest.fixture(scope="session")
def lemniscate_solved(params):
    return _solve(params, tasks.lemniscate_task(params))


@pytest.fixture(scope="session")
def squat_solved(params):
    return _solve(params, tasks.squat_jump_task(params))


@pytest.fixture(scope="session")
def rot_solved(params):
    return _solve(params, tasks.rotational_jump_task(params))


@pytest.fixture(scope="session")
def rot_mirror_solved(params):
    return _solve(params, tasks.rotational_jump_task(params, yaw_deg=-40.0))
