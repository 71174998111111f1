"""Box-constrained trajectory optimiser tolerant of infeasible warm starts.

Gauss-Newton dynamic programming over the knots.  Control box constraints
are solved per knot by a projected-Newton QP whose clamped coordinates are
frozen out of the feedback gain.  The rollout does not force the state
sequence to satisfy the dynamics: defects between rolled-out and stored
states are contracted by the line-search step length instead, so a full
step closes them completely.

The expected-improvement model used for step acceptance carries the defect
terms through two extra gradient recursions and is exact for affine
dynamics with quadratic costs; the oracle tests lean on that exactness.

States are opaque to the solver: a `Space` supplies the tangent dimension
and the integrate/difference pair, which lets the same machinery run both
the robot manifold and small Euclidean test problems.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class NotPositiveDefinite(Exception):
    """Free-subspace control Hessian lost positive definiteness."""


class ForwardPassDiverged(Exception):
    """Rollout state grew past the divergence guard."""


@dataclass(frozen=True, eq=False)
class Space:
    """Chart operations the solver needs from a state representation."""

    ndx: int
    integrate: Callable[[Any, np.ndarray], Any]
    difference: Callable[[Any, Any], np.ndarray]  # (x_ref, x) -> tangent at x
    norm: Callable[[Any], float]


def euclidean_space(n: int) -> Space:
    return Space(
        n,
        lambda x, dx: x + dx,
        lambda x_ref, x: x_ref - x,
        lambda x: float(np.linalg.norm(x)),
    )


@dataclass(frozen=True, eq=False)
class Knot:
    """One discrete stage: dynamics, cost, and control box bounds."""

    dt: float
    dynamics: Callable[[Any, np.ndarray], Any]
    dynamics_derivatives: Callable[[Any, np.ndarray], tuple]
    cost: Callable[[Any, np.ndarray], Any]  # object with value/l_x/l_u/l_xx/l_uu/l_xu
    u_lo: np.ndarray
    u_hi: np.ndarray


@dataclass(frozen=True, eq=False)
class Problem:
    space: Space
    x0: Any
    knots: Sequence[Knot]
    terminal_cost: Callable[[Any], tuple]  # (value, l_x, l_xx)
    nu: int

    def __post_init__(self):
        if len(self.knots) < 1:
            raise ValueError("a problem needs at least one knot")
        for k, knot in enumerate(self.knots):
            if np.any(knot.u_lo > knot.u_hi):
                raise ValueError(f"knot {k}: lower control bound exceeds upper bound")

    @property
    def horizon(self) -> int:
        return len(self.knots)


@dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 200
    mu_init: float = 1e-9
    mu_min: float = 1e-9
    mu_max: float = 1e9
    tol_cost: float = 1e-6
    tol_gap: float = 1e-9
    accept_ratio: float = 0.1
    # bound on realised worsening for defect-closing steps whose model
    # already predicts a cost increase
    accept_worsening: float = 2.0
    n_alphas: int = 11


@dataclass(frozen=True, eq=False)
class IterationRecord:
    iteration: int
    cost: float
    expected: float
    alpha: float
    reg: float
    gap_norm: float
    stop: float

    def as_dict(self):
        return {
            "iter": self.iteration,
            "cost": self.cost,
            "expected": self.expected,
            "alpha": self.alpha,
            "reg": self.reg,
            "gap_norm": self.gap_norm,
            "stop": self.stop,
        }


@dataclass(eq=False)
class SolverTrace:
    records: list = field(default_factory=list)

    def append(self, rec: IterationRecord) -> None:
        self.records.append(rec)

    def lines(self):
        for rec in self.records:
            yield json.dumps(rec.as_dict())


@dataclass(frozen=True, eq=False)
class Solution:
    xs: list
    us: list
    gains: list          # feedback matrices, one per knot
    feedforwards: list   # per-knot corrections
    converged: bool
    iterations: int


# ---------------------------------------------------------------------------
# Box-constrained QP on one knot's controls.


def box_qp(H, q, lo, hi, x_init=None, max_iter=100, tol=1e-12):
    """Minimise 1/2 x'Hx + q'x subject to lo <= x <= hi, projected Newton.

    Equality bounds are pinned and never enter the free set.  Coordinates
    sitting exactly on a bound with an inward-pointing gradient count as
    free.  Returns (x, free_mask); raises NotPositiveDefinite when the free
    block has no Cholesky factor.
    """
    n = q.size
    eq = (hi - lo) <= 1e-14
    x = np.clip(np.zeros(n) if x_init is None else np.asarray(x_init, dtype=float), lo, hi)
    x[eq] = lo[eq]
    free = ~eq
    for _ in range(max_iter):
        g = q + H @ x
        clamped = eq | ((x <= lo) & (g > 0.0)) | ((x >= hi) & (g < 0.0))
        free = ~clamped
        if not free.any():
            break
        if np.abs(g[free]).max() < tol:
            break
        Hff = H[np.ix_(free, free)]
        try:
            np.linalg.cholesky(Hff)
        except np.linalg.LinAlgError:
            raise NotPositiveDefinite("control Hessian free block is not positive definite")
        rhs = q[free] + H[np.ix_(free, clamped)] @ x[clamped]
        dx = np.zeros(n)
        dx[free] = -np.linalg.solve(Hff, rhs) - x[free]
        f0 = 0.5 * float(x @ H @ x) + float(q @ x)
        step = 1.0
        x_next = x
        for _ in range(20):
            cand = np.clip(x + step * dx, lo, hi)
            cand[eq] = lo[eq]
            fc = 0.5 * float(cand @ H @ cand) + float(q @ cand)
            if fc <= f0 + 1e-4 * float(g @ (cand - x)):
                x_next = cand
                break
            step *= 0.5
        if np.array_equal(x_next, x):
            break
        x = x_next
    return x, free


# ---------------------------------------------------------------------------
# Backward sweep.


def compute_gaps(problem: Problem, xs, us):
    """Defects of the stored trajectory: leading entry is the start-state
    mismatch, then one rollout defect per knot, each in the tangent of the
    stored next state."""
    diff = problem.space.difference
    gaps = [diff(problem.x0, xs[0])]
    for k, knot in enumerate(problem.knots):
        gaps.append(diff(knot.dynamics(xs[k], us[k]), xs[k + 1]))
    return gaps


def trajectory_cost(problem: Problem, xs, us) -> float:
    total = 0.0
    for k, knot in enumerate(problem.knots):
        total += knot.cost(xs[k], us[k]).value
    total += problem.terminal_cost(xs[-1])[0]
    return total


def _sym(M):
    return 0.5 * (M + M.T)


def backward_pass(problem: Problem, xs, us, mu_reg: float, gaps=None, pool=None):
    """One Gauss-Newton sweep.  Returns (gains, feedforwards, (d1, d2)).

    The value-gradient used in the stage model is shifted by the incoming
    defect, so stored-trajectory infeasibility is priced into every Q term.
    d1/d2 are the linear and quadratic coefficients of the predicted cost
    change as a function of the step length; two auxiliary gradient
    recursions keep them exact for affine-quadratic problems, defects
    included.  Raises NotPositiveDefinite for the caller to raise mu_reg.
    """
    N = problem.horizon
    if gaps is None:
        gaps = compute_gaps(problem, xs, us)
    if pool is None:
        evals = [_knot_eval(problem.knots[k], xs[k], us[k]) for k in range(N)]
    else:
        evals = list(pool.map(lambda k: _knot_eval(problem.knots[k], xs[k], us[k]), range(N)))

    _, Vx, Vxx = problem.terminal_cost(xs[-1])
    Vxx = _sym(np.asarray(Vxx, dtype=float))
    Vx = np.asarray(Vx, dtype=float)
    b0 = Vx.copy()          # gradient along the unmoved trajectory
    b1 = np.zeros_like(Vx)  # first-order-in-alpha gradient correction
    d1 = 0.0
    d2 = 0.0
    ks = [None] * N
    Ks = [None] * N
    for k in range(N - 1, -1, -1):
        fx, fu, ce = evals[k]
        gap = gaps[k + 1]
        Vx_hat = Vx + Vxx @ gap
        Qx = ce.l_x + fx.T @ Vx_hat
        Qu = ce.l_u + fu.T @ Vx_hat
        Qxx = _sym(ce.l_xx) + fx.T @ Vxx @ fx
        Quu = _sym(ce.l_uu) + fu.T @ Vxx @ fu + mu_reg * np.eye(problem.nu)
        Qux = ce.l_xu.T + fu.T @ Vxx @ fx
        lo = problem.knots[k].u_lo - us[k]
        hi = problem.knots[k].u_hi - us[k]
        kff, free = box_qp(Quu, Qu, lo, hi)
        K = np.zeros((problem.nu, problem.space.ndx))
        if free.any():
            K[free] = -np.linalg.solve(Quu[np.ix_(free, free)], Qux[free])
        ks[k] = kff
        Ks[k] = K

        # model coefficients, using the incoming value quantities
        luu = _sym(ce.l_uu)
        push = fu @ kff + gap
        d1 += float(ce.l_u @ kff) + float(b0 @ push)
        d2 += float(kff @ luu @ kff) + 2.0 * float(b1 @ push) + float(push @ Vxx @ push)
        A_cl = fx + fu @ K
        b1 = ce.l_xu @ kff + K.T @ (luu @ kff) + A_cl.T @ (b1 + Vxx @ push)
        b0 = ce.l_x + K.T @ ce.l_u + A_cl.T @ b0

        Vx = Qx + K.T @ (Quu @ kff + Qu) + Qux.T @ kff
        Vxx = _sym(Qxx + K.T @ Quu @ K + K.T @ Qux + Qux.T @ K)
    d1 += float(b0 @ gaps[0])
    d2 += 2.0 * float(b1 @ gaps[0]) + float(gaps[0] @ Vxx @ gaps[0])
    return Ks, ks, (d1, d2)


def _knot_eval(knot: Knot, x, u):
    fx, fu = knot.dynamics_derivatives(x, u)
    return fx, fu, knot.cost(x, u)


# ---------------------------------------------------------------------------
# Forward rollout.

_DIVERGE_LIMIT = 1e6


def forward_pass(problem: Problem, xs, us, gains, alpha: float, gaps=None):
    """Roll out the policy at step length alpha.

    Controls are the stored ones plus alpha times the feedforward plus
    feedback on the state deviation, clipped to the bounds.  Stored defects
    are not closed outright: each propagated state backs off the rollout by
    (1 - alpha) times the stored defect, so alpha = 1 removes them exactly.
    Returns (new xs, new us, cost); raises ForwardPassDiverged on blow-up.
    """
    Ks, ks = gains
    space = problem.space
    if gaps is None:
        gaps = compute_gaps(problem, xs, us)
    xs_new = [space.integrate(xs[0], alpha * gaps[0])]
    us_new = []
    cost = 0.0
    for k, knot in enumerate(problem.knots):
        dx = space.difference(xs_new[k], xs[k])
        u = np.clip(us[k] + alpha * ks[k] + Ks[k] @ dx, knot.u_lo, knot.u_hi)
        us_new.append(u)
        cost += knot.cost(xs_new[k], u).value
        x_next = space.integrate(knot.dynamics(xs_new[k], u), (alpha - 1.0) * gaps[k + 1])
        if not np.isfinite(cost) or space.norm(x_next) > _DIVERGE_LIMIT:
            raise ForwardPassDiverged(f"rollout diverged at knot {k}")
        xs_new.append(x_next)
    cost += problem.terminal_cost(xs_new[-1])[0]
    if not np.isfinite(cost):
        raise ForwardPassDiverged("non-finite terminal cost")
    return xs_new, us_new, cost


# ---------------------------------------------------------------------------
# Outer loop.


def _gap_norm(gaps) -> float:
    return max(float(np.abs(g).max()) for g in gaps)


def solve(problem: Problem, init, settings: SolverSettings | None = None, pool=None):
    """Iterate backward/forward passes until the cost stalls with no defects.

    `init` is an (xs, us) pair; the states need not satisfy the dynamics.
    Returns (Solution, SolverTrace).
    """
    s = settings or SolverSettings()
    xs = list(init[0])
    us = [
        np.clip(np.asarray(u, dtype=float), knot.u_lo, knot.u_hi)
        for u, knot in zip(init[1], problem.knots)
    ]
    if len(xs) != problem.horizon + 1 or len(us) != problem.horizon:
        raise ValueError("init shapes do not match the problem horizon")

    alphas = [2.0**-i for i in range(s.n_alphas)]
    mu = s.mu_init
    cost = trajectory_cost(problem, xs, us)
    trace = SolverTrace()
    Ks = [np.zeros((problem.nu, problem.space.ndx))] * problem.horizon
    ks = [np.zeros(problem.nu)] * problem.horizon
    converged = False
    iterations = 0

    for it in range(1, s.max_iterations + 1):
        iterations = it
        gaps = compute_gaps(problem, xs, us)
        gap_norm = _gap_norm(gaps)

        while True:
            try:
                Ks, ks, (d1, d2) = backward_pass(problem, xs, us, mu, gaps, pool)
                break
            except NotPositiveDefinite:
                if mu >= s.mu_max:
                    sol = Solution(xs, us, Ks, ks, False, it)
                    return sol, trace
                mu = min(mu * 10.0, s.mu_max)

        accepted = False
        for alpha in alphas:
            expected = alpha * d1 + 0.5 * alpha * alpha * d2
            try:
                xs_try, us_try, cost_try = forward_pass(problem, xs, us, (Ks, ks), alpha, gaps)
            except ForwardPassDiverged:
                continue
            actual = cost_try - cost
            if expected <= 0.0:
                ok = actual <= s.accept_ratio * expected
            else:
                # defect-closing step with a predicted cost increase
                ok = actual <= s.accept_worsening * expected
            if ok:
                xs, us = xs_try, us_try
                d_cost = cost - cost_try
                cost = cost_try
                if alpha == 1.0:
                    mu = max(mu / 10.0, s.mu_min)
                post_gaps = compute_gaps(problem, xs, us)
                gap_norm = _gap_norm(post_gaps)
                stop = abs(d_cost)
                trace.append(IterationRecord(it, cost, expected, alpha, mu, gap_norm, stop))
                if stop < s.tol_cost and gap_norm < s.tol_gap:
                    converged = True
                accepted = True
                break
        if not accepted:
            if mu >= s.mu_max:
                break
            mu = min(mu * 10.0, s.mu_max)
            trace.append(IterationRecord(it, cost, 0.0, 0.0, mu, gap_norm, float("inf")))
            continue
        if converged:
            break

    return Solution(xs, us, Ks, ks, converged, iterations), trace
