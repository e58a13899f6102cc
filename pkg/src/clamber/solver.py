"""Homotopy solver for the contact-implicit transition NLP.

The nonsmooth contact logic enters the NLP as relaxed product
constraints; this module drives that relaxation down a fixed schedule,
solving each stage with an augmented Lagrangian outer loop around a
bound-constrained quasi-Newton inner minimizer and warm-starting every
stage from the previous one.  The very first guess comes from a relaxed
problem with the complementarity-type families removed, which is cheap
to solve and lands in a sensible basin.

Certification is external by design: a result is labeled Optimal only
when the formulation module's independent residual recheck passes at
the requested tolerance.  Solver internals are never the oracle.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np
from scipy.optimize import minimize

from .formulation import (
    NlpInstance,
    PlanProblem,
    ResidualReport,
    RoundState,
    assemble,
    candidate_pairs,
    residual_report,
)
from .kinematics import skew
from .scene import signed_distance, surface_normal
from .verify import AmbiguousContact, label_sequence

STATUSES = ("Optimal", "Feasible", "Infeasible", "IterationLimit", "TimeLimit")
_STATUS_RANK = {s: r for r, s in enumerate(STATUSES)}
WARM_FAMILIES = frozenset({"complementarity", "switchability"})


@dataclass(frozen=True)
class SolverOptions:
    """Knobs for the homotopy and its augmented Lagrangian stages.

    ``complementarity_schedule`` lists the relaxation values to visit,
    strictly decreasing, ending at the value the final plan must meet
    (normally zero).  ``max_outer_iterations`` is the total budget of
    outer multiplier/penalty updates across all stages.
    """

    max_outer_iterations: int = 60
    kkt_tolerance: float = 1e-4
    complementarity_schedule: tuple = (1e-1, 1e-2, 1e-3, 0.0)
    penalty_growth: float = 10.0
    multistart_count: int = 1
    rng_seed: int = 0
    time_budget: float = 120.0

    def __post_init__(self):
        object.__setattr__(
            self,
            "complementarity_schedule",
            tuple(float(r) for r in self.complementarity_schedule),
        )
        sched = self.complementarity_schedule
        if not sched:
            raise ValueError("complementarity_schedule must be nonempty")
        if any(a <= b for a, b in zip(sched, sched[1:])):
            raise ValueError("complementarity_schedule must be strictly decreasing")
        if sched[-1] < 0:
            raise ValueError("final relaxation must be nonnegative")
        if self.kkt_tolerance <= 0:
            raise ValueError("kkt_tolerance must be positive")
        if self.penalty_growth <= 1:
            raise ValueError("penalty_growth must exceed 1")
        if self.max_outer_iterations < 1 or self.multistart_count < 1:
            raise ValueError("iteration and multistart counts must be at least 1")
        if self.time_budget <= 0:
            raise ValueError("time_budget must be positive")


@dataclass(frozen=True)
class SolveResult:
    """One solve's outcome, with externally recomputed residuals.

    ``problem`` rides along so downstream consumers (labeling,
    trajectory expansion, file output) need no separate handle.
    """

    status: str
    rounds: tuple
    objective: float
    residuals: ResidualReport
    iterations: int
    wall_time: float
    start_index: int
    problem: PlanProblem

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        object.__setattr__(self, "rounds", tuple(self.rounds))


def _al_minimize(
    inst: NlpInstance,
    x0: np.ndarray,
    *,
    tol: float,
    max_outer: int,
    penalty_growth: float,
    deadline: float,
    log: TextIO | None = None,
    tag: str = "",
    lam: np.ndarray | None = None,
    mu: np.ndarray | None = None,
    rho: float = 10.0,
    inner_maxiter: int = 150,
    fixed: np.ndarray | None = None,
):
    """Augmented Lagrangian loop on one instance.

    Returns ``(x, lam, mu, outer_used, viol, hit_time, rho)``.  Equality
    multipliers ``lam`` and inequality multipliers ``mu`` (Rockafellar
    form: penalty active only where ``mu + rho c > 0``) can be warm
    started from a previous stage of the same instance shape, as can the
    penalty weight ``rho``.  The best iterate by constraint violation is
    kept, so a late inner-solver failure cannot discard earlier progress;
    three consecutive outer iterations without measurable improvement end
    the loop early rather than growing ``rho`` into useless territory.
    Variables flagged in the boolean mask ``fixed`` are frozen at their
    ``x0`` values: the inner solvers see a zero gradient and an identity
    Hessian block there, so they never move them.
    """
    lb, ub = inst.lb, inst.ub
    if fixed is not None:
        lb, ub = lb.copy(), ub.copy()
        pin = np.clip(np.asarray(x0, dtype=float)[fixed], lb[fixed], ub[fixed])
        lb[fixed] = ub[fixed] = pin
    x = np.clip(np.asarray(x0, dtype=float), lb, ub)
    c_eq, _, c_in, _ = inst.constraint_eval(x)
    lam = np.zeros(c_eq.size) if lam is None else np.asarray(lam, dtype=float)
    mu = np.zeros(c_in.size) if mu is None else np.asarray(mu, dtype=float)
    bounds = list(zip(lb, ub))
    hit_time = False
    viol = viol_prev = np.inf
    used = 0
    best = None  # (viol, merit, x, lam, mu)
    stalled = 0

    for it in range(1, max_outer + 1):
        used = it

        def al(xv, rho=rho, lam=lam, mu=mu):
            f, g = inst.objective_and_grad(xv)
            c_eq, J_eq, c_in, J_in = inst.constraint_eval(xv)
            val, grad = f, g
            if c_eq.size:
                y = lam + rho * c_eq
                val += 0.5 / rho * (y @ y - lam @ lam)
                grad = grad + J_eq.T @ y
            if c_in.size:
                z = np.maximum(0.0, mu + rho * c_in)
                val += 0.5 / rho * (z @ z - mu @ mu)
                grad = grad + J_in.T @ z
            if fixed is not None:
                grad = np.where(fixed, 0.0, grad)
            if not np.isfinite(val):
                return 1e20, grad
            return val, grad

        # early outers only need a rough minimizer for the multiplier
        # updates to make sense; the gradient target tightens as the
        # iterate approaches feasibility
        gtol = float(np.clip(0.05 * min(viol_prev, 1.0), 1e-8, 1e-4))
        res = minimize(
            al,
            x,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={
                "maxiter": inner_maxiter,
                "maxcor": 30,
                "maxls": 40,
                "ftol": 1e-15,
                "gtol": gtol,
            },
        )
        x = np.clip(res.x, lb, ub)
        c_eq, _, c_in, _ = inst.constraint_eval(x)
        viol = max(
            float(np.max(np.abs(c_eq))) if c_eq.size else 0.0,
            float(np.max(np.maximum(c_in, 0.0))) if c_in.size else 0.0,
        )
        if log is not None:
            log.write(
                f"[{tag}] outer {it}: relax={inst.relax:g} rho={rho:g} "
                f"merit={res.fun:.6g} maxviol={viol:.3e} "
                f"inner={res.nit}it\n"
            )
        if best is None or viol < 0.999 * best[0]:
            best = (viol, float(res.fun), x, lam.copy(), mu.copy())
            stalled = 0
        else:
            stalled += 1
        # first-order multiplier update every outer iteration, with growth
        # of the penalty whenever feasibility fails to halve
        lam = np.clip(lam + rho * c_eq, -1e10, 1e10)
        mu = np.clip(mu + rho * c_in, 0.0, 1e10)
        if viol <= tol:
            break
        if viol > 0.5 * viol_prev:
            rho *= penalty_growth
            if rho > 1e12 or stalled >= 3:
                break  # feasibility restoration stalled
        viol_prev = viol
        if time.monotonic() > deadline:
            hit_time = True
            break
    if best is not None and best[0] < viol:
        viol, _, x, lam, mu = best
    return x, lam, mu, used, viol, hit_time, rho


def _project_cone(f: np.ndarray, n: np.ndarray, aperture: float) -> np.ndarray:
    """Exact Euclidean projection onto the cone |f_t| <= aperture * f_z."""
    fz = float(n @ f)
    ft = f - fz * n
    t = float(np.linalg.norm(ft))
    if t <= aperture * fz:
        return f
    if aperture * t <= -fz:
        return np.zeros(3)
    fz_new = (fz + aperture * t) / (1.0 + aperture * aperture)
    if t < 1e-12:
        return fz_new * n
    return fz_new * n + (aperture * fz_new / t) * ft


def _polish_forces(problem: PlanProblem, state: RoundState) -> RoundState:
    """Put forces exactly inside their cones without losing equilibrium.

    The squared cone constraint the NLP optimizes is loose near the cone
    vertex, so nearly-unloaded pairs can finish a solve slightly outside
    in linear terms.  Project every force onto its scaled cone, then
    restore force/moment balance with a least-squares correction spread
    over pairs that have at least 1 N of tangential slack to absorb it.
    """
    scene = problem.scene
    pairs = candidate_pairs(scene)
    m = len(pairs)
    force = state.force.copy()
    normals = np.zeros((m, 3))
    apertures = np.zeros(m)
    for k, (i, s) in enumerate(pairs):
        surf = scene.surfaces[s]
        normals[k] = surface_normal(surf, state.toe[i])
        apertures[k] = surf.friction / problem.s_mu if problem.s_mu > 0 else np.inf

    A = np.zeros((6, 3 * m))
    for k, (i, _) in enumerate(pairs):
        A[0:3, 3 * k : 3 * k + 3] = np.eye(3)
        A[3:6, 3 * k : 3 * k + 3] = skew(state.toe[i] - state.com)
    b = np.concatenate([-problem.robot.mass * scene.gravity, np.zeros(3)])

    for _ in range(3):
        for k in range(m):
            if np.isfinite(apertures[k]):
                force[k] = _project_cone(force[k], normals[k], apertures[k])
        r = b - A @ force.ravel()
        if np.max(np.abs(r)) < 1e-10:
            break
        slack = np.array(
            [
                apertures[k] * (normals[k] @ force[k])
                - np.linalg.norm(force[k] - (normals[k] @ force[k]) * normals[k])
                if np.isfinite(apertures[k])
                else np.inf
                for k in range(m)
            ]
        )
        big = np.flatnonzero(slack > 1.0)
        if big.size == 0:
            big = np.arange(m)
        cols = np.concatenate([np.arange(3 * k, 3 * k + 3) for k in big])
        delta, *_ = np.linalg.lstsq(A[:, cols], r, rcond=None)
        flat = force.ravel()
        flat[cols] += delta
        force = flat.reshape(m, 3)
    return RoundState(
        com=state.com,
        body_euler=state.body_euler,
        toe=state.toe,
        force=force,
        joint_angles=state.joint_angles,
    )


def _interpolated_guess(
    problem: PlanProblem, rng_seed: int
) -> tuple[list[RoundState], np.ndarray]:
    """Straight-line toe interpolation toward the targets, with jitter.

    Each leg walks its line at a seeded pace: the round where it reaches
    the target is drawn per leg, so different seeds propose different
    support patterns (which legs are still planted while others travel)
    and the downstream solves land in different local minima.  Legs still
    in flight at a round are marked in the returned ``airborne`` boolean
    array of shape (rounds, n_legs) and carry no force in the guess; the
    grounded legs split the robot's weight along their nearest candidate
    surface normals so the guess is roughly balanced.  Joint angles, when
    present, are carried from the initial stance.
    """
    rng = np.random.default_rng(rng_seed)
    stance = problem.initial_stance
    robot, scene = problem.robot, problem.scene
    pairs = candidate_pairs(scene)
    weight = robot.mass * float(np.linalg.norm(scene.gravity))
    travel = np.linalg.norm(problem.targets.toe - stance.toe, axis=1)
    arrive = rng.integers(1, problem.rounds + 1, size=robot.n_legs)
    airborne = np.zeros((problem.rounds, robot.n_legs), dtype=bool)
    rounds = []
    for j in range(1, problem.rounds + 1):
        frac = np.minimum(1.0, j / arrive)
        airborne[j - 1] = (arrive > j) & (travel > 1e-2)
        toe = stance.toe + frac[:, None] * (problem.targets.toe - stance.toe)
        toe = toe + rng.uniform(-0.02, 0.02, size=toe.shape)
        t = j / problem.rounds
        if problem.targets.body_position is not None:
            com = stance.com + t * (problem.targets.body_position - stance.com)
        else:
            com = stance.com + (toe - stance.toe).mean(axis=0)
        com = com + rng.uniform(-0.01, 0.01, size=3)
        if problem.targets.body_euler is not None:
            euler = stance.body_euler + t * (
                problem.targets.body_euler - stance.body_euler
            )
        else:
            euler = stance.body_euler.copy()
        force = np.zeros((len(pairs), 3))
        loaded = np.flatnonzero(~airborne[j - 1])
        for i in loaded:
            ks = [k for k, (li, _) in enumerate(pairs) if li == i]
            dists = [
                abs(signed_distance(scene.surfaces[pairs[k][1]], toe[i])) for k in ks
            ]
            k_near = ks[int(np.argmin(dists))]
            n = surface_normal(scene.surfaces[pairs[k_near][1]], toe[i])
            force[k_near] = weight / max(loaded.size, 1) * n
        rounds.append(
            RoundState(
                com=com,
                body_euler=euler,
                toe=toe,
                force=force,
                joint_angles=stance.joint_angles,
            )
        )
    return rounds, airborne


def _airborne_force_mask(inst: NlpInstance, airborne: np.ndarray) -> np.ndarray | None:
    """Boolean mask over the variable vector pinning in-flight legs' forces."""
    pairs = candidate_pairs(inst.problem.scene)
    fixed = np.zeros(inst.layout.n_vars, dtype=bool)
    for j in range(1, inst.layout.rounds + 1):
        for k, (i, _) in enumerate(pairs):
            if airborne[j - 1, i]:
                fixed[inst.layout.force(j, k)] = True
    return fixed if fixed.any() else None


def warm_start(
    problem: PlanProblem,
    rng_seed: int = 0,
    *,
    time_budget: float = 30.0,
    log: TextIO | None = None,
    return_airborne: bool = False,
):
    """Initial guess from the NLP without its complementarity families.

    Removing complementarity and switchability leaves a smooth, well
    behaved problem whose solution balances forces inside the cones and
    walks the toes toward their targets.  Legs the interpolated guess has
    in flight at a round keep zero force there: with complementarity gone
    nothing else stops a toe hanging in mid-air from "pushing", and
    letting it would collapse every seed onto the same all-legs-loaded
    solution.  If the solve fails for any reason the raw interpolated
    guess is returned instead.

    With ``return_airborne`` the per-round in-flight mask of the seeded
    guess is returned alongside the states, so a caller can keep the
    seed's support pattern alive a little longer.
    """
    guess, airborne = _interpolated_guess(problem, rng_seed)
    try:
        inst = assemble(problem).without_families(WARM_FAMILIES)
        fixed = _airborne_force_mask(inst, airborne)
        x0 = inst.to_x(guess)
        if fixed is not None:
            x0[fixed] = 0.0
        # 1e-4 here is enough: the force polish below restores exact cone
        # membership and equilibrium much tighter than the AL would
        x, _, _, _, viol, _, _ = _al_minimize(
            inst,
            x0,
            tol=1e-4,
            max_outer=20,
            penalty_growth=10.0,
            deadline=time.monotonic() + time_budget,
            log=log,
            tag="warm",
            fixed=fixed,
        )
        states = [_polish_forces(problem, st) for st in inst.from_x(x)]
    except Exception:
        states = guess
    return (states, airborne) if return_airborne else states


def solve(
    problem: PlanProblem,
    options: SolverOptions | None = None,
    log: TextIO | None = None,
) -> SolveResult:
    """Plan a transition: warm start, then walk the relaxation schedule.

    The returned status reflects the formulation module's recheck at the
    schedule's final relaxation: Optimal within ``kkt_tolerance``,
    Feasible within 100x of it, otherwise Infeasible unless the budget
    ran out first (TimeLimit / IterationLimit).
    """
    options = SolverOptions() if options is None else options
    return _solve_single(problem, options, options.rng_seed, 0, log)


def _solve_single(
    problem: PlanProblem,
    options: SolverOptions,
    seed: int,
    start_index: int,
    log: TextIO | None = None,
) -> SolveResult:
    t0 = time.monotonic()
    deadline = t0 + options.time_budget
    base = assemble(problem)
    guess, airborne = warm_start(
        problem,
        seed,
        time_budget=0.5 * options.time_budget,
        log=log,
        return_airborne=True,
    )
    x = np.clip(base.to_x(guess), base.lb, base.ub)
    # the seed's in-flight legs stay unloaded through the relaxed stages;
    # support patterns sit in a nearly flat valley of the force cost, so an
    # unpinned relaxed stage drifts every start into the same all-loaded
    # pattern.  The exact final stage runs free
    stage_fixed = _airborne_force_mask(base, airborne)

    lam = mu = None
    iterations = 0
    hit_time = False
    rho = 10.0
    schedule = options.complementarity_schedule
    for pos, relax in enumerate(schedule):
        remaining = options.max_outer_iterations - iterations
        if remaining <= 0:
            break
        inst = base.with_relax(relax)
        # the last stage aims well below the acceptance tolerance so the
        # external recheck keeps a margin
        stage_tol = (
            0.3 * options.kkt_tolerance
            if pos == len(schedule) - 1
            else options.kkt_tolerance
        )
        x, lam, mu, used, _, hit_time, rho_end = _al_minimize(
            inst,
            x,
            tol=stage_tol,
            max_outer=remaining,
            penalty_growth=options.penalty_growth,
            deadline=deadline,
            log=log,
            tag=f"stage relax={relax:g}",
            lam=lam,
            mu=mu,
            rho=rho,
            fixed=stage_fixed if pos < len(schedule) - 1 else None,
        )
        iterations += used
        # hand the next stage a damped version of the penalty weight so
        # tightening the relaxation does not let the objective pull the
        # iterate far out of feasibility before pressure rebuilds
        rho = min(max(100.0, 0.1 * rho_end), 1e6)
        if hit_time:
            break

    rounds = base.from_x(x)
    report = residual_report(
        problem, rounds, relax=options.complementarity_schedule[-1]
    )
    maxv = report.max_violation
    if maxv <= options.kkt_tolerance:
        status = "Optimal"
    elif maxv <= 100.0 * options.kkt_tolerance:
        status = "Feasible"
    elif hit_time:
        status = "TimeLimit"
    elif iterations >= options.max_outer_iterations:
        status = "IterationLimit"
    else:
        status = "Infeasible"
    return SolveResult(
        status=status,
        rounds=tuple(rounds),
        objective=base.objective_value(x),
        residuals=report,
        iterations=iterations,
        wall_time=time.monotonic() - t0,
        start_index=start_index,
        problem=problem,
    )


def multistart(
    problem: PlanProblem,
    options: SolverOptions | None = None,
    log: TextIO | None = None,
) -> list[SolveResult]:
    """Independent solves from distinct seeds, best first, label-deduplicated.

    Seeds are ``rng_seed + k`` for k in [0, multistart_count); solves run
    serially in seed order so the output is reproducible.  Results sort
    by (status rank, objective, start index) and only the best result per
    contact-sequence label survives.
    """
    options = SolverOptions() if options is None else options
    results = [
        _solve_single(problem, options, options.rng_seed + k, k, log)
        for k in range(options.multistart_count)
    ]
    results.sort(
        key=lambda r: (_STATUS_RANK[r.status], r.objective, r.start_index)
    )
    out, seen = [], set()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AmbiguousContact)
        for r in results:
            lab = label_sequence(r).label
            if lab not in seen:
                seen.add(lab)
                out.append(r)
    return out
