"""Transition-planning NLP: decision variables, residuals, cost, assembly.

A plan is a sequence of M rounds.  Round 0 is the given initial stance and
is never optimized; rounds 1..M each hold body pose, toe positions, and one
force vector per (leg, candidate surface) pair.  Complementarity couples
each pair's normal force to its contact distance, so contact locations and
timing fall out of the optimizer instead of a phase schedule.

Units and scaling: the standalone residual functions work in SI units.
Assembled instances are normalized: lengths divide by the reach radius,
forces by body weight, and each constraint family by its natural scale, so
one relaxation parameter and one tolerance apply across families.  The
relaxation enters three families (complementarity product, switchability
product, gated region product) and is a dimensionless bound in normalized
units.

Plane contacts keep constant normals; cylinder normals rotate with the toe,
and all Jacobians account for that.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from clamber.kinematics import (
    RobotModel,
    euler_rotation_derivatives,
    foot_in_body,
    jacobian,
    jacobian_theta_derivatives,
    max_jacobian_infnorm,
    rotation_from_euler,
    skew,
)
from clamber.scene import (
    Scene,
    Surface,
    signed_distance_and_gradient,
    surface_normal,
    surface_normal_and_jacobian,
)

L1_EPS = 1e-6  # newtons; rounds the force-magnitude cost at the origin so the
# objective stays differentiable where swing-leg forces live.
CONE_EPS = 1e-6  # newtons; rounds the cone vertex so the constraint stays smooth


class ModeMismatch(Exception):
    """Raised when an exact-kinematics operation meets a sphere-mode state."""


class InvalidProblem(Exception):
    """Raised by assemble when a problem invariant is violated."""


def candidate_pairs(scene: Scene) -> tuple[tuple[int, int], ...]:
    """Fixed (leg, surface) enumeration; force rows follow this order."""
    return tuple((i, s) for i in range(scene.n_legs) for s in scene.candidate_map[i])


def _hinge(v):
    return np.maximum(0.0, v)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class RoundState:
    """State of one round: body pose, toes, and per-pair contact forces.

    ``force`` rows follow :func:`candidate_pairs` order.  ``joint_angles``
    is present only in exact-kinematics mode.  ``contact_torque`` exists so
    the moment balance is written in full, but point contacts pin it to
    zero; passing a nonzero value is an error, not a feature.
    """

    com: np.ndarray
    body_euler: np.ndarray
    toe: np.ndarray
    force: np.ndarray
    joint_angles: np.ndarray | None = None
    contact_torque: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "com", np.asarray(self.com, dtype=float))
        object.__setattr__(self, "body_euler", np.asarray(self.body_euler, dtype=float))
        object.__setattr__(self, "toe", np.asarray(self.toe, dtype=float))
        object.__setattr__(self, "force", np.asarray(self.force, dtype=float))
        if self.toe.ndim != 2 or self.toe.shape[1] != 3:
            raise ValueError("toe must be (n_legs, 3)")
        if self.force.ndim != 2 or self.force.shape[1] != 3:
            raise ValueError("force must be (n_pairs, 3)")
        if np.any(np.abs(self.body_euler) > np.pi + 1e-9):
            raise ValueError("body_euler must lie in (-pi, pi]")
        if not np.all(np.isfinite(self.force)):
            raise ValueError("forces must be finite")
        if self.joint_angles is not None:
            ja = np.asarray(self.joint_angles, dtype=float)
            object.__setattr__(self, "joint_angles", ja)
        torque = self.contact_torque
        if torque is None:
            torque = np.zeros_like(self.toe)
        else:
            torque = np.asarray(torque, dtype=float)
            if np.any(torque != 0.0):
                raise ValueError("contact_torque is fixed to zero for point contacts")
        object.__setattr__(self, "contact_torque", torque)

    @property
    def n_legs(self) -> int:
        return self.toe.shape[0]


@dataclass(frozen=True)
class Weights:
    """Cost weights: terminal toe, body step, rotation step, toe step, force."""

    # terminal toe tracking dominates the per-round motion penalties by two
    # orders so planned stances land on their targets instead of trading
    # millimeters of error against centimeters of travel
    q_p: np.ndarray = field(default_factory=lambda: 500.0 * np.eye(3))
    q_c: np.ndarray = field(default_factory=lambda: np.eye(3))
    q_theta: np.ndarray = field(default_factory=lambda: np.eye(3))
    q_delta: np.ndarray = field(default_factory=lambda: np.eye(3))
    w_l1: float = 0.01

    def __post_init__(self):
        for name in ("q_p", "q_c", "q_theta", "q_delta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))


@dataclass(frozen=True)
class Targets:
    """Desired terminal toe positions, with an optional desired body pose."""

    toe: np.ndarray
    body_position: np.ndarray | None = None
    body_euler: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "toe", np.asarray(self.toe, dtype=float))
        for name in ("body_position", "body_euler"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float))


_JMAX_CACHE: dict = {}


def _leg_jmax(leg) -> float:
    key = (
        leg.link_lengths.tobytes(),
        leg.joint_axes.tobytes(),
        round(leg.hip_yaw_mount, 12),
        leg.joint_min.tobytes(),
        leg.joint_max.tobytes(),
    )
    if key not in _JMAX_CACHE:
        _JMAX_CACHE[key] = max_jacobian_infnorm(leg)
    return _JMAX_CACHE[key]


def worst_case_jacobian_norm(robot: RobotModel) -> float:
    """Largest induced infinity norm of any leg Jacobian over its joint box.

    Cached per leg geometry; this is the constant behind the conservative
    toe-force bound.
    """
    return max(_leg_jmax(leg) for leg in robot.legs)


@dataclass(frozen=True)
class PlanProblem:
    """Everything assemble needs: robot, scene, horizon, weights, targets.

    ``jmax`` (worst-case leg Jacobian norm, used by the conservative force
    bound) is computed from the robot when not given.  Safety factors below
    one are legal but warn: they mean trusting the hardware beyond its
    rated limits.
    """

    robot: RobotModel
    scene: Scene
    rounds: int
    targets: Targets
    initial_stance: RoundState
    s_mu: float = 1.1
    s_tau: float = 1.8
    weights: Weights = field(default_factory=Weights)
    switchability: bool = False
    kinematics_mode: str = "sphere"
    cost_mode: str = "l1"
    jmax: float | None = None

    def __post_init__(self):
        if self.s_mu < 0 or self.s_tau < 0:
            raise ValueError("safety factors must be nonnegative")
        if 0 < self.s_mu < 1.0 or 0 < self.s_tau < 1.0:
            warnings.warn(
                "safety factor below 1 is not conservative "
                f"(s_mu={self.s_mu}, s_tau={self.s_tau})",
                stacklevel=2,
            )
        if self.jmax is None:
            object.__setattr__(self, "jmax", worst_case_jacobian_norm(self.robot))

    @property
    def n_pairs(self) -> int:
        return len(candidate_pairs(self.scene))


@dataclass(frozen=True)
class Scales:
    """Normalizers: length by reach, force by weight, products accordingly."""

    length: float
    force: float

    @property
    def moment(self) -> float:
        return self.force * self.length


def scales(problem: PlanProblem) -> Scales:
    return Scales(
        length=problem.robot.reach_radius,
        force=problem.robot.mass * np.linalg.norm(problem.scene.gravity),
    )


@dataclass(frozen=True)
class ResidualReport:
    """Per-family maximum violations in normalized units (all nonnegative).

    ``fk_consistency`` and ``torque`` stay zero in sphere mode.
    """

    equilibrium_force: float
    equilibrium_moment: float
    reachability: float
    step_size: float
    friction_cone: float
    force_bound: float
    complementarity: float
    switchability: float
    region: float
    fk_consistency: float = 0.0
    torque: float = 0.0

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if v < 0:
                raise ValueError(f"negative residual {k}")

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}

    @property
    def max_violation(self) -> float:
        return max(self.as_dict().values())


# ---------------------------------------------------------------------------
# standalone residual operations (SI units)


def _pair_normal_force(state: RoundState, scene: Scene, k: int, pair) -> float:
    i, s = pair
    n = surface_normal(scene.surfaces[s], state.toe[i])
    return float(n @ state.force[k])


def equilibrium_residual(state: RoundState, robot: RobotModel, scene: Scene) -> np.ndarray:
    """Static force and moment balance about the COM; zero iff balanced."""
    force = state.force.sum(axis=0) + robot.mass * scene.gravity
    moment = state.contact_torque.sum(axis=0).astype(float)
    for k, (i, _) in enumerate(candidate_pairs(scene)):
        moment = moment + np.cross(state.toe[i] - state.com, state.force[k])
    return np.concatenate([force, moment])


def sphere_reachability_residual(state: RoundState, robot: RobotModel) -> np.ndarray:
    """Per-leg hinge of the sphere workspace bound around each hip."""
    R = rotation_from_euler(state.body_euler)
    out = np.zeros(robot.n_legs)
    for i, leg in enumerate(robot.legs):
        u = state.toe[i] - state.com - R @ leg.hip_offset
        out[i] = _hinge(np.linalg.norm(u) - robot.reach_radius)
    return out


def step_size_residual(prev: RoundState, nxt: RoundState, robot: RobotModel) -> np.ndarray:
    """Elementwise hinge violations of the body/rotation/toe step boxes."""
    parts = [
        _hinge(np.abs(nxt.com - prev.com) - robot.max_body_step),
        _hinge(np.abs(nxt.body_euler - prev.body_euler) - robot.max_body_rotation_step),
        _hinge(np.abs(nxt.toe - prev.toe).ravel() - robot.max_toe_step),
    ]
    return np.concatenate(parts)


def friction_cone_residual(
    force, surface: Surface, s_mu: float, toe=None
) -> float:
    """Aggregated hinge of the scaled friction cone and unilaterality.

    ``force`` is in world coordinates; the normal direction comes from the
    surface (``toe`` is required for cylinders, whose normals vary).
    """
    f = np.asarray(force, dtype=float)
    if surface.kind == "plane":
        n = surface.axis
    else:
        if toe is None:
            raise ValueError("toe position required for curved surfaces")
        n = surface_normal(surface, toe)
    fz = float(n @ f)
    ft = np.sqrt(max(float(f @ f) - fz * fz, 0.0))
    aperture = surface.friction / s_mu if s_mu > 0 else np.inf
    cone = 0.0 if np.isinf(aperture) else _hinge(ft - aperture * fz)
    return float(max(cone, _hinge(-fz)))


def force_bound_residual(force, robot: RobotModel, jmax: float, s_tau: float) -> float:
    """Hinge of the conservative max-norm force bound from the torque limit."""
    if jmax <= 0:
        raise ValueError("jmax must be positive")
    if s_tau == 0:
        return 0.0
    bound = robot.scalar_torque_limit / (s_tau * jmax)
    return float(_hinge(np.max(np.abs(np.asarray(force, dtype=float))) - bound))


def exact_torque_residual(state: RoundState, robot: RobotModel, s_tau: float, scene: Scene) -> np.ndarray:
    """Per-leg hinge of the exact joint-torque limit via the leg Jacobian."""
    if state.joint_angles is None:
        raise ModeMismatch("exact torque requires joint angles (sphere-mode state)")
    if s_tau == 0:
        return np.zeros(robot.n_legs)
    R = rotation_from_euler(state.body_euler)
    pairs = candidate_pairs(scene)
    out = np.zeros(robot.n_legs)
    limit = robot.scalar_torque_limit / s_tau
    for i, leg in enumerate(robot.legs):
        f = sum(
            (state.force[k] for k, (li, _) in enumerate(pairs) if li == i),
            np.zeros(3),
        )
        tau = jacobian(leg, state.joint_angles[i]).T @ (R.T @ f)
        out[i] = _hinge(np.max(np.abs(tau)) - limit)
    return out


def complementarity_residual(state: RoundState, scene: Scene, relax: float) -> np.ndarray:
    """Per-pair max of the three hinges: -f_z, -d, f_z*d - relax."""
    pairs = candidate_pairs(scene)
    out = np.zeros(len(pairs))
    for k, (i, s) in enumerate(pairs):
        surf = scene.surfaces[s]
        fz = _pair_normal_force(state, scene, k, (i, s))
        d, _ = signed_distance_and_gradient(surf, state.toe[i])
        out[k] = max(_hinge(-fz), _hinge(-d), _hinge(fz * d - relax))
    return out


def switchability_residual(
    prev: RoundState, nxt: RoundState, scene: Scene, relax: float
) -> np.ndarray:
    """Per-leg hinge of the cross-round product of summed normal forces."""
    pairs = candidate_pairs(scene)
    n_legs = prev.n_legs
    fz_prev = np.zeros(n_legs)
    fz_next = np.zeros(n_legs)
    for k, (i, s) in enumerate(pairs):
        fz_prev[i] += _pair_normal_force(prev, scene, k, (i, s))
        fz_next[i] += _pair_normal_force(nxt, scene, k, (i, s))
    return _hinge(fz_prev * fz_next - relax)


def region_residual(state: RoundState, scene: Scene, relax: float) -> np.ndarray:
    """Per-pair hinge of the force-gated patch-region product.

    Active contacts must lie in their surface's convex region; swing toes
    are unconstrained.  The gate uses squared halfspace hinges so the
    product is continuously differentiable.
    """
    pairs = candidate_pairs(scene)
    out = np.zeros(len(pairs))
    for k, (i, s) in enumerate(pairs):
        surf = scene.surfaces[s]
        if surf.region_A.shape[0] == 0:
            continue
        fz = _pair_normal_force(state, scene, k, (i, s))
        gap = _hinge(surf.region_A @ state.toe[i] - surf.region_b)
        out[k] = _hinge(fz * float(gap @ gap) - relax)
    return out


def _smooth_l1(force: np.ndarray) -> float:
    """Sum of per-contact force magnitudes, smoothed at the origin.

    Grouping by contact (instead of summing componentwise) keeps the cost
    differentiable in the tangential directions of a loaded contact and
    sparsifies whole contacts rather than individual axes.
    """
    norms2 = np.einsum("kd,kd->k", force, force)
    return float(np.sum(np.sqrt(norms2 + L1_EPS * L1_EPS)))


def objective(solution: Sequence[RoundState], problem: PlanProblem) -> float:
    """Terminal toe-target cost plus per-round motion and force costs.

    Intermediate terms run over rounds 2..M (differences between optimized
    rounds only; the move away from the initial stance is constrained but
    not penalized).  The force magnitude cost is the smoothed L1 by
    default; ``cost_mode="l2"`` switches to a plain quadratic, which
    spreads forces instead of sparsifying them.
    """
    if len(solution) != problem.rounds:
        raise ValueError("solution length must equal problem.rounds")
    w = problem.weights
    last = solution[-1]
    val = 0.0
    for i in range(last.n_legs):
        e = last.toe[i] - problem.targets.toe[i]
        val += float(e @ w.q_p @ e)
    if problem.targets.body_position is not None:
        e = last.com - problem.targets.body_position
        val += float(e @ w.q_c @ e)
    if problem.targets.body_euler is not None:
        e = last.body_euler - problem.targets.body_euler
        val += float(e @ w.q_theta @ e)
    for j in range(1, len(solution)):
        prev, nxt = solution[j - 1], solution[j]
        dc = nxt.com - prev.com
        dth = nxt.body_euler - prev.body_euler
        val += float(dc @ w.q_c @ dc) + float(dth @ w.q_theta @ dth)
        for i in range(nxt.n_legs):
            dp = nxt.toe[i] - prev.toe[i]
            val += float(dp @ w.q_delta @ dp)
        if problem.cost_mode == "l2":
            val += w.w_l1 * float(np.sum(nxt.force * nxt.force))
        else:
            val += w.w_l1 * _smooth_l1(nxt.force)
    return val


def residual_report(
    problem: PlanProblem, solution: Sequence[RoundState], relax: float = 0.0
) -> ResidualReport:
    """Normalized per-family maximum violations over all optimized rounds.

    Round 0 (the given stance) is not checked; it is data, not a decision.
    The relax argument applies to the three relaxed product families, in
    normalized units, so a homotopy stage can be checked against its own
    target.
    """
    sc = scales(problem)
    robot, scene = problem.robot, problem.scene
    pairs = candidate_pairs(scene)
    chain = [problem.initial_stance, *solution]

    eq_f, eq_m, reach, step, cone, bound, compl, switch, region = (0.0,) * 9
    fk_err, torque = 0.0, 0.0
    for state in solution:
        eq = equilibrium_residual(state, robot, scene)
        eq_f = max(eq_f, np.max(np.abs(eq[:3])) / sc.force)
        eq_m = max(eq_m, np.max(np.abs(eq[3:])) / sc.moment)
        reach = max(reach, np.max(sphere_reachability_residual(state, robot)) / sc.length)
        for k, (i, s) in enumerate(pairs):
            surf = scene.surfaces[s]
            fz = _pair_normal_force(state, scene, k, (i, s))
            d, _ = signed_distance_and_gradient(surf, state.toe[i])
            cone = max(
                cone,
                friction_cone_residual(state.force[k], surf, problem.s_mu, state.toe[i])
                / sc.force,
            )
            compl = max(
                compl,
                _hinge(-fz) / sc.force,
                _hinge(-d) / sc.length,
                _hinge(fz * d / sc.moment - relax),
            )
            if surf.region_A.shape[0]:
                gap = _hinge(surf.region_A @ state.toe[i] - surf.region_b)
                region = max(
                    region,
                    _hinge(fz * float(gap @ gap) / (sc.force * sc.length**2) - relax),
                )
        if problem.kinematics_mode == "sphere":
            for i in range(robot.n_legs):
                f = sum((state.force[k] for k, (li, _) in enumerate(pairs) if li == i),
                        np.zeros(3))
                bound = max(
                    bound,
                    force_bound_residual(f, robot, problem.jmax, problem.s_tau) / sc.force,
                )
        else:
            torque = max(
                torque,
                np.max(exact_torque_residual(state, robot, problem.s_tau, scene))
                / robot.scalar_torque_limit,
            )
            R = rotation_from_euler(state.body_euler)
            for i, leg in enumerate(robot.legs):
                fk = state.com + R @ foot_in_body(leg, state.joint_angles[i])
                fk_err = max(fk_err, np.max(np.abs(fk - state.toe[i])) / sc.length)
    for prev, nxt in zip(chain[:-1], chain[1:]):
        raw = step_size_residual(prev, nxt, robot)
        step = max(step, np.max(raw[:3]) / sc.length, np.max(raw[3:6]),
                   np.max(raw[6:]) / sc.length if raw[6:].size else 0.0)
    if problem.switchability and len(solution) >= 2:
        for prev, nxt in zip(solution[:-1], solution[1:]):
            raw = switchability_residual(prev, nxt, scene, relax * sc.force**2)
            switch = max(switch, np.max(raw) / sc.force**2)
    return ResidualReport(
        equilibrium_force=eq_f,
        equilibrium_moment=eq_m,
        reachability=reach,
        step_size=step,
        friction_cone=cone,
        force_bound=bound,
        complementarity=compl,
        switchability=switch,
        region=region,
        fk_consistency=fk_err,
        torque=torque,
    )


# ---------------------------------------------------------------------------
# NLP assembly


class Layout:
    """Flat variable layout: per-round blocks in a fixed documented order.

    Round j (1-based) occupies one contiguous block:
    ``[com(3), euler(3), toe(3 per leg), force(3 per pair), joints(3 per
    leg, exact mode only)]``.
    """

    def __init__(self, n_legs: int, n_pairs: int, rounds: int, exact: bool):
        self.n_legs, self.n_pairs, self.rounds, self.exact = n_legs, n_pairs, rounds, exact
        self.per_round = 6 + 3 * n_legs + 3 * n_pairs + (3 * n_legs if exact else 0)
        self.n_vars = rounds * self.per_round
        # index arrays are hot; build them once
        idx = np.arange(self.n_vars)
        self._com, self._euler, self._toe, self._force, self._joint = {}, {}, {}, {}, {}
        for j in range(1, rounds + 1):
            base = (j - 1) * self.per_round
            self._com[j] = idx[base : base + 3]
            self._euler[j] = idx[base + 3 : base + 6]
            for i in range(n_legs):
                off = base + 6 + 3 * i
                self._toe[j, i] = idx[off : off + 3]
            for k in range(n_pairs):
                off = base + 6 + 3 * n_legs + 3 * k
                self._force[j, k] = idx[off : off + 3]
            if exact:
                for i in range(n_legs):
                    off = base + 6 + 3 * n_legs + 3 * n_pairs + 3 * i
                    self._joint[j, i] = idx[off : off + 3]

    def base(self, j: int) -> int:
        return (j - 1) * self.per_round

    def com(self, j: int) -> np.ndarray:
        return self._com[j]

    def euler(self, j: int) -> np.ndarray:
        return self._euler[j]

    def toe(self, j: int, i: int) -> np.ndarray:
        return self._toe[j, i]

    def force(self, j: int, k: int) -> np.ndarray:
        return self._force[j, k]

    def joint(self, j: int, i: int) -> np.ndarray:
        if not self.exact:
            raise ModeMismatch("joint variables exist only in exact mode")
        return self._joint[j, i]

    def round_of_var(self, idx: int) -> int:
        return idx // self.per_round + 1


@dataclass(frozen=True)
class ConstraintBlock:
    """One small group of constraints with its analytic Jacobian.

    ``fun``/``jac`` take the full physical-unit variable vector; values and
    Jacobian are divided by ``row_scale`` to normalize.  Blocks flagged
    ``uses_relax`` return the raw product; the instance subtracts the
    current relaxation.
    """

    name: str
    family: str
    kind: str  # "eq" | "ineq", ineq means value <= 0
    dim: int
    cols: np.ndarray
    rounds: tuple[int, ...]
    row_scale: np.ndarray
    fun: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    uses_relax: bool = False


class _ContactGeometry:
    """Memoized per-round surface quantities shared by the contact families.

    Stacks, over candidate pairs, the surface normal, its Jacobian with
    respect to the toe, the patch distance, and its gradient.  The cone,
    bound, complementarity, region, and switchability blocks of a round
    all query the same toes, so one geometry evaluation serves them all;
    the memo is keyed on the gathered toe coordinates.
    """

    def __init__(self, layout: "Layout", scene: Scene, pairs, j: int):
        self._scene = scene
        self._pairs = pairs
        self._toe_cols = np.concatenate([layout.toe(j, i) for i, _ in pairs])
        self._key = None
        self._val = None

    def __call__(self, x: np.ndarray):
        toes = x[self._toe_cols].reshape(len(self._pairs), 3)
        key = toes.tobytes()
        if key != self._key:
            m = len(self._pairs)
            n = np.zeros((m, 3))
            dn = np.zeros((m, 3, 3))
            d = np.zeros(m)
            gd = np.zeros((m, 3))
            for k, (_, s) in enumerate(self._pairs):
                surf = self._scene.surfaces[s]
                n[k], dn[k] = surface_normal_and_jacobian(surf, toes[k])
                d[k], gd[k] = signed_distance_and_gradient(surf, toes[k])
            self._key = key
            self._val = (n, dn, d, gd)
        return self._val


def _psd_check(name: str, Q: np.ndarray) -> None:
    if Q.shape != (3, 3):
        raise InvalidProblem(f"weight {name} must be 3x3")
    if not np.allclose(Q, Q.T, atol=1e-12):
        raise InvalidProblem(f"weight {name} must be symmetric")
    if np.min(np.linalg.eigvalsh(Q)) < -1e-9:
        raise InvalidProblem(f"weight {name} must be positive semidefinite")


def assemble(problem: PlanProblem, relax: float = 0.0) -> "NlpInstance":
    """Build the normalized NLP instance for a problem.

    Validates problem invariants (naming the violated one), lays out the
    variables, and constructs every constraint block with analytic
    Jacobians.  Constraints couple at most adjacent rounds.
    """
    robot, scene = problem.robot, problem.scene
    if problem.rounds < 1:
        raise InvalidProblem("rounds must be at least 1")
    if robot.n_legs != scene.n_legs:
        raise InvalidProblem(
            f"robot has {robot.n_legs} legs but scene maps {scene.n_legs}"
        )
    if problem.kinematics_mode not in ("sphere", "exact"):
        raise InvalidProblem(f"unknown kinematics_mode {problem.kinematics_mode!r}")
    if problem.cost_mode not in ("l1", "l2"):
        raise InvalidProblem(f"unknown cost_mode {problem.cost_mode!r}")
    w = problem.weights
    for name in ("q_p", "q_c", "q_theta", "q_delta"):
        _psd_check(name, getattr(w, name))
    if w.w_l1 < 0:
        raise InvalidProblem("w_l1 must be nonnegative")
    pairs = candidate_pairs(scene)
    n_legs, n_pairs, M = robot.n_legs, len(pairs), problem.rounds
    if problem.targets.toe.shape != (n_legs, 3):
        raise InvalidProblem("targets.toe must be (n_legs, 3)")
    stance = problem.initial_stance
    if stance.toe.shape != (n_legs, 3):
        raise InvalidProblem("initial_stance.toe must be (n_legs, 3)")
    if stance.force.shape != (n_pairs, 3):
        raise InvalidProblem("initial_stance.force must be (n_pairs, 3)")

    exact = problem.kinematics_mode == "exact"
    lay = Layout(n_legs, n_pairs, M, exact)
    sc = scales(problem)

    # per-variable physical scale (x_physical = scale * x_normalized)
    var_scale = np.ones(lay.n_vars)
    lb = np.full(lay.n_vars, -np.inf)
    ub = np.full(lay.n_vars, np.inf)
    names = [""] * lay.n_vars
    leg_names = [leg.name for leg in robot.legs]
    for j in range(1, M + 1):
        for ax, a in enumerate("xyz"):
            names[lay.com(j)[ax]] = f"r{j}.com.{a}"
            names[lay.euler(j)[ax]] = f"r{j}.euler.{a}"
        var_scale[lay.com(j)] = sc.length
        lb[lay.euler(j)] = -np.pi
        ub[lay.euler(j)] = np.pi
        for i in range(n_legs):
            var_scale[lay.toe(j, i)] = sc.length
            for ax, a in enumerate("xyz"):
                names[lay.toe(j, i)[ax]] = f"r{j}.{leg_names[i]}.toe.{a}"
        for k, (i, s) in enumerate(pairs):
            var_scale[lay.force(j, k)] = sc.force
            sname = scene.surfaces[s].name
            for ax, a in enumerate("xyz"):
                names[lay.force(j, k)[ax]] = f"r{j}.{leg_names[i]}|{sname}.f.{a}"
        if exact:
            for i in range(n_legs):
                cols = lay.joint(j, i)
                lb[cols] = robot.legs[i].joint_min
                ub[cols] = robot.legs[i].joint_max
                for ax in range(3):
                    names[cols[ax]] = f"r{j}.{leg_names[i]}.q{ax}"

    mass_g = robot.mass * scene.gravity
    blocks: list[ConstraintBlock] = []
    leg_of = np.array([i for i, _ in pairs])

    def leg_pair_idx(i):
        return [k for k, (li, _) in enumerate(pairs) if li == i]

    # --- equilibrium (eq, 6 rows per round)
    # column layout inside the block: [com(3), toes(3 per leg), forces(3 per pair)]
    for j in range(1, M + 1):
        cols = np.concatenate(
            [lay.com(j)]
            + [lay.toe(j, i) for i in range(n_legs)]
            + [lay.force(j, k) for k in range(n_pairs)]
        )
        tp_cols = np.concatenate([lay.toe(j, i) for i, _ in pairs])
        f_cols = np.concatenate([lay.force(j, k) for k in range(n_pairs)])
        f_off = 3 + 3 * n_legs

        def eq_fun(x, j=j, tp=tp_cols, fc=f_cols):
            c = x[lay.com(j)]
            P = x[tp].reshape(n_pairs, 3)
            F = x[fc].reshape(n_pairs, 3)
            return np.concatenate(
                [mass_g + F.sum(axis=0), np.cross(P - c, F).sum(axis=0)]
            )

        def eq_jac(x, j=j, tp=tp_cols, fc=f_cols):
            c = x[lay.com(j)]
            P = x[tp].reshape(n_pairs, 3)
            F = x[fc].reshape(n_pairs, 3)
            J = np.zeros((6, 3 + 3 * n_legs + 3 * n_pairs))
            for k in range(n_pairs):
                sf = skew(F[k])
                J[0:3, f_off + 3 * k : f_off + 3 * k + 3] = np.eye(3)
                J[3:6, f_off + 3 * k : f_off + 3 * k + 3] = skew(P[k] - c)
                J[3:6, 3 + 3 * leg_of[k] : 6 + 3 * leg_of[k]] -= sf
                J[3:6, 0:3] += sf
            return J

        blocks.append(
            ConstraintBlock(
                name=f"equilibrium[r{j}]", family="equilibrium", kind="eq", dim=6,
                cols=cols, rounds=(j,),
                row_scale=np.array([sc.force] * 3 + [sc.moment] * 3),
                fun=eq_fun, jac=eq_jac,
            )
        )

    # --- sphere reachability (ineq, squared norm, per round)
    if not exact:
        for j in range(1, M + 1):
            cols = np.concatenate(
                [lay.com(j), lay.euler(j)] + [lay.toe(j, i) for i in range(n_legs)]
            )

            def reach_fun(x, j=j):
                R = rotation_from_euler(x[lay.euler(j)])
                c = x[lay.com(j)]
                out = np.zeros(n_legs)
                for i, leg in enumerate(robot.legs):
                    u = x[lay.toe(j, i)] - c - R @ leg.hip_offset
                    out[i] = u @ u - robot.reach_radius**2
                return out

            def reach_jac(x, j=j):
                J = np.zeros((n_legs, 6 + 3 * n_legs))
                e = x[lay.euler(j)]
                R = rotation_from_euler(e)
                dRs = euler_rotation_derivatives(e)
                c = x[lay.com(j)]
                for i, leg in enumerate(robot.legs):
                    u = x[lay.toe(j, i)] - c - R @ leg.hip_offset
                    J[i, 6 + 3 * i : 9 + 3 * i] = 2 * u
                    J[i, 0:3] = -2 * u
                    for m in range(3):
                        J[i, 3 + m] = -2 * u @ (dRs[m] @ leg.hip_offset)
                return J

            blocks.append(
                ConstraintBlock(
                    name=f"reachability[r{j}]", family="reachability", kind="ineq",
                    dim=n_legs, cols=cols, rounds=(j,),
                    row_scale=np.full(n_legs, sc.length**2),
                    fun=reach_fun, jac=reach_jac,
                )
            )

    # --- step-size boxes (ineq, linear, rounds j-1 -> j)
    for j in range(1, M + 1):
        prev_cols = (
            [] if j == 1
            else [lay.com(j - 1), lay.euler(j - 1)]
            + [lay.toe(j - 1, i) for i in range(n_legs)]
        )
        cur_cols = [lay.com(j), lay.euler(j)] + [lay.toe(j, i) for i in range(n_legs)]
        cols = np.concatenate(cur_cols + prev_cols)
        nrows = 2 * (6 + 3 * n_legs)

        def step_prev(x, j=j):
            if j == 1:
                return np.concatenate(
                    [stance.com, stance.body_euler, stance.toe.ravel()]
                )
            return np.concatenate(
                [x[lay.com(j - 1)], x[lay.euler(j - 1)]]
                + [x[lay.toe(j - 1, i)] for i in range(n_legs)]
            )

        limits = np.concatenate(
            [robot.max_body_step, robot.max_body_rotation_step,
             np.full(3 * n_legs, robot.max_toe_step)]
        )

        def step_fun(x, j=j, limits=limits):
            cur = np.concatenate(
                [x[lay.com(j)], x[lay.euler(j)]]
                + [x[lay.toe(j, i)] for i in range(n_legs)]
            )
            delta = cur - step_prev(x, j)
            return np.concatenate([delta - limits, -delta - limits])

        ncur = 6 + 3 * n_legs
        step_J = np.zeros((nrows, len(cols)))
        step_J[:ncur, :ncur] = np.eye(ncur)
        step_J[ncur:, :ncur] = -np.eye(ncur)
        if j > 1:
            step_J[:ncur, ncur:] = -np.eye(ncur)
            step_J[ncur:, ncur:] = np.eye(ncur)

        scale_one = np.concatenate(
            [np.full(3, sc.length), np.ones(3), np.full(3 * n_legs, sc.length)]
        )
        blocks.append(
            ConstraintBlock(
                name=f"step[r{j}]", family="step_size", kind="ineq", dim=nrows,
                cols=cols, rounds=(j,) if j == 1 else (j - 1, j),
                row_scale=np.concatenate([scale_one, scale_one]),
                fun=step_fun, jac=lambda x, J=step_J: J,
            )
        )

    # --- contact families, one batched block per family per round
    #
    # Shared column layout: all round-j toes, then all round-j forces.
    # Within a block, pair k reads toe columns 3*leg + [0..3) and force
    # columns 3*n_legs + 3*k + [0..3).
    geom = {j: _ContactGeometry(lay, scene, pairs, j) for j in range(1, M + 1)}
    force_cols_of = {
        j: np.concatenate([lay.force(j, k) for k in range(n_pairs)])
        for j in range(1, M + 1)
    }

    def round_cols(j):
        return np.concatenate(
            [lay.toe(j, i) for i in range(n_legs)]
            + [lay.force(j, k) for k in range(n_pairs)]
        )

    def round_forces(x, j):
        return x[force_cols_of[j]].reshape(n_pairs, 3)

    def tcol(i):
        return slice(3 * i, 3 * i + 3)

    def fcol(k):
        return slice(3 * n_legs + 3 * k, 3 * n_legs + 3 * k + 3)

    ncols = 3 * n_legs + 3 * n_pairs
    aperture = np.array(
        [
            scene.surfaces[s].friction / problem.s_mu if problem.s_mu > 0 else np.inf
            for _, s in pairs
        ]
    )
    region_terms = [
        (k, scene.surfaces[s].region_A, scene.surfaces[s].region_b)
        for k, (_, s) in enumerate(pairs)
        if scene.surfaces[s].region_A.shape[0]
    ]

    for j in range(1, M + 1):
        cols = round_cols(j)

        # friction cones: sqrt(|ft|^2 + eps^2) - eps <= (mu/s) fz, vertex rounded
        # by CONE_EPS so the gradient is defined (and pushes inward) at f = 0
        if problem.s_mu > 0:

            def cone_fun(x, j=j):
                n, _, _, _ = geom[j](x)
                F = round_forces(x, j)
                fz = np.einsum("kd,kd->k", n, F)
                ft2 = np.einsum("kd,kd->k", F, F) - fz * fz
                s = np.sqrt(np.maximum(ft2, 0.0) + CONE_EPS**2)
                return s - aperture * fz - CONE_EPS

            def cone_jac(x, j=j):
                n, dn, _, _ = geom[j](x)
                F = round_forces(x, j)
                fz = np.einsum("kd,kd->k", n, F)
                ft2 = np.einsum("kd,kd->k", F, F) - fz * fz
                s = np.sqrt(np.maximum(ft2, 0.0) + CONE_EPS**2)
                J = np.zeros((n_pairs, ncols))
                for k in range(n_pairs):
                    J[k, fcol(k)] = (F[k] - fz[k] * n[k]) / s[k] - aperture[k] * n[k]
                    J[k, tcol(leg_of[k])] = -(fz[k] / s[k] + aperture[k]) * (
                        dn[k].T @ F[k]
                    )
                return J

            blocks.append(
                ConstraintBlock(
                    name=f"cone[r{j}]", family="friction_cone", kind="ineq",
                    dim=n_pairs, cols=cols, rounds=(j,),
                    row_scale=np.full(n_pairs, sc.force),
                    fun=cone_fun, jac=cone_jac,
                )
            )

        # contact bounds: fz >= 0 rows, then d >= 0 rows
        def cb_fun(x, j=j):
            n, _, d, _ = geom[j](x)
            F = round_forces(x, j)
            fz = np.einsum("kd,kd->k", n, F)
            return np.concatenate([-fz, -d])

        def cb_jac(x, j=j):
            n, dn, _, gd = geom[j](x)
            F = round_forces(x, j)
            J = np.zeros((2 * n_pairs, ncols))
            for k in range(n_pairs):
                J[k, fcol(k)] = -n[k]
                J[k, tcol(leg_of[k])] = -(dn[k].T @ F[k])
                J[n_pairs + k, tcol(leg_of[k])] = -gd[k]
            return J

        blocks.append(
            ConstraintBlock(
                name=f"contact[r{j}]", family="contact_bounds", kind="ineq",
                dim=2 * n_pairs, cols=cols, rounds=(j,),
                row_scale=np.concatenate(
                    [np.full(n_pairs, sc.force), np.full(n_pairs, sc.length)]
                ),
                fun=cb_fun, jac=cb_jac,
            )
        )

        # complementarity products fz * d <= relax
        def comp_fun(x, j=j):
            n, _, d, _ = geom[j](x)
            F = round_forces(x, j)
            fz = np.einsum("kd,kd->k", n, F)
            return fz * d

        def comp_jac(x, j=j):
            n, dn, d, gd = geom[j](x)
            F = round_forces(x, j)
            fz = np.einsum("kd,kd->k", n, F)
            J = np.zeros((n_pairs, ncols))
            for k in range(n_pairs):
                J[k, fcol(k)] = d[k] * n[k]
                J[k, tcol(leg_of[k])] = fz[k] * gd[k] + d[k] * (dn[k].T @ F[k])
            return J

        blocks.append(
            ConstraintBlock(
                name=f"compl[r{j}]", family="complementarity", kind="ineq",
                dim=n_pairs, cols=cols, rounds=(j,),
                row_scale=np.full(n_pairs, sc.moment),
                fun=comp_fun, jac=comp_jac, uses_relax=True,
            )
        )

        # force-gated region membership for pairs whose surface has a region
        if region_terms:

            def reg_fun(x, j=j):
                n, _, _, _ = geom[j](x)
                F = round_forces(x, j)
                out = np.zeros(len(region_terms))
                for r, (k, A, bvec) in enumerate(region_terms):
                    gap = _hinge(A @ x[lay.toe(j, leg_of[k])] - bvec)
                    out[r] = (n[k] @ F[k]) * (gap @ gap)
                return out

            def reg_jac(x, j=j):
                n, dn, _, _ = geom[j](x)
                F = round_forces(x, j)
                J = np.zeros((len(region_terms), ncols))
                for r, (k, A, bvec) in enumerate(region_terms):
                    gap = _hinge(A @ x[lay.toe(j, leg_of[k])] - bvec)
                    fz = n[k] @ F[k]
                    J[r, fcol(k)] = (gap @ gap) * n[k]
                    J[r, tcol(leg_of[k])] = fz * (2 * gap @ A) + (gap @ gap) * (
                        dn[k].T @ F[k]
                    )
                return J

            blocks.append(
                ConstraintBlock(
                    name=f"region[r{j}]", family="region", kind="ineq",
                    dim=len(region_terms), cols=cols, rounds=(j,),
                    row_scale=np.full(len(region_terms), sc.force * sc.length**2),
                    fun=reg_fun, jac=reg_jac, uses_relax=True,
                )
            )

    # --- force bound (sphere mode): per-leg aggregates, 6 linear rows each
    if not exact and problem.s_tau > 0:
        f_max = robot.scalar_torque_limit / (problem.s_tau * problem.jmax)
        agg = np.zeros((3 * n_legs, 3 * n_pairs))
        for k in range(n_pairs):
            agg[3 * leg_of[k] : 3 * leg_of[k] + 3, 3 * k : 3 * k + 3] = np.eye(3)
        fb_J = np.vstack([agg, -agg])
        for j in range(1, M + 1):
            cols = np.concatenate([lay.force(j, k) for k in range(n_pairs)])

            def fb_fun(x, j=j):
                F = agg @ np.concatenate(
                    [x[lay.force(j, k)] for k in range(n_pairs)]
                )
                return np.concatenate([F - f_max, -F - f_max])

            blocks.append(
                ConstraintBlock(
                    name=f"force_bound[r{j}]", family="force_bound",
                    kind="ineq", dim=6 * n_legs, cols=cols, rounds=(j,),
                    row_scale=np.full(6 * n_legs, sc.force),
                    fun=fb_fun, jac=lambda x, J=fb_J: J,
                )
            )

    # --- exact mode: FK consistency and joint torque limits
    if exact:
        for j in range(1, M + 1):
            for i, leg in enumerate(robot.legs):
                cols = np.concatenate(
                    [lay.com(j), lay.euler(j), lay.toe(j, i), lay.joint(j, i)]
                )

                def fk_fun(x, j=j, i=i, leg=leg):
                    R = rotation_from_euler(x[lay.euler(j)])
                    b = foot_in_body(leg, x[lay.joint(j, i)])
                    return x[lay.toe(j, i)] - x[lay.com(j)] - R @ b

                def fk_jac(x, j=j, i=i, leg=leg, cols=cols):
                    e = x[lay.euler(j)]
                    R = rotation_from_euler(e)
                    dRs = euler_rotation_derivatives(e)
                    th = x[lay.joint(j, i)]
                    b = foot_in_body(leg, th)
                    J = np.zeros((3, len(cols)))
                    J[:, _loc(cols, lay.toe(j, i))] = np.eye(3)
                    J[:, _loc(cols, lay.com(j))] = -np.eye(3)
                    for m in range(3):
                        J[:, _loc(cols, lay.euler(j))[m]] = -dRs[m] @ b
                    J[:, _loc(cols, lay.joint(j, i))] = -R @ jacobian(leg, th)
                    return J

                blocks.append(
                    ConstraintBlock(
                        name=f"fk[r{j}.{leg_names[i]}]", family="fk_consistency",
                        kind="eq", dim=3, cols=cols, rounds=(j,),
                        row_scale=np.full(3, sc.length),
                        fun=fk_fun, jac=fk_jac,
                    )
                )
        if problem.s_tau > 0:
            tau_lim = robot.scalar_torque_limit / problem.s_tau
            for j in range(1, M + 1):
                for i, leg in enumerate(robot.legs):
                    ks = leg_pair_idx(i)
                    cols = np.concatenate(
                        [lay.euler(j), lay.joint(j, i)] + [lay.force(j, k) for k in ks]
                    )

                    def tq_fun(x, j=j, i=i, leg=leg, ks=ks, tau_lim=tau_lim):
                        R = rotation_from_euler(x[lay.euler(j)])
                        F = sum((x[lay.force(j, k)] for k in ks), np.zeros(3))
                        tau = jacobian(leg, x[lay.joint(j, i)]).T @ (R.T @ F)
                        return np.concatenate([tau - tau_lim, -tau - tau_lim])

                    def tq_jac(x, j=j, i=i, leg=leg, ks=ks, cols=cols):
                        e = x[lay.euler(j)]
                        R = rotation_from_euler(e)
                        dRs = euler_rotation_derivatives(e)
                        th = x[lay.joint(j, i)]
                        Jb = jacobian(leg, th)
                        dJ = jacobian_theta_derivatives(leg, th)
                        F = sum((x[lay.force(j, k)] for k in ks), np.zeros(3))
                        J = np.zeros((6, len(cols)))
                        dtau_f = Jb.T @ R.T  # (3 torque rows, 3 force comps)
                        for idx, k in enumerate(ks):
                            J[0:3, _loc(cols, lay.force(j, k))] = dtau_f
                        for m in range(3):
                            J[0:3, _loc(cols, lay.euler(j))[m]] = Jb.T @ (dRs[m].T @ F)
                            J[0:3, _loc(cols, lay.joint(j, i))[m]] = dJ[m].T @ (R.T @ F)
                        J[3:6] = -J[0:3]
                        return J

                    blocks.append(
                        ConstraintBlock(
                            name=f"torque[r{j}.{leg_names[i]}]", family="torque",
                            kind="ineq", dim=6, cols=cols, rounds=(j,),
                            row_scale=np.full(6, robot.scalar_torque_limit),
                            fun=tq_fun, jac=tq_jac,
                        )
                    )

    # --- switchability (rounds j-1, j for j >= 2), one row per leg
    if problem.switchability:
        for j in range(2, M + 1):
            cols = np.concatenate([round_cols(j - 1), round_cols(j)])

            def leg_fz_terms(x, j):
                # per-leg summed normal force, per-pair normals, per-leg
                # gradient of the sum with respect to the leg's toe
                n, dn, _, _ = geom[j](x)
                F = round_forces(x, j)
                fz_pair = np.einsum("kd,kd->k", n, F)
                fz_leg = np.zeros(n_legs)
                dp_leg = np.zeros((n_legs, 3))
                for k in range(n_pairs):
                    fz_leg[leg_of[k]] += fz_pair[k]
                    dp_leg[leg_of[k]] += dn[k].T @ F[k]
                return fz_leg, n, dp_leg

            def sw_fun(x, j=j):
                a, _, _ = leg_fz_terms(x, j - 1)
                b, _, _ = leg_fz_terms(x, j)
                return a * b

            def sw_jac(x, j=j):
                a, na, dpa = leg_fz_terms(x, j - 1)
                b, nb, dpb = leg_fz_terms(x, j)
                J = np.zeros((n_legs, 2 * ncols))
                for i in range(n_legs):
                    J[i, tcol(i)] = b[i] * dpa[i]
                    J[i, ncols + 3 * i : ncols + 3 * i + 3] = a[i] * dpb[i]
                for k in range(n_pairs):
                    i = leg_of[k]
                    J[i, fcol(k)] = b[i] * na[k]
                    off = ncols + 3 * n_legs + 3 * k
                    J[i, off : off + 3] = a[i] * nb[k]
                return J

            blocks.append(
                ConstraintBlock(
                    name=f"switch[r{j}]", family="switchability",
                    kind="ineq", dim=n_legs, cols=cols, rounds=(j - 1, j),
                    row_scale=np.full(n_legs, sc.force**2),
                    fun=sw_fun, jac=sw_jac, uses_relax=True,
                )
            )

    return NlpInstance(
        problem=problem,
        layout=lay,
        blocks=tuple(blocks),
        var_scale=var_scale,
        lb=lb / var_scale,
        ub=ub / var_scale,
        var_names=tuple(names),
        relax=relax,
    )


def _loc(cols: np.ndarray, sub: np.ndarray) -> np.ndarray:
    """Positions of the contiguous index group ``sub`` inside block columns."""
    start = int(np.nonzero(cols == sub[0])[0][0])
    return np.arange(start, start + len(sub))


@dataclass(frozen=True)
class NlpInstance:
    """Assembled, normalized NLP: bounds, objective, constraint blocks.

    Evaluation is pure; instances can be shared between threads.  Use
    :meth:`with_relax` / :meth:`without_families` to derive variants (the
    homotopy stages and the warm-start problem).
    """

    problem: PlanProblem
    layout: Layout
    blocks: tuple[ConstraintBlock, ...]
    var_scale: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    var_names: tuple[str, ...]
    relax: float = 0.0

    @property
    def n_vars(self) -> int:
        return self.layout.n_vars

    def with_relax(self, relax: float) -> "NlpInstance":
        return replace(self, relax=relax)

    def without_families(self, families) -> "NlpInstance":
        dropped = set(families)
        return replace(
            self, blocks=tuple(b for b in self.blocks if b.family not in dropped)
        )

    def families(self) -> tuple[str, ...]:
        seen = []
        for b in self.blocks:
            if b.family not in seen:
                seen.append(b.family)
        return tuple(seen)

    # -- variable packing

    def to_x(self, rounds: Sequence[RoundState]) -> np.ndarray:
        lay = self.layout
        if len(rounds) != lay.rounds:
            raise ValueError("need one RoundState per round")
        x = np.zeros(lay.n_vars)
        for j, st in enumerate(rounds, start=1):
            x[lay.com(j)] = st.com
            x[lay.euler(j)] = st.body_euler
            for i in range(lay.n_legs):
                x[lay.toe(j, i)] = st.toe[i]
            for k in range(lay.n_pairs):
                x[lay.force(j, k)] = st.force[k]
            if lay.exact:
                if st.joint_angles is None:
                    raise ModeMismatch("exact mode requires joint angles")
                for i in range(lay.n_legs):
                    x[lay.joint(j, i)] = st.joint_angles[i]
        return x / self.var_scale

    def from_x(self, x: np.ndarray) -> list[RoundState]:
        lay = self.layout
        xp = x * self.var_scale
        out = []
        for j in range(1, lay.rounds + 1):
            out.append(
                RoundState(
                    com=xp[lay.com(j)],
                    body_euler=np.clip(xp[lay.euler(j)], -np.pi, np.pi),
                    toe=np.vstack([xp[lay.toe(j, i)] for i in range(lay.n_legs)]),
                    force=np.vstack([xp[lay.force(j, k)] for k in range(lay.n_pairs)]),
                    joint_angles=(
                        np.vstack([xp[lay.joint(j, i)] for i in range(lay.n_legs)])
                        if lay.exact
                        else None
                    ),
                )
            )
        return out

    # -- objective

    def objective_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        lay, pr = self.layout, self.problem
        w = pr.weights
        xp = x * self.var_scale
        g = np.zeros(lay.n_vars)
        val = 0.0
        M = lay.rounds
        for i in range(lay.n_legs):
            e = xp[lay.toe(M, i)] - pr.targets.toe[i]
            val += e @ w.q_p @ e
            g[lay.toe(M, i)] += 2 * w.q_p @ e
        if pr.targets.body_position is not None:
            e = xp[lay.com(M)] - pr.targets.body_position
            val += e @ w.q_c @ e
            g[lay.com(M)] += 2 * w.q_c @ e
        if pr.targets.body_euler is not None:
            e = xp[lay.euler(M)] - pr.targets.body_euler
            val += e @ w.q_theta @ e
            g[lay.euler(M)] += 2 * w.q_theta @ e
        for j in range(2, M + 1):
            dc = xp[lay.com(j)] - xp[lay.com(j - 1)]
            val += dc @ w.q_c @ dc
            g[lay.com(j)] += 2 * w.q_c @ dc
            g[lay.com(j - 1)] -= 2 * w.q_c @ dc
            dth = xp[lay.euler(j)] - xp[lay.euler(j - 1)]
            val += dth @ w.q_theta @ dth
            g[lay.euler(j)] += 2 * w.q_theta @ dth
            g[lay.euler(j - 1)] -= 2 * w.q_theta @ dth
            for i in range(lay.n_legs):
                dp = xp[lay.toe(j, i)] - xp[lay.toe(j - 1, i)]
                val += dp @ w.q_delta @ dp
                g[lay.toe(j, i)] += 2 * w.q_delta @ dp
                g[lay.toe(j - 1, i)] -= 2 * w.q_delta @ dp
            for k in range(lay.n_pairs):
                f = xp[lay.force(j, k)]
                if pr.cost_mode == "l2":
                    val += w.w_l1 * (f @ f)
                    g[lay.force(j, k)] += 2 * w.w_l1 * f
                else:
                    r = float(np.sqrt(f @ f + L1_EPS * L1_EPS))
                    val += w.w_l1 * r
                    g[lay.force(j, k)] += w.w_l1 * f / r
        return float(val), g * self.var_scale

    def objective_value(self, x: np.ndarray) -> float:
        return self.objective_and_grad(x)[0]

    # -- constraints

    def constraint_eval(self, x: np.ndarray):
        """Evaluate all blocks: (c_eq, J_eq, c_ineq, J_ineq), normalized.

        Inequalities are in ``value <= 0`` form with the current relaxation
        already subtracted from the relaxed product families.
        """
        xp = x * self.var_scale
        eq_v, eq_r, in_v, in_r = [], [], [], []
        for b in self.blocks:
            v = b.fun(xp) / b.row_scale
            if b.uses_relax:
                v = v - self.relax
            J = (b.jac(xp) / b.row_scale[:, None]) * self.var_scale[b.cols][None, :]
            rows = np.zeros((b.dim, self.n_vars))
            rows[:, b.cols] = J
            if b.kind == "eq":
                eq_v.append(v)
                eq_r.append(rows)
            else:
                in_v.append(v)
                in_r.append(rows)
        c_eq = np.concatenate(eq_v) if eq_v else np.zeros(0)
        J_eq = np.vstack(eq_r) if eq_r else np.zeros((0, self.n_vars))
        c_in = np.concatenate(in_v) if in_v else np.zeros(0)
        J_in = np.vstack(in_r) if in_r else np.zeros((0, self.n_vars))
        return c_eq, J_eq, c_in, J_in

    def family_residuals(self, x: np.ndarray) -> dict:
        """Max normalized violation per constraint family at x."""
        xp = x * self.var_scale
        out: dict = {}
        for b in self.blocks:
            v = b.fun(xp) / b.row_scale
            if b.uses_relax:
                v = v - self.relax
            viol = np.max(np.abs(v)) if b.kind == "eq" else np.max(_hinge(v))
            out[b.family] = max(out.get(b.family, 0.0), float(viol))
        return out

    def sparsity_mask(self) -> np.ndarray:
        rows = sum(b.dim for b in self.blocks)
        mask = np.zeros((rows, self.n_vars), dtype=bool)
        r = 0
        for b in self.blocks:
            mask[r : r + b.dim, b.cols] = True
            r += b.dim
        return mask

    def describe(self, x: np.ndarray | None = None) -> str:
        """Human-readable dump: variables, bounds, families, residuals."""
        lines = [
            f"rounds={self.layout.rounds} legs={self.layout.n_legs} "
            f"pairs={self.layout.n_pairs} vars={self.n_vars} "
            f"mode={'exact' if self.layout.exact else 'sphere'} relax={self.relax:g}",
            "variables (normalized bounds):",
        ]
        for idx, name in enumerate(self.var_names):
            lo, hi = self.lb[idx], self.ub[idx]
            lines.append(f"  [{idx:4d}] {name}  in [{lo:.4g}, {hi:.4g}]")
        counts: dict = {}
        for b in self.blocks:
            counts[b.family] = counts.get(b.family, 0) + b.dim
        lines.append("constraint families (rows):")
        for fam, n in counts.items():
            lines.append(f"  {fam}: {n}")
        if x is not None:
            lines.append("residuals at x:")
            for fam, v in self.family_residuals(x).items():
                lines.append(f"  {fam}: {v:.3e}")
            lines.append(f"objective: {self.objective_value(x):.6g}")
        return "\n".join(lines)
