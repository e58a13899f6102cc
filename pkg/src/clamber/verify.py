"""Independent checks for planned climbing transitions.

Three tools, all deliberately decoupled from the solver so it cannot
certify itself:

* :func:`check_solution` recomputes every residual family from the raw
  round states using the formulation module.
* :func:`equilibrium_oracle` answers "can this stance carry the robot's
  weight at all?" with a small linear feasibility program over pyramidal
  inner approximations of the friction cones, returning witness forces
  when the answer is yes.  The LP runs on our own simplex, not on the
  NLP machinery.
* :func:`label_sequence` names a plan by how many legs lift per round
  ("3-3", "2-2-2", ...), the vocabulary gaits are discussed in.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .formulation import (
    PlanProblem,
    ResidualReport,
    RoundState,
    candidate_pairs,
    residual_report,
    worst_case_jacobian_norm,
)
from .kinematics import RobotModel
from .lp import feasible_point
from .scene import (
    Scene,
    contact_frame,
    project_to_patch,
    signed_distance,
    surface_normal,
)

if TYPE_CHECKING:  # pragma: no cover
    from .solver import SolveResult

FORCE_THRESHOLD = 0.5  # N; an order above solver tolerance, an order below loads
DISTANCE_THRESHOLD = 5e-3  # m
ON_PATCH_TOL = 1e-6  # m


class AmbiguousContact(UserWarning):
    """A normal force lies within 20% of the contact threshold."""


class OracleDisagreement(UserWarning):
    """The LP oracle finds a round's stance statically infeasible."""


@dataclass(frozen=True)
class Stance:
    """Active contacts plus the body pose they support.

    ``contacts`` is a sequence of ``(position, surface_index)`` pairs.
    Positions are expected on their surface patch to within 1e-6 m; the
    oracle validates this against the scene it is given.
    """

    contacts: tuple
    com: np.ndarray
    body_euler: np.ndarray

    def __post_init__(self):
        fixed = tuple(
            (np.asarray(p, dtype=float), int(s)) for p, s in self.contacts
        )
        object.__setattr__(self, "contacts", fixed)
        object.__setattr__(self, "com", np.asarray(self.com, dtype=float))
        object.__setattr__(self, "body_euler", np.asarray(self.body_euler, dtype=float))

    @property
    def n_contacts(self) -> int:
        return len(self.contacts)


@dataclass(frozen=True)
class SequenceLabel:
    """Per-round sets of lifted legs and their compact dash-joined name.

    Rounds in which nothing lifts are omitted from the string; a plan
    where no leg ever lifts is named "0".
    """

    moved: tuple
    label: str

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True)
class OracleResult:
    """Outcome of the equilibrium feasibility program.

    ``forces`` holds one witness force vector per stance contact when
    feasible, in newtons, and is None otherwise.
    """

    feasible: bool
    forces: np.ndarray | None = None

    def __bool__(self) -> bool:
        return self.feasible


def _pair_fz(state: RoundState, scene: Scene, k: int, i: int, s: int) -> float:
    n = surface_normal(scene.surfaces[s], state.toe[i])
    return float(n @ state.force[k])


def active_legs(
    state: RoundState,
    scene: Scene,
    force_threshold: float = FORCE_THRESHOLD,
    distance_threshold: float = DISTANCE_THRESHOLD,
) -> set:
    """Legs with a loaded, near-surface candidate contact.

    A leg counts as supporting when any of its candidate pairs carries a
    normal force above ``force_threshold`` with the toe closer to the
    surface than ``distance_threshold``.
    """
    out = set()
    for k, (i, s) in enumerate(candidate_pairs(scene)):
        fz = _pair_fz(state, scene, k, i, s)
        d = signed_distance(scene.surfaces[s], state.toe[i])
        if fz > force_threshold and d < distance_threshold:
            out.add(i)
    return out


def stance_from_round(
    state: RoundState,
    scene: Scene,
    force_threshold: float = FORCE_THRESHOLD,
    distance_threshold: float = DISTANCE_THRESHOLD,
) -> Stance:
    """Extract the active contact set of a round as a Stance.

    Toe positions are snapped onto their surface patch so the result
    satisfies the Stance invariant exactly even when the round came out
    of a finite-tolerance solve.
    """
    contacts = []
    for k, (i, s) in enumerate(candidate_pairs(scene)):
        fz = _pair_fz(state, scene, k, i, s)
        d = signed_distance(scene.surfaces[s], state.toe[i])
        if fz > force_threshold and d < distance_threshold:
            contacts.append((project_to_patch(scene.surfaces[s], state.toe[i]), s))
    return Stance(tuple(contacts), state.com, state.body_euler)


def equilibrium_oracle(
    stance: Stance,
    robot: RobotModel,
    scene: Scene,
    s_mu: float = 1.1,
    s_tau: float = 1.8,
    pyramid_sides: int = 8,
) -> OracleResult:
    """Linear feasibility check of quasi-static equilibrium for a stance.

    Friction cones are replaced by inscribed pyramids (an inner
    approximation, so Feasible is trustworthy), each contact force is a
    nonnegative combination of the pyramid's edge rays, and the toe-force
    magnitude bound applies per contact.  Feasibility is decided by a
    phase-1 simplex; the answer Infeasible is an answer, not an error.

    The pyramid edge angles nest when ``pyramid_sides`` doubles, so
    refining the approximation can only keep or gain feasibility.
    """
    if pyramid_sides < 4:
        raise ValueError("pyramid needs at least 4 sides")
    if s_mu <= 0:
        raise ValueError("the oracle needs a finite cone; s_mu must be positive")
    for p, s in stance.contacts:
        q = project_to_patch(scene.surfaces[s], p)
        if np.linalg.norm(p - q) > ON_PATCH_TOL:
            raise ValueError(
                f"stance contact {p} is not on surface {scene.surfaces[s].name!r}"
            )
    if stance.n_contacts == 0:
        return OracleResult(False)

    weight = robot.mass * float(np.linalg.norm(scene.gravity))
    length = robot.reach_radius
    k = pyramid_sides
    rays = []  # (n_contacts, k, 3), unit normal component
    for p, s in stance.contacts:
        surf = scene.surfaces[s]
        t1, t2, z = contact_frame(surf, p)
        mu = surf.friction / s_mu
        psi = 2.0 * np.pi * np.arange(k) / k
        rays.append(z + mu * (np.outer(np.cos(psi), t1) + np.outer(np.sin(psi), t2)))
    rays = np.array(rays)

    n_vars = stance.n_contacts * k
    gen = rays.reshape(n_vars, 3)  # row per (contact, edge)
    arm = np.repeat(
        np.array([p for p, _ in stance.contacts]) - stance.com, k, axis=0
    )
    # equality rows: force balance with gravity, moment balance about the COM
    A_eq = np.vstack([gen.T, np.cross(arm / length, gen).T])
    b_eq = np.concatenate([-robot.mass * scene.gravity / weight, np.zeros(3)])

    ub_rows = [-np.eye(n_vars)]  # edge weights are nonnegative
    ub_rhs = [np.zeros(n_vars)]
    if s_tau > 0:
        f_max = robot.scalar_torque_limit / (
            s_tau * worst_case_jacobian_norm(robot)
        ) / weight
        for m in range(stance.n_contacts):
            G = np.zeros((3, n_vars))
            G[:, m * k : (m + 1) * k] = rays[m].T
            ub_rows.extend([G, -G])
            ub_rhs.extend([np.full(3, f_max)] * 2)
    res = feasible_point(
        A_ub=np.vstack(ub_rows), b_ub=np.concatenate(ub_rhs), A_eq=A_eq, b_eq=b_eq
    )
    if not res.optimal:
        return OracleResult(False)
    w = res.x.reshape(stance.n_contacts, k)
    forces = weight * np.einsum("mr,mrd->md", w, rays)
    return OracleResult(True, forces)


def check_solution(
    result: "SolveResult", problem: PlanProblem, tolerances: dict | None = None
) -> ResidualReport:
    """Recompute all residuals and cross-check each round with the oracle.

    ``tolerances`` may override ``force`` and ``distance`` contact
    thresholds (SI units) and ``pyramid_sides``.  A round whose active
    stance the LP oracle rejects triggers an :class:`OracleDisagreement`
    warning; the report itself always comes from the formulation module.
    """
    tol = {
        "force": FORCE_THRESHOLD,
        "distance": DISTANCE_THRESHOLD,
        "pyramid_sides": 8,
    }
    tol.update(tolerances or {})
    report = residual_report(problem, result.rounds, relax=0.0)
    for j, state in enumerate(result.rounds, start=1):
        stance = stance_from_round(state, problem.scene, tol["force"], tol["distance"])
        verdict = equilibrium_oracle(
            stance,
            problem.robot,
            problem.scene,
            problem.s_mu,
            problem.s_tau,
            tol["pyramid_sides"],
        )
        if not verdict:
            warnings.warn(
                f"round {j}: the stance of {stance.n_contacts} active contacts "
                "fails the independent equilibrium check",
                OracleDisagreement,
                stacklevel=2,
            )
    return report


def label_sequence(
    result: "SolveResult",
    force_threshold: float = FORCE_THRESHOLD,
    distance_threshold: float = DISTANCE_THRESHOLD,
) -> SequenceLabel:
    """Name a plan by how many supporting legs lift in each round.

    A leg is lifted in round j when its active-contact indicator turns
    off between rounds j-1 and j (round 0 being the initial stance).
    Normal forces within 20% of ``force_threshold`` make the indicator
    fragile; they are reported as :class:`AmbiguousContact` and the label
    is produced anyway.
    """
    if force_threshold <= 0 or distance_threshold <= 0:
        raise ValueError("thresholds must be positive")
    problem = result.problem
    scene = problem.scene
    chain = [problem.initial_stance, *result.rounds]

    borderline = 0
    for state in chain:
        for k, (i, s) in enumerate(candidate_pairs(scene)):
            fz = _pair_fz(state, scene, k, i, s)
            if 0.8 * force_threshold <= fz <= 1.2 * force_threshold:
                borderline += 1
    if borderline:
        warnings.warn(
            f"{borderline} normal force(s) within 20% of the "
            f"{force_threshold} N contact threshold; the label may be fragile",
            AmbiguousContact,
            stacklevel=2,
        )

    active = [
        active_legs(st, scene, force_threshold, distance_threshold) for st in chain
    ]
    moved = tuple(
        frozenset(prev - cur) for prev, cur in zip(active[:-1], active[1:])
    )
    counts = [len(m) for m in moved if m]
    label = "-".join(str(c) for c in counts) if counts else "0"
    return SequenceLabel(moved, label)
