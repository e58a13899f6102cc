"""Shared builders: standard problems, stances, and FD helpers."""

import numpy as np
import pytest

from clamber.formulation import (
    PlanProblem,
    RoundState,
    Targets,
    candidate_pairs,
)
from clamber.kinematics import default_robot
from clamber.scene import scenario_library


def standing_stance(robot, scene, com_height=0.21, foot_x=0.42):
    """Six toes on the ground in two rows, weight split evenly.

    Works for every scenario family whose surface 0 is the ground plane.
    """
    toes = []
    for leg in robot.legs:
        side = np.sign(leg.hip_offset[0])
        toes.append([side * foot_x, leg.hip_offset[1], 0.0])
    toes = np.array(toes)
    pairs = candidate_pairs(scene)
    mg = robot.mass * np.linalg.norm(scene.gravity)
    force = np.zeros((len(pairs), 3))
    for k, (i, s) in enumerate(pairs):
        if s == 0:  # ground
            force[k] = [0.0, 0.0, mg / robot.n_legs]
    return RoundState(
        com=np.array([0.0, 0.0, com_height]),
        body_euler=np.zeros(3),
        toe=toes,
        force=force,
    )


def wall_targets(robot, scene, wall_height=0.18):
    """Toe targets on the two walls at the standard height."""
    left = scene.surfaces[1].origin[0]
    right = scene.surfaces[2].origin[0]
    toes = []
    for leg in robot.legs:
        x = left if leg.hip_offset[0] < 0 else right
        toes.append([x, leg.hip_offset[1], wall_height])
    return Targets(toe=np.array(toes))


def wall_problem(rounds=2, scenario="parallel_wall", robot=None, **kw):
    robot = robot or default_robot()
    scene = scenario_library(scenario)
    stance = standing_stance(robot, scene)
    return PlanProblem(
        robot=robot,
        scene=scene,
        rounds=rounds,
        targets=wall_targets(robot, scene),
        initial_stance=stance,
        **kw,
    )


def fd_jacobian_error(inst, x, h=1e-6):
    """Max elementwise |analytic - FD| / (1 + |analytic|) over all rows."""
    c_eq, J_eq, c_in, J_in = inst.constraint_eval(x)
    n = inst.n_vars
    fd_eq = np.zeros_like(J_eq)
    fd_in = np.zeros_like(J_in)
    for m in range(n):
        e = np.zeros(n)
        e[m] = h
        ep, _, ip_, _ = inst.constraint_eval(x + e)
        em, _, im_, _ = inst.constraint_eval(x - e)
        if J_eq.size:
            fd_eq[:, m] = (ep - em) / (2 * h)
        if J_in.size:
            fd_in[:, m] = (ip_ - im_) / (2 * h)
    err = 0.0
    if J_eq.size:
        err = max(err, np.max(np.abs(fd_eq - J_eq) / (1.0 + np.abs(J_eq))))
    if J_in.size:
        err = max(err, np.max(np.abs(fd_in - J_in) / (1.0 + np.abs(J_in))))
    return err


def fd_gradient_error(inst, x, h=1e-6):
    val, g = inst.objective_and_grad(x)
    fd = np.zeros_like(g)
    for m in range(inst.n_vars):
        e = np.zeros(inst.n_vars)
        e[m] = h
        fd[m] = (inst.objective_value(x + e) - inst.objective_value(x - e)) / (2 * h)
    return np.max(np.abs(fd - g) / (1.0 + np.abs(g)))


@pytest.fixture
def robot():
    return default_robot()


@pytest.fixture(scope="session")
def flagship():
    """One shared parallel-wall solve with switchability on.

    Several suites assert different contracts against the same nominal
    run (residuals, labels, oracle agreement, force bounds), so it is
    solved once per session.
    """
    from clamber.solver import SolverOptions, solve

    problem = wall_problem(rounds=2, switchability=True)
    return solve(problem, SolverOptions(time_budget=120.0))
