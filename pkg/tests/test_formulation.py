"""Formulation tests: pinned residual values, FD consistency, invariances."""

import warnings

import numpy as np
import pytest

from conftest import (
    fd_gradient_error,
    fd_jacobian_error,
    standing_stance,
    wall_problem,
    wall_targets,
)

from clamber.formulation import (
    InvalidProblem,
    ModeMismatch,
    PlanProblem,
    ResidualReport,
    RoundState,
    Targets,
    Weights,
    assemble,
    candidate_pairs,
    complementarity_residual,
    equilibrium_residual,
    exact_torque_residual,
    force_bound_residual,
    friction_cone_residual,
    objective,
    region_residual,
    residual_report,
    sphere_reachability_residual,
    step_size_residual,
    switchability_residual,
)
from clamber.kinematics import (
    LegChain,
    RobotModel,
    default_robot,
    euler_from_rotation,
    rotation_from_euler,
)
from clamber.scene import Scene, Surface, scenario_library

ROBOT = default_robot()
SCENE = scenario_library("parallel_wall")
PAIRS = candidate_pairs(SCENE)
MG = ROBOT.mass * 9.81


def stance(**kw):
    return standing_stance(ROBOT, SCENE, **kw)


def single_leg_setup(mu=1.0):
    """One-leg robot on flat ground: the smallest useful fixture."""
    leg = LegChain(
        link_lengths=np.array([0.3, 0.3]),
        joint_axes=np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]),
        hip_offset=np.zeros(3),
        hip_yaw_mount=0.0,
        joint_min=np.array([-2.0, -2.0]),
        joint_max=np.array([2.0, 2.0]),
        name="leg",
    )
    robot = RobotModel(
        legs=(leg,),
        mass=10.0,
        torque_limit=np.array([27.0]),
        reach_radius=0.6,
        max_body_step=np.full(3, 0.3),
        max_body_rotation_step=np.full(3, 0.5),
        max_toe_step=0.3,
        joint_stiffness=np.array([600.0, 600.0]),
    )
    ground = Surface("ground", "plane", (0, 0, 0), (0, 0, 1), mu)
    scene = Scene(surfaces=(ground,), gravity=(0, 0, -9.81), candidate_map=((0,),))
    return robot, scene


def one_leg_state(toe_z=0.0, fz=0.0, com=(0, 0, 0.4)):
    return RoundState(
        com=np.array(com, dtype=float),
        body_euler=np.zeros(3),
        toe=np.array([[0.0, 0.0, toe_z]]),
        force=np.array([[0.0, 0.0, fz]]),
    )


# --- equilibrium --------------------------------------------------------------


def test_equilibrium_single_contact_below_com_balances():
    robot, scene = single_leg_setup()
    st = RoundState(
        com=np.array([0.2, -0.1, 0.5]),
        body_euler=np.zeros(3),
        toe=np.array([[0.2, -0.1, 0.0]]),  # directly below the COM
        force=np.array([[0.0, 0.0, 10.0 * 9.81]]),
    )
    np.testing.assert_allclose(equilibrium_residual(st, robot, scene), np.zeros(6),
                               atol=1e-12)


def test_equilibrium_zero_forces_leaves_gravity():
    st = stance()
    zero = RoundState(st.com, st.body_euler, st.toe, np.zeros_like(st.force))
    r = equilibrium_residual(zero, ROBOT, SCENE)
    np.testing.assert_allclose(r[:3], [0.0, 0.0, -MG], atol=1e-12)
    np.testing.assert_allclose(r[3:], 0.0, atol=1e-12)


def test_equilibrium_symmetric_pair_has_zero_moment():
    robot, _ = single_leg_setup()
    ground = Surface("ground", "plane", (0, 0, 0), (0, 0, 1), 1.0)
    scene2 = Scene(surfaces=(ground,), gravity=(0, 0, -9.81),
                   candidate_map=((0,), (0,)))
    robot2 = RobotModel(
        legs=(robot.legs[0], robot.legs[0]), mass=10.0, torque_limit=[27.0],
        reach_radius=0.6, max_body_step=np.full(3, 0.3),
        max_body_rotation_step=np.full(3, 0.5), max_toe_step=0.3,
        joint_stiffness=[600.0, 600.0],
    )
    st = RoundState(
        com=np.array([0.0, 0.0, 0.4]),
        body_euler=np.zeros(3),
        toe=np.array([[0.3, 0.1, 0.0], [-0.3, -0.1, 0.0]]),
        force=np.array([[0, 0, MG / 2], [0, 0, MG / 2]]),
    )
    r = equilibrium_residual(st, robot2, scene2)
    np.testing.assert_allclose(r, np.zeros(6), atol=1e-10)


def test_standing_stance_is_balanced():
    r = equilibrium_residual(stance(), ROBOT, SCENE)
    np.testing.assert_allclose(r, np.zeros(6), atol=1e-10)


# --- reachability --------------------------------------------------------------


def test_reachability_toe_at_hip_center():
    st = stance()
    toes = np.array([st.com + rotation_from_euler(st.body_euler) @ leg.hip_offset
                     for leg in ROBOT.legs])
    st2 = RoundState(st.com, st.body_euler, toes, st.force)
    np.testing.assert_allclose(sphere_reachability_residual(st2, ROBOT), 0.0, atol=1e-12)


def test_reachability_violation_is_excess_distance():
    st = stance()
    toes = st.toe.copy()
    hip0 = st.com + ROBOT.legs[0].hip_offset
    direction = np.array([0.0, 0.0, -1.0])
    toes[0] = hip0 + (ROBOT.reach_radius + 0.1) * direction
    st2 = RoundState(st.com, st.body_euler, toes, st.force)
    r = sphere_reachability_residual(st2, ROBOT)
    assert r[0] == pytest.approx(0.1, abs=1e-12)


def test_reachability_rotation_equivariant():
    st = stance()
    r0 = sphere_reachability_residual(st, ROBOT)
    Rz = rotation_from_euler([0.0, 0.0, np.pi / 2])
    st2 = RoundState(
        com=Rz @ st.com,
        body_euler=np.array([0.0, 0.0, np.pi / 2]),
        toe=(Rz @ st.toe.T).T,
        force=st.force,
    )
    np.testing.assert_allclose(sphere_reachability_residual(st2, ROBOT), r0, atol=1e-10)


# --- step size ------------------------------------------------------------------


def test_step_size_zero_for_identical_rounds():
    st = stance()
    np.testing.assert_allclose(step_size_residual(st, st, ROBOT), 0.0, atol=1e-15)


def test_step_size_boundary_feasible():
    st = stance()
    moved = RoundState(st.com + ROBOT.max_body_step, st.body_euler, st.toe, st.force)
    np.testing.assert_allclose(step_size_residual(st, moved, ROBOT), 0.0, atol=1e-12)


def test_step_size_toe_stride_violation():
    robot = default_robot(max_toe_step=0.3)
    st = stance()
    toes = st.toe.copy()
    toes[2, 0] += 0.4
    moved = RoundState(st.com, st.body_euler, toes, st.force)
    r = step_size_residual(st, moved, robot)
    assert np.count_nonzero(r) == 1
    assert np.max(r) == pytest.approx(0.1, abs=1e-12)


# --- friction cone ----------------------------------------------------------------


def test_cone_inside():
    wall = SCENE.surfaces[0]
    assert friction_cone_residual([0.0, 0.0, 10.0], wall, 1.1) == 0.0


def test_cone_just_outside():
    ground = SCENE.surfaces[0]
    v = friction_cone_residual([9.1, 0.0, 10.0], ground, 1.1)
    assert v == pytest.approx(9.1 - 10.0 / 1.1, abs=1e-12)


def test_cone_adhesion_forbidden():
    ground = SCENE.surfaces[0]
    assert friction_cone_residual([0.0, 0.0, -1.0], ground, 1.1) == pytest.approx(1.0)


def test_cone_uses_surface_normal_not_world_up():
    wall = SCENE.surfaces[1]  # normal +x
    v = friction_cone_residual([10.0, 0.0, 9.1], wall, 1.1)
    assert v == pytest.approx(9.1 - 10.0 / 1.1, abs=1e-12)


def test_cone_scaling_invariance():
    ground = SCENE.surfaces[0]
    f = np.array([3.0, -2.0, 4.0])
    base = friction_cone_residual(f, ground, 1.3)
    scaled = Surface("g", "plane", (0, 0, 0), (0, 0, 1), ground.friction * 7.0)
    assert friction_cone_residual(f, scaled, 1.3 * 7.0) == pytest.approx(base, abs=1e-12)


def test_cone_on_cylinder_needs_toe():
    tube = scenario_library("tube_exit").surfaces[0]
    with pytest.raises(ValueError, match="toe"):
        friction_cone_residual([0, 0, 1.0], tube, 1.1)
    p = np.array([tube.radius, 0.0, -0.3])
    v = friction_cone_residual([-5.0, 0.0, 0.0], tube, 1.1, toe=p)
    assert v == 0.0  # purely normal push into the shell


# --- force bound -------------------------------------------------------------------


def test_force_bound_paper_constants():
    bound_nominal = 27.0 / (1.8 * 0.9635)
    assert bound_nominal == pytest.approx(15.57, abs=0.01)
    robot, _ = single_leg_setup()
    assert force_bound_residual([0, 0, 15.0], robot, 0.9635, 1.8) == 0.0
    v = force_bound_residual([0, 0, 20.0], robot, 0.9635, 1.8)
    assert v == pytest.approx(20.0 - bound_nominal, abs=1e-9)


def test_force_bound_stronger_motor_setting():
    assert 27.0 / (0.85 * 0.9635) == pytest.approx(32.97, abs=0.01)
    robot, _ = single_leg_setup()
    assert force_bound_residual([0, 0, 32.9], robot, 0.9635, 0.85) == 0.0


def test_force_bound_uses_infinity_norm():
    robot, _ = single_leg_setup()
    v = force_bound_residual([16.0, -3.0, 2.0], robot, 0.9635, 1.8)
    assert v == pytest.approx(16.0 - 27.0 / (1.8 * 0.9635), abs=1e-9)


# --- exact torque -------------------------------------------------------------------


def one_joint_setup():
    leg = LegChain(
        link_lengths=np.array([1.0]),
        joint_axes=np.array([[0.0, 0.0, 1.0]]),
        hip_offset=np.zeros(3),
        hip_yaw_mount=0.0,
        joint_min=np.array([-2.0]),
        joint_max=np.array([2.0]),
    )
    robot = RobotModel(
        legs=(leg,), mass=10.0, torque_limit=[27.0], reach_radius=1.2,
        max_body_step=np.full(3, 0.3), max_body_rotation_step=np.full(3, 0.5),
        max_toe_step=0.5, joint_stiffness=[600.0],
    )
    ground = Surface("ground", "plane", (0, 0, 0), (0, 0, 1), 1.0)
    scene = Scene(surfaces=(ground,), gravity=(0, 0, -9.81), candidate_map=((0,),))
    return robot, scene


def test_exact_torque_zero_force():
    robot, scene = one_joint_setup()
    st = RoundState(np.zeros(3), np.zeros(3), np.zeros((1, 3)), np.zeros((1, 3)),
                    joint_angles=np.zeros((1, 1)))
    np.testing.assert_allclose(exact_torque_residual(st, robot, 1.0, scene), 0.0)


def test_exact_torque_lever_arm():
    # 1 m arm along +x, 30 N perpendicular: torque 30, limit 27, violation 3
    robot, scene = one_joint_setup()
    st = RoundState(
        com=np.zeros(3), body_euler=np.zeros(3),
        toe=np.array([[1.0, 0.0, 0.0]]),
        force=np.array([[0.0, 30.0, 0.0]]),
        joint_angles=np.zeros((1, 1)),
    )
    r = exact_torque_residual(st, robot, 1.0, scene)
    assert r[0] == pytest.approx(3.0, abs=1e-12)


def test_exact_torque_matches_kinematics_jacobian():
    from clamber.kinematics import jacobian

    rng = np.random.default_rng(2)
    robot, scene = single_leg_setup()
    theta = rng.uniform(-1.0, 1.0, size=(1, 2))
    f = rng.normal(size=(1, 3)) * 20.0
    st = RoundState(np.zeros(3), np.zeros(3), np.zeros((1, 3)), f,
                    joint_angles=theta)
    tau = jacobian(robot.legs[0], theta[0]).T @ f[0]
    expected = max(np.max(np.abs(tau)) - 27.0 / 1.8, 0.0)
    r = exact_torque_residual(st, robot, 1.8, scene)
    assert r[0] == pytest.approx(expected, abs=1e-10)


def test_exact_torque_requires_joint_angles():
    robot, scene = single_leg_setup()
    st = one_leg_state()
    with pytest.raises(ModeMismatch):
        exact_torque_residual(st, robot, 1.8, scene)


# --- complementarity -----------------------------------------------------------------


def test_complementarity_active_contact():
    _, scene = single_leg_setup()
    st = one_leg_state(toe_z=0.0, fz=5.0)
    np.testing.assert_allclose(complementarity_residual(st, scene, 0.0), 0.0, atol=1e-15)


def test_complementarity_swing_leg():
    _, scene = single_leg_setup()
    st = one_leg_state(toe_z=0.18, fz=0.0)
    np.testing.assert_allclose(complementarity_residual(st, scene, 0.0), 0.0, atol=1e-15)


def test_complementarity_product_violation():
    _, scene = single_leg_setup()
    st = one_leg_state(toe_z=0.01, fz=5.0)
    r = complementarity_residual(st, scene, 0.0)
    assert r[0] == pytest.approx(0.05, abs=1e-12)
    assert complementarity_residual(st, scene, 0.1)[0] == 0.0


def test_complementarity_negative_force_and_penetration():
    _, scene = single_leg_setup()
    st = one_leg_state(toe_z=-0.02, fz=5.0)
    assert complementarity_residual(st, scene, 1.0)[0] == pytest.approx(0.02)
    st = one_leg_state(toe_z=0.3, fz=-4.0)
    assert complementarity_residual(st, scene, 1.0)[0] == pytest.approx(4.0)


# --- switchability -------------------------------------------------------------------


def test_switchability_supporting_then_swing():
    _, scene = single_leg_setup()
    a = one_leg_state(fz=10.0)
    b = one_leg_state(fz=0.0)
    np.testing.assert_allclose(switchability_residual(a, b, scene, 0.0), 0.0)


def test_switchability_double_support_violation():
    _, scene = single_leg_setup()
    a = one_leg_state(fz=10.0)
    r = switchability_residual(a, a, scene, 0.0)
    assert r[0] == pytest.approx(100.0)
    assert switchability_residual(a, a, scene, 200.0)[0] == 0.0


def test_switchability_zero_residual_implies_a_zero_side():
    st = stance()
    # load legs 0,2,4 in round 1 and legs 1,3,5 in round 2
    f1, f2 = np.zeros_like(st.force), np.zeros_like(st.force)
    for k, (i, s) in enumerate(PAIRS):
        if s == 0:
            (f1 if i % 2 == 0 else f2)[k] = [0.0, 0.0, MG / 3]
    r1 = RoundState(st.com, st.body_euler, st.toe, f1)
    r2 = RoundState(st.com, st.body_euler, st.toe, f2)
    r = switchability_residual(r1, r2, SCENE, 0.0)
    np.testing.assert_allclose(r, 0.0, atol=1e-15)
    fz1 = np.array([sum(f1[k][2] for k, (i, _) in enumerate(PAIRS) if i == leg)
                    for leg in range(6)])
    fz2 = np.array([sum(f2[k][2] for k, (i, _) in enumerate(PAIRS) if i == leg)
                    for leg in range(6)])
    assert np.all(np.minimum(fz1, fz2) == 0.0)


# --- region ---------------------------------------------------------------------------


def test_region_inactive_for_swing_leg():
    st = stance()
    toes = st.toe.copy()
    toes[0] = [5.0, 5.0, 0.0]  # far outside every patch
    force = st.force.copy()
    force[0] = 0.0  # unload LF's ground pair
    swing = RoundState(st.com, st.body_euler, toes, force)
    np.testing.assert_allclose(region_residual(swing, SCENE, 0.0), 0.0, atol=1e-15)


def test_region_active_contact_outside_patch():
    st = stance()
    toes = st.toe.copy()
    toes[0] = [0.0, 2.0, 0.0]  # 0.8 m beyond the ground patch's y bound
    bad = RoundState(st.com, st.body_euler, toes, st.force)
    r = region_residual(bad, SCENE, 0.0)
    fz = st.force[0][2]
    assert np.max(r) == pytest.approx(fz * 0.8**2, rel=1e-9)


# --- objective ------------------------------------------------------------------------


def test_objective_zero_at_target():
    st = stance()
    problem = wall_problem(rounds=2)
    at_target = RoundState(st.com, st.body_euler, problem.targets.toe,
                           np.zeros_like(st.force))
    val = objective([at_target, at_target], problem)
    assert val == pytest.approx(0.0, abs=1e-5)  # smooth-L1 floor only


def test_objective_single_toe_offset():
    problem = wall_problem(rounds=1, weights=Weights(q_p=np.eye(3), w_l1=0.0))
    st = stance()
    toes = problem.targets.toe.copy()
    toes[3] += np.array([0.1, 0.0, 0.0])
    sol = RoundState(st.com, st.body_euler, toes, np.zeros_like(st.force))
    assert objective([sol], problem) == pytest.approx(0.01, abs=1e-12)


def test_objective_force_doubling_costs_exactly_l1_delta():
    problem = wall_problem(rounds=2)
    st = stance()
    rng = np.random.default_rng(0)
    f = rng.normal(size=st.force.shape)
    base = RoundState(st.com, st.body_euler, problem.targets.toe, np.zeros_like(f))
    eps = 1e-6

    def l1(v):
        # per-contact magnitudes, smoothed at the origin
        return np.sum(np.sqrt(np.sum(v * v, axis=1) + eps * eps))

    v1 = objective([base, RoundState(st.com, st.body_euler, problem.targets.toe, f)],
                   problem)
    v2 = objective([base, RoundState(st.com, st.body_euler, problem.targets.toe, 2 * f)],
                   problem)
    expected = problem.weights.w_l1 * (l1(2 * f) - l1(f))
    assert v2 - v1 == pytest.approx(expected, rel=1e-12)


def test_objective_l2_mode_is_quadratic_in_forces():
    problem = wall_problem(rounds=2, cost_mode="l2")
    st = stance()
    f = np.ones_like(st.force)
    base = RoundState(st.com, st.body_euler, problem.targets.toe, np.zeros_like(f))
    with_f = RoundState(st.com, st.body_euler, problem.targets.toe, f)
    delta = objective([base, with_f], problem) - objective([base, base], problem)
    assert delta == pytest.approx(problem.weights.w_l1 * f.size, rel=1e-12)


def test_objective_counts_intermediate_motion_from_round_two():
    problem = wall_problem(rounds=2, weights=Weights(w_l1=0.0))
    st = stance()
    a = RoundState(st.com, st.body_euler, problem.targets.toe, np.zeros_like(st.force))
    b = RoundState(st.com + [0.05, 0, 0], st.body_euler, problem.targets.toe,
                   np.zeros_like(st.force))
    # moving between rounds 1 and 2 costs; the 0 -> 1 move does not
    assert objective([b, a], problem) == pytest.approx(0.05**2, abs=1e-12)


# --- frame invariance -------------------------------------------------------------------


def rotate_state(st, R):
    return RoundState(
        com=R @ st.com,
        body_euler=euler_from_rotation(R @ rotation_from_euler(st.body_euler)),
        toe=(R @ st.toe.T).T,
        force=(R @ st.force.T).T,
    )


def rotate_scene(scene, R):
    surfaces = tuple(
        Surface(s.name, s.kind, R @ s.origin, R @ s.axis, s.friction, s.radius,
                region_A=s.region_A @ R.T, region_b=s.region_b.copy())
        for s in scene.surfaces
    )
    return Scene(surfaces=surfaces, gravity=R @ scene.gravity,
                 candidate_map=scene.candidate_map)


def test_physical_residuals_are_frame_invariant():
    R = rotation_from_euler([0.3, -0.4, 0.7])
    st = stance()
    # make the state generic: lift a toe, add tangential force
    toes = st.toe.copy()
    toes[1] += [0.0, 0.05, 0.12]
    force = st.force.copy()
    force[2] += [1.5, -2.0, 3.0]
    st = RoundState(st.com, st.body_euler, toes, force)
    scene_r = rotate_scene(SCENE, R)
    st_r = rotate_state(st, R)

    np.testing.assert_allclose(
        np.linalg.norm(equilibrium_residual(st_r, ROBOT, scene_r)[:3]),
        np.linalg.norm(equilibrium_residual(st, ROBOT, SCENE)[:3]), atol=1e-10)
    np.testing.assert_allclose(
        np.linalg.norm(equilibrium_residual(st_r, ROBOT, scene_r)[3:]),
        np.linalg.norm(equilibrium_residual(st, ROBOT, SCENE)[3:]), atol=1e-10)
    np.testing.assert_allclose(
        sphere_reachability_residual(st_r, ROBOT),
        sphere_reachability_residual(st, ROBOT), atol=1e-10)
    for k, (i, s) in enumerate(PAIRS):
        np.testing.assert_allclose(
            friction_cone_residual(st_r.force[k], scene_r.surfaces[s], 1.1, st_r.toe[i]),
            friction_cone_residual(st.force[k], SCENE.surfaces[s], 1.1, st.toe[i]),
            atol=1e-10)
    np.testing.assert_allclose(
        complementarity_residual(st_r, scene_r, 0.01),
        complementarity_residual(st, SCENE, 0.01), atol=1e-10)
    np.testing.assert_allclose(
        region_residual(st_r, scene_r, 0.0),
        region_residual(st, SCENE, 0.0), atol=1e-9)
    np.testing.assert_allclose(
        switchability_residual(st_r, st_r, scene_r, 0.0),
        switchability_residual(st, st, SCENE, 0.0), atol=1e-9)


# --- problem validation --------------------------------------------------------------


def test_safety_factor_below_one_warns():
    with pytest.warns(UserWarning, match="not conservative"):
        wall_problem(rounds=1, s_tau=0.85)


def test_negative_safety_factor_rejected():
    with pytest.raises(ValueError, match="nonnegative"):
        wall_problem(rounds=1, s_mu=-0.1)


def test_assemble_rejects_zero_rounds():
    problem = wall_problem(rounds=1)
    bad = PlanProblem(
        robot=problem.robot, scene=problem.scene, rounds=0,
        targets=problem.targets, initial_stance=problem.initial_stance,
        jmax=problem.jmax,
    )
    with pytest.raises(InvalidProblem, match="rounds"):
        assemble(bad)


def test_assemble_rejects_bad_weights():
    q = np.diag([1.0, 1.0, -0.5])
    problem = wall_problem(rounds=1, weights=Weights(q_p=q))
    with pytest.raises(InvalidProblem, match="q_p"):
        assemble(problem)


def test_assemble_rejects_wrong_stance_shape():
    problem = wall_problem(rounds=1)
    st = problem.initial_stance
    bad_stance = RoundState(st.com, st.body_euler, st.toe, st.force[:-1])
    bad = PlanProblem(
        robot=problem.robot, scene=problem.scene, rounds=1,
        targets=problem.targets, initial_stance=bad_stance, jmax=problem.jmax,
    )
    with pytest.raises(InvalidProblem, match="initial_stance.force"):
        assemble(bad)


def test_contact_torque_must_be_zero():
    st = stance()
    with pytest.raises(ValueError, match="contact_torque"):
        RoundState(st.com, st.body_euler, st.toe, st.force,
                   contact_torque=np.full((6, 3), 0.1))


def test_residual_report_nonnegative_and_stance_feasible():
    problem = wall_problem(rounds=1)
    report = residual_report(problem, [problem.initial_stance])
    assert report.max_violation < 1e-9
    with pytest.raises(ValueError, match="negative"):
        ResidualReport(**{**report.as_dict(), "friction_cone": -1.0})


# --- assemble: layout, sparsity, derivatives ------------------------------------------


def test_variable_count_single_round():
    problem = wall_problem(rounds=1)
    inst = assemble(problem)
    assert inst.n_vars == 60  # 6 body + 18 toes + 36 forces
    assert len(inst.var_names) == 60
    assert inst.var_names[0] == "r1.com.x"


def test_no_coupling_across_nonadjacent_rounds():
    problem = wall_problem(rounds=3, switchability=True)
    inst = assemble(problem, relax=0.1)
    lay = inst.layout
    mask = inst.sparsity_mask()
    for row in mask:
        rounds = {lay.round_of_var(int(i)) for i in np.nonzero(row)[0]}
        assert max(rounds) - min(rounds) <= 1


def test_round_trip_pack_unpack():
    problem = wall_problem(rounds=2)
    inst = assemble(problem)
    st = stance()
    rounds = [st, RoundState(st.com + 0.01, st.body_euler, st.toe + 0.02,
                             st.force + 1.0)]
    back = inst.from_x(inst.to_x(rounds))
    for a, b in zip(rounds, back):
        np.testing.assert_allclose(a.com, b.com, atol=1e-12)
        np.testing.assert_allclose(a.toe, b.toe, atol=1e-12)
        np.testing.assert_allclose(a.force, b.force, atol=1e-12)


def test_instance_objective_matches_standalone():
    problem = wall_problem(rounds=2)
    inst = assemble(problem)
    st = stance()
    rounds = [st, RoundState(st.com + 0.03, st.body_euler, st.toe - 0.01,
                             st.force * 1.3)]
    x = inst.to_x(rounds)
    assert inst.objective_value(x) == pytest.approx(objective(rounds, problem),
                                                    rel=1e-12)


def _random_point_near(inst, rng, scale=0.1):
    st = standing_stance(inst.problem.robot, inst.problem.scene)
    x = inst.to_x([st] * inst.layout.rounds)
    return x + rng.uniform(-scale, scale, size=inst.n_vars)


def test_constraint_jacobians_match_fd():
    problem = wall_problem(rounds=2, switchability=True)
    inst = assemble(problem, relax=0.05)
    rng = np.random.default_rng(4)
    for _ in range(3):
        x = _random_point_near(inst, rng)
        assert fd_jacobian_error(inst, x) < 1e-5


def test_objective_gradient_matches_fd():
    problem = wall_problem(rounds=2)
    inst = assemble(problem)
    rng = np.random.default_rng(5)
    for _ in range(3):
        x = _random_point_near(inst, rng)
        assert fd_gradient_error(inst, x) < 1e-5


def test_exact_mode_jacobians_match_fd():
    problem = wall_problem(rounds=1, kinematics_mode="exact")
    inst = assemble(problem)
    rng = np.random.default_rng(6)
    st = standing_stance(problem.robot, problem.scene)
    withj = RoundState(st.com, st.body_euler, st.toe, st.force,
                       joint_angles=np.tile([0.1, 0.4, -0.9], (6, 1)))
    x = inst.to_x([withj]) + rng.uniform(-0.05, 0.05, size=inst.n_vars)
    assert fd_jacobian_error(inst, x) < 1e-5


def test_exact_mode_has_fk_and_torque_families():
    problem = wall_problem(rounds=1, kinematics_mode="exact")
    inst = assemble(problem)
    fams = inst.families()
    assert "fk_consistency" in fams and "torque" in fams
    assert "reachability" not in fams and "force_bound" not in fams


def test_without_families_and_relax_views():
    problem = wall_problem(rounds=2, switchability=True)
    inst = assemble(problem, relax=0.0)
    warm = inst.without_families({"complementarity", "switchability"})
    assert "complementarity" not in warm.families()
    assert "contact_bounds" in warm.families()
    st = stance()
    x = inst.to_x([st, st])
    tight = inst.family_residuals(x)["complementarity"]
    loose = inst.with_relax(0.5).family_residuals(x)["complementarity"]
    assert loose <= tight


def test_describe_mentions_variables_and_families():
    problem = wall_problem(rounds=1)
    inst = assemble(problem)
    text = inst.describe(inst.to_x([stance()]))
    assert "r1.com.x" in text
    assert "equilibrium" in text
    assert "residuals at x" in text
