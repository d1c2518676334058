import math
from dataclasses import replace

import numpy as np
import pytest

from src.sim.simcore import (GRAVITY, EnvPhysicsParams, SimWorldState, SurrogateSim, apply_pd,
                             forward_kinematics, leg_jacobian, quat_from_euler, quat_yaw, randomize,
                             standing_height)
from src.sim.terrain import HeightField
from src.utils.config import RandomizationRanges, RobotDescription

ROBOT = RobotDescription()
DT = 0.005


def flat_field(size=20.0, cell=0.1):
    n = int(round(size / cell))
    return HeightField(grid=np.zeros((n + 1, n + 1)), cell_size=cell, tile_rows=1, tile_cols=1,
                       tile_side=size, tile_types=np.zeros((1, 1), dtype=np.int8),
                       tile_levels=np.zeros((1, 1), dtype=np.int8))


def standing(num_envs=2, height=None, field=None):
    field = field or flat_field()
    sim = SurrogateSim(ROBOT, field)
    state = SimWorldState.zeros(num_envs)
    theta0 = np.tile(np.asarray(ROBOT.nominal_joint_positions), (num_envs, 1))
    z = standing_height(ROBOT) if height is None else height
    base = np.tile([10.0, 10.0, z], (num_envs, 1))
    sim.place(state, np.arange(num_envs), base, theta0)
    return sim, state, EnvPhysicsParams.nominal(ROBOT, num_envs), theta0


def test_straight_leg_foot_below_hip():
    hips = np.asarray(ROBOT.hip_mount_offsets).reshape(4, 3)
    for leg, side in enumerate((1, -1, 1, -1)):
        foot = forward_kinematics(np.zeros(3), leg, ROBOT)
        assert np.allclose(foot - hips[leg], [0.0, side * 0.08, -0.4])


def test_right_angle_knee():
    hips = np.asarray(ROBOT.hip_mount_offsets).reshape(4, 3)
    foot = forward_kinematics(np.array([0.0, 0.0, math.pi / 2]), 0, ROBOT) - hips[0]
    assert foot[2] == pytest.approx(-0.2)
    assert abs(foot[0]) == pytest.approx(0.2)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    for leg in range(4):
        theta = rng.uniform(-1.0, 1.0, size=3)
        analytic = leg_jacobian(theta, leg, ROBOT)
        numeric = np.zeros((3, 3))
        for j in range(3):
            step = np.zeros(3)
            step[j] = h
            numeric[:, j] = (forward_kinematics(theta + step, leg, ROBOT)
                             - forward_kinematics(theta - step, leg, ROBOT)) / (2 * h)
        assert np.allclose(analytic, numeric, atol=1e-6)


def test_degenerate_ranges_give_nominals():
    ranges = replace(RandomizationRanges(), body_mass_scale=(1.0, 1.0), link_mass_scale=(1.0, 1.0),
                     com_offset=((0.0, 0.0),) * 3, payload=(0.0, 0.0), friction=(1.0, 1.0),
                     restitution=(0.0, 0.0), motor_strength_scale=(1.0, 1.0), kp_scale=(1.0, 1.0),
                     kd_scale=(1.0, 1.0), init_joint_scale=(1.0, 1.0), delay_steps=(0, 0),
                     external_force=((0.0, 0.0),) * 3)
    drawn = randomize(ranges, ROBOT, 5, np.random.default_rng(1))
    nominal = EnvPhysicsParams.nominal(ROBOT, 5, ranges)
    for name, value in nominal.state_dict().items():
        assert np.array_equal(drawn.state_dict()[name], value), name


def test_default_ranges_statistics():
    params = randomize(RandomizationRanges(), ROBOT, 100_000, np.random.default_rng(2))
    assert params.friction.min() >= 0.2
    assert params.friction.max() <= 2.75
    assert params.friction.mean() == pytest.approx(1.475, abs=0.02)
    assert params.kp.min() >= 16.0 and params.kp.max() <= 24.0
    assert set(np.unique(params.delay_steps)) == {0, 1, 2, 3}


def test_pd_law():
    state = SimWorldState.zeros(1)
    params = EnvPhysicsParams.nominal(ROBOT, 1)
    target = np.zeros((1, 12))
    assert np.allclose(apply_pd(state, params, target, ROBOT), 0.0)
    target[0, 0] = 0.1
    assert apply_pd(state, params, target, ROBOT)[0, 0] == pytest.approx(2.0)
    target[0, 0] = 100.0
    assert apply_pd(state, params, target, ROBOT)[0, 0] == pytest.approx(ROBOT.motor_torque_nominal)


def test_free_fall_acceleration():
    sim, state, params, _ = standing(height=5.0)
    sim.step(state, params, None, DT)
    assert state.base_lin_vel[:, 2] / DT == pytest.approx(-GRAVITY)
    assert not state.foot_contact.any()


def test_standing_equilibrium():
    sim, state, params, theta0 = standing()
    start = state.base_pos[:, 2].copy()
    for _ in range(100):
        sim.step(state, params, theta0, DT)
    assert np.all(np.abs(state.base_pos[:, 2] - start) < 0.01)
    assert state.foot_contact.all()


def test_contact_forces_respect_friction_cone():
    sim, state, params, theta0 = standing(num_envs=4)
    params.external_force[:] = [20.0, -15.0, 0.0]
    params.friction[:] = [0.2, 0.5, 1.0, 2.0]
    for _ in range(50):
        sim.step(state, params, theta0, DT)
        normal = state.foot_force[..., 2]
        tangential = np.linalg.norm(state.foot_force[..., :2], axis=-1)
        assert np.all(normal >= 0.0)
        assert np.all(tangential <= params.friction[:, None] * normal + 1e-9)


def test_frictionless_push_slides():
    sim, state, params, theta0 = standing(num_envs=1)
    params.friction[:] = 0.0
    params.external_force[:] = [0.0, 30.0, 0.0]
    for _ in range(40):
        sim.step(state, params, theta0, DT)
    assert np.allclose(state.foot_force[..., :2], 0.0)
    assert state.base_lin_vel[0, 1] > 0.0


def test_energy_drift_in_flight():
    sim, state, params, theta0 = standing(num_envs=1, height=200.0)
    state.base_lin_vel[:] = [1.0, 0.0, 0.0]
    mass = params.total_mass[0]

    def energy():
        v = state.base_lin_vel[0]
        return 0.5 * mass * float(v @ v) + mass * GRAVITY * state.base_pos[0, 2]

    start = energy()
    for _ in range(1000):
        sim.step(state, params, None, DT)
    assert abs(energy() - start) / abs(start) < 0.01


def test_invariants_hold_while_walking_randomly():
    sim, state, params, theta0 = standing(num_envs=3)
    rng = np.random.default_rng(3)
    state.base_ang_vel[:] = rng.normal(size=(3, 3))
    for _ in range(200):
        target = theta0 + 0.3 * rng.standard_normal(theta0.shape)
        sim.step(state, params, target, DT)
        assert np.allclose(np.linalg.norm(state.base_quat, axis=1), 1.0, atol=1e-6)
        assert np.allclose(np.linalg.norm(state.gravity_in_body, axis=1), 1.0, atol=1e-6)
        assert np.all(state.joint_pos >= sim.lower) and np.all(state.joint_pos <= sim.upper)


def test_delay_applies_old_target():
    sim, state, params, theta0 = standing(num_envs=2)
    params.delay_steps[:] = [0, 2]
    target = theta0 + 0.2
    sim.step(state, params, target, DT)
    # delayed env still tracks the initial joints, so its torque stays near zero
    assert np.abs(state.joint_torque[1]).max() < 1e-9
    assert np.abs(state.joint_torque[0]).max() > 1.0


def test_deterministic_for_fixed_workers():
    def run():
        _, state, _, theta0 = standing(num_envs=6)
        sim = SurrogateSim(ROBOT, flat_field(), workers=2)
        params = randomize(RandomizationRanges(), ROBOT, 6, np.random.default_rng(4))
        rng = np.random.default_rng(5)
        for _ in range(30):
            sim.step(state, params, theta0 + 0.2 * rng.standard_normal(theta0.shape), DT)
        sim.close()
        return state

    a, b = run(), run()
    for name, value in a.state_dict().items():
        assert value.tobytes() == b.state_dict()[name].tobytes(), name


def test_blowup_is_flagged():
    sim, state, params, theta0 = standing(num_envs=2)
    state.base_lin_vel[1] = [1e9, 0.0, 0.0]
    sim.step(state, params, theta0, DT)
    assert state.blown_up.tolist() == [False, True]
    assert np.all(state.base_lin_vel[1] == 0.0)
    assert np.all(np.isfinite(state.base_pos))


def test_yaw_roundtrip():
    yaw = np.array([0.3, -2.0])
    q = quat_from_euler(np.zeros(2), np.zeros(2), yaw)
    assert np.allclose(quat_yaw(q), yaw)


def test_state_dict_shape_check():
    state = SimWorldState.zeros(2)
    saved = state.state_dict("sim.")
    other = SimWorldState.zeros(2)
    other.load_state_dict(saved, "sim.")
    saved["sim.base_pos"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        other.load_state_dict(saved, "sim.")
