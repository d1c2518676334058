"""
Simcore Module

Batched surrogate quadruped dynamics.

MODEL:
- joints: PD torques drive a lumped second-order model per joint
  (theta_dd = (tau - damping * theta_d) / inertia), clamped at joint limits
- legs: analytic 3-joint chain (hip abduction, hip pitch, knee) per leg
- feet: spring-damper normal force against the heightfield with regularized
  Coulomb friction (tangential force capped at mu * F_n)
- base: one rigid body carrying body, link and payload mass, integrated with
  semi-implicit Euler; orientation advanced with the exponential map

Quaternions are (w, x, y, z). Base velocities are stored in the world frame.
Environments never interact, so a step may be split across worker threads.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import Dict, Optional, Sequence

import numpy as np

from src.sim.terrain import HeightField, sample_heights, surface_normals
from src.utils.config import ContactConfig, RandomizationRanges, RobotDescription

logger = logging.getLogger(__name__)

GRAVITY = 9.81
NUM_LEGS = 4
MAX_DELAY = 3
BLOWUP_LIMIT = 1e6
# FL, FR, RL, RR
LEG_SIDES = np.array([1.0, -1.0, 1.0, -1.0])


# ---------------------------------------------------------------------------
# Quaternion helpers
# ---------------------------------------------------------------------------

def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def quat_from_euler(roll: np.ndarray, pitch: np.ndarray, yaw: np.ndarray) -> np.ndarray:
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    return np.stack([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ], axis=-1)


def quat_yaw(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))


def quat_exp(rotvec: np.ndarray) -> np.ndarray:
    """Unit quaternion for a rotation vector."""
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    small = angle < 1e-12
    safe = np.where(small, 1.0, angle)
    axis_scale = np.where(small, 0.5, np.sin(safe / 2) / safe)
    return np.concatenate([np.cos(angle / 2), rotvec * axis_scale], axis=-1)


# ---------------------------------------------------------------------------
# State containers
# ---------------------------------------------------------------------------

class _ArrayBundle:
    """state_dict / take / assign for dataclasses whose fields are per-env arrays."""

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {f"{prefix}{f.name}": np.array(getattr(self, f.name)) for f in fields(self)}

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "") -> None:
        for f in fields(self):
            current = getattr(self, f.name)
            value = np.asarray(state[f"{prefix}{f.name}"])
            if value.shape != current.shape:
                raise ValueError(f"{prefix}{f.name}: shape {value.shape} != {current.shape}")
            current[...] = value

    def take(self, env_ids):
        return type(self)(**{f.name: np.array(getattr(self, f.name)[env_ids]) for f in fields(self)})

    def assign(self, env_ids, other) -> None:
        for f in fields(self):
            getattr(self, f.name)[env_ids] = getattr(other, f.name)

    @property
    def num_envs(self) -> int:
        return len(getattr(self, fields(self)[0].name))


@dataclass
class SimWorldState(_ArrayBundle):
    base_pos: np.ndarray
    base_quat: np.ndarray
    base_lin_vel: np.ndarray
    base_ang_vel: np.ndarray
    joint_pos: np.ndarray
    joint_vel: np.ndarray
    joint_acc: np.ndarray
    joint_torque: np.ndarray
    foot_pos: np.ndarray
    foot_vel: np.ndarray
    foot_force: np.ndarray
    foot_contact: np.ndarray
    gravity_in_body: np.ndarray
    time: np.ndarray
    blown_up: np.ndarray
    # most recent joint target first; index k = issued k control ticks ago
    target_queue: np.ndarray

    @classmethod
    def zeros(cls, num_envs: int, num_joints: int = 12) -> "SimWorldState":
        quat = np.zeros((num_envs, 4))
        quat[:, 0] = 1.0
        gravity = np.zeros((num_envs, 3))
        gravity[:, 2] = -1.0
        return cls(
            base_pos=np.zeros((num_envs, 3)),
            base_quat=quat,
            base_lin_vel=np.zeros((num_envs, 3)),
            base_ang_vel=np.zeros((num_envs, 3)),
            joint_pos=np.zeros((num_envs, num_joints)),
            joint_vel=np.zeros((num_envs, num_joints)),
            joint_acc=np.zeros((num_envs, num_joints)),
            joint_torque=np.zeros((num_envs, num_joints)),
            foot_pos=np.zeros((num_envs, NUM_LEGS, 3)),
            foot_vel=np.zeros((num_envs, NUM_LEGS, 3)),
            foot_force=np.zeros((num_envs, NUM_LEGS, 3)),
            foot_contact=np.zeros((num_envs, NUM_LEGS), dtype=bool),
            gravity_in_body=gravity,
            time=np.zeros(num_envs),
            blown_up=np.zeros(num_envs, dtype=bool),
            target_queue=np.zeros((num_envs, MAX_DELAY + 1, num_joints)),
        )

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.base_quat)

    def lin_vel_body(self) -> np.ndarray:
        return np.einsum("nji,nj->ni", self.rotation(), self.base_lin_vel)

    def ang_vel_body(self) -> np.ndarray:
        return np.einsum("nji,nj->ni", self.rotation(), self.base_ang_vel)

    def foot_vel_body(self) -> np.ndarray:
        return np.einsum("nji,nfj->nfi", self.rotation(), self.foot_vel)

    def yaw(self) -> np.ndarray:
        return quat_yaw(self.base_quat)


@dataclass
class EnvPhysicsParams(_ArrayBundle):
    body_mass: np.ndarray
    link_masses: np.ndarray
    com_offset: np.ndarray
    payload: np.ndarray
    friction: np.ndarray
    restitution: np.ndarray
    motor_strength: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    init_joint_scale: np.ndarray
    delay_steps: np.ndarray
    # body frame, constant over an episode
    external_force: np.ndarray

    @property
    def total_mass(self) -> np.ndarray:
        return self.body_mass + self.link_masses.sum(axis=-1) + self.payload

    @classmethod
    def nominal(cls, robot: RobotDescription, num_envs: int,
                ranges: Optional[RandomizationRanges] = None) -> "EnvPhysicsParams":
        ranges = ranges or RandomizationRanges()
        ones = np.ones(num_envs)
        return cls(
            body_mass=ones * robot.base_mass_nominal,
            link_masses=np.tile(np.asarray(robot.link_masses_nominal), (num_envs, 1)),
            com_offset=np.zeros((num_envs, 3)),
            payload=np.zeros(num_envs),
            friction=ones.copy(),
            restitution=np.zeros(num_envs),
            motor_strength=ones.copy(),
            kp=ones * ranges.kp_nominal,
            kd=ones * ranges.kd_nominal,
            init_joint_scale=np.ones((num_envs, robot.num_joints)),
            delay_steps=np.zeros(num_envs, dtype=np.int64),
            external_force=np.zeros((num_envs, 3)),
        )


def randomize(ranges: RandomizationRanges, robot: RobotDescription, num_envs: int,
              rng: np.random.Generator) -> EnvPhysicsParams:
    """
    Draw per-environment physics parameters, each uniform and independent.

    Scale-type entries multiply the nominal value (kp and kd multiply their
    nominal gains of 20 and 0.5). Delay is an integer number of control ticks.
    """
    def uniform(interval, size=None):
        return rng.uniform(interval[0], interval[1], size=size)

    n = num_envs
    body_mass = uniform(ranges.body_mass_scale, n) * robot.base_mass_nominal
    link_masses = uniform(ranges.link_mass_scale, (n, robot.num_joints)) * np.asarray(robot.link_masses_nominal)
    com_offset = np.stack([uniform(axis, n) for axis in ranges.com_offset], axis=-1)
    payload = uniform(ranges.payload, n)
    friction = uniform(ranges.friction, n)
    restitution = uniform(ranges.restitution, n)
    motor_strength = uniform(ranges.motor_strength_scale, n)
    kp = uniform(ranges.kp_scale, n) * ranges.kp_nominal
    kd = uniform(ranges.kd_scale, n) * ranges.kd_nominal
    init_joint_scale = uniform(ranges.init_joint_scale, (n, robot.num_joints))
    delay_steps = rng.integers(ranges.delay_steps[0], ranges.delay_steps[1] + 1, size=n)
    external_force = np.stack([uniform(axis, n) for axis in ranges.external_force], axis=-1)
    return EnvPhysicsParams(
        body_mass=body_mass,
        link_masses=link_masses,
        com_offset=com_offset,
        payload=payload,
        friction=friction,
        restitution=restitution,
        motor_strength=motor_strength,
        kp=kp,
        kd=kd,
        init_joint_scale=init_joint_scale,
        delay_steps=delay_steps.astype(np.int64),
        external_force=external_force,
    )


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def _leg_geometry(robot: RobotDescription):
    l0, l1, l2 = robot.leg_link_lengths
    hips = np.asarray(robot.hip_mount_offsets, dtype=np.float64).reshape(NUM_LEGS, 3)
    return l0, l1, l2, hips


def forward_kinematics(theta_leg: np.ndarray, leg_index: int,
                       robot: RobotDescription) -> np.ndarray:
    """
    Foot position in the base frame for one leg.

    Args:
        theta_leg: (..., 3) hip abduction, hip pitch, knee angles (rad)
        leg_index: 0..3 for FL, FR, RL, RR

    Returns:
        (..., 3) foot position, hip mounting offset included
    """
    l0, l1, l2, hips = _leg_geometry(robot)
    return _fk(np.asarray(theta_leg, dtype=np.float64), LEG_SIDES[leg_index], l0, l1, l2) + hips[leg_index]


def _fk(theta: np.ndarray, side, l0: float, l1: float, l2: float) -> np.ndarray:
    q1, q2, q3 = theta[..., 0], theta[..., 1], theta[..., 2]
    xs = -l1 * np.sin(q2) - l2 * np.sin(q2 + q3)
    zs = -l1 * np.cos(q2) - l2 * np.cos(q2 + q3)
    ys = side * l0 * np.ones_like(q1)
    c1, s1 = np.cos(q1), np.sin(q1)
    return np.stack([xs, ys * c1 - zs * s1, ys * s1 + zs * c1], axis=-1)


def _jacobian(theta: np.ndarray, side, l0: float, l1: float, l2: float) -> np.ndarray:
    q1, q2, q3 = theta[..., 0], theta[..., 1], theta[..., 2]
    xs = -l1 * np.sin(q2) - l2 * np.sin(q2 + q3)
    zs = -l1 * np.cos(q2) - l2 * np.cos(q2 + q3)
    ys = side * l0 * np.ones_like(q1)
    c1, s1 = np.cos(q1), np.sin(q1)
    dzs_dq2 = -xs
    dzs_dq3 = l2 * np.sin(q2 + q3)
    zero = np.zeros_like(q1)
    row_x = np.stack([zero, zs, -l2 * np.cos(q2 + q3)], axis=-1)
    row_y = np.stack([-ys * s1 - zs * c1, -s1 * dzs_dq2, -s1 * dzs_dq3], axis=-1)
    row_z = np.stack([ys * c1 - zs * s1, c1 * dzs_dq2, c1 * dzs_dq3], axis=-1)
    return np.stack([row_x, row_y, row_z], axis=-2)


def leg_jacobian(theta_leg: np.ndarray, leg_index: int, robot: RobotDescription) -> np.ndarray:
    """(..., 3, 3) derivative of the foot position with respect to the leg joints."""
    l0, l1, l2, _ = _leg_geometry(robot)
    return _jacobian(np.asarray(theta_leg, dtype=np.float64), LEG_SIDES[leg_index], l0, l1, l2)


def feet_body(joint_pos: np.ndarray, joint_vel: np.ndarray, robot: RobotDescription):
    """Foot positions and joint-driven foot velocities for all legs, base frame."""
    l0, l1, l2, hips = _leg_geometry(robot)
    theta = joint_pos.reshape(-1, NUM_LEGS, 3)
    theta_d = joint_vel.reshape(-1, NUM_LEGS, 3)
    side = LEG_SIDES[None, :]
    pos = _fk(theta, side, l0, l1, l2) + hips[None]
    vel = np.einsum("nlij,nlj->nli", _jacobian(theta, side, l0, l1, l2), theta_d)
    return pos, vel


def standing_height(robot: RobotDescription) -> float:
    """Base height at which the nominal stance just touches flat ground."""
    theta0 = np.asarray(robot.nominal_joint_positions)[None]
    pos, _ = feet_body(theta0, np.zeros_like(theta0), robot)
    return float(-pos[0, :, 2].min())


# ---------------------------------------------------------------------------
# Actuation
# ---------------------------------------------------------------------------

def pd_torques(joint_pos: np.ndarray, joint_vel: np.ndarray, theta_target: np.ndarray,
               kp: np.ndarray, kd: np.ndarray, motor_strength: np.ndarray,
               motor_torque_nominal: float) -> np.ndarray:
    torque = kp[:, None] * (theta_target - joint_pos) - kd[:, None] * joint_vel
    limit = (motor_strength * motor_torque_nominal)[:, None]
    return np.clip(torque, -limit, limit)


def apply_pd(state: SimWorldState, params: EnvPhysicsParams, theta_target: np.ndarray,
             robot: RobotDescription) -> np.ndarray:
    """tau = kp * (theta_target - theta) - kd * theta_dot, clamped to +-motor_strength * nominal torque."""
    return pd_torques(state.joint_pos, state.joint_vel, theta_target, params.kp, params.kd,
                      params.motor_strength, robot.motor_torque_nominal)


def enqueue_targets(state: SimWorldState, theta_target: np.ndarray) -> None:
    """Push one control tick's joint targets onto the delay queue."""
    state.target_queue[:, 1:] = state.target_queue[:, :-1].copy()
    state.target_queue[:, 0] = theta_target


def delayed_targets(state: SimWorldState, params: EnvPhysicsParams) -> np.ndarray:
    delay = np.clip(params.delay_steps, 0, MAX_DELAY)
    return state.target_queue[np.arange(state.num_envs), delay]


# ---------------------------------------------------------------------------
# Simulator
# ---------------------------------------------------------------------------

class SurrogateSim:
    """
    Stepper for a batch of independent robots on one heightfield.

    Knows how to:
    - place robots (reset poses)
    - advance all robots one physics step, optionally sharded across threads
    - flag robots whose state blew up numerically
    """

    def __init__(self, robot: RobotDescription, field: HeightField,
                 contact: Optional[ContactConfig] = None, workers: int = 1):
        self.robot = robot
        self.field = field
        self.contact = contact or ContactConfig()
        self.workers = max(int(workers), 1)
        self._pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None

        self.lower = np.asarray(robot.joint_lower_limits)
        self.upper = np.asarray(robot.joint_upper_limits)
        self.inertia = np.asarray(robot.base_inertia_nominal, dtype=np.float64).reshape(3, 3)
        self.inertia_inv = np.linalg.inv(self.inertia)
        self.nominal_mass = robot.base_mass_nominal + float(np.sum(robot.link_masses_nominal))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def place(self, state: SimWorldState, env_ids: np.ndarray, base_pos: np.ndarray,
              joint_pos: np.ndarray, yaw: Optional[np.ndarray] = None) -> None:
        """Put robots at rest at the given pose; the delay queue holds the initial joints."""
        n = len(env_ids)
        yaw = np.zeros(n) if yaw is None else yaw
        state.base_pos[env_ids] = base_pos
        state.base_quat[env_ids] = quat_from_euler(np.zeros(n), np.zeros(n), yaw)
        state.base_lin_vel[env_ids] = 0.0
        state.base_ang_vel[env_ids] = 0.0
        state.joint_pos[env_ids] = joint_pos
        state.joint_vel[env_ids] = 0.0
        state.joint_acc[env_ids] = 0.0
        state.joint_torque[env_ids] = 0.0
        state.foot_force[env_ids] = 0.0
        state.foot_contact[env_ids] = False
        state.time[env_ids] = 0.0
        state.blown_up[env_ids] = False
        state.target_queue[env_ids] = joint_pos[:, None, :]
        self._update_feet(state, np.asarray(env_ids))

    def step(self, state: SimWorldState, params: EnvPhysicsParams,
             theta_target: Optional[np.ndarray], dt: float) -> SimWorldState:
        """
        Advance every robot by dt (in place) and return the state.

        Args:
            theta_target: Joint targets issued this control tick, pushed onto the
                delay queue; None on the remaining substeps of a tick. The target
                actually applied is the one issued delay_steps ticks ago.
            dt: Physics step (the configured sim_dt)
        """
        if theta_target is not None:
            enqueue_targets(state, theta_target)
        n = state.num_envs
        if self._pool is None or n < 2 * self.workers:
            self._step_slice(state, params, slice(0, n), dt)
        else:
            bounds = np.linspace(0, n, self.workers + 1).astype(int)
            slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            list(self._pool.map(lambda sl: self._step_slice(state, params, sl, dt), slices))
        return state

    def _update_feet(self, state: SimWorldState, idx) -> None:
        rot = quat_to_matrix(state.base_quat[idx])
        pos_b, vel_b = feet_body(state.joint_pos[idx], state.joint_vel[idx], self.robot)
        arm = np.einsum("nij,nfj->nfi", rot, pos_b)
        state.foot_pos[idx] = state.base_pos[idx][:, None, :] + arm
        state.foot_vel[idx] = (state.base_lin_vel[idx][:, None, :]
                               + np.cross(state.base_ang_vel[idx][:, None, :], arm)
                               + np.einsum("nij,nfj->nfi", rot, vel_b))
        state.gravity_in_body[idx] = -rot[:, 2, :]

    def _step_slice(self, state: SimWorldState, params: EnvPhysicsParams, sl: slice, dt: float) -> None:
        robot, contact = self.robot, self.contact
        rows = np.arange(sl.start, sl.stop)

        # joints
        delay = np.clip(params.delay_steps[sl], 0, MAX_DELAY)
        target = state.target_queue[rows, delay]
        torque = pd_torques(state.joint_pos[sl], state.joint_vel[sl], target, params.kp[sl],
                            params.kd[sl], params.motor_strength[sl], robot.motor_torque_nominal)
        acc = (torque - robot.joint_damping * state.joint_vel[sl]) / robot.joint_inertia
        joint_vel = state.joint_vel[sl] + acc * dt
        joint_pos = state.joint_pos[sl] + joint_vel * dt
        at_limit = (joint_pos < self.lower) | (joint_pos > self.upper)
        joint_pos = np.clip(joint_pos, self.lower, self.upper)
        joint_vel = np.where(at_limit, 0.0, joint_vel)
        state.joint_acc[sl] = acc
        state.joint_torque[sl] = torque
        state.joint_vel[sl] = joint_vel
        state.joint_pos[sl] = joint_pos
        self._update_feet(state, sl)

        # contacts
        foot_pos, foot_vel = state.foot_pos[sl], state.foot_vel[sl]
        ground = sample_heights(self.field, foot_pos[..., 0], foot_pos[..., 1])
        penetration = ground - foot_pos[..., 2]
        in_contact = penetration > 0.0
        normals = surface_normals(self.field, foot_pos[..., 0], foot_pos[..., 1])
        v_n = np.sum(foot_vel * normals, axis=-1)
        damping = contact.damping_max * (1.0 - params.restitution[sl])[:, None]
        f_n = np.where(in_contact, np.maximum(contact.stiffness * penetration - damping * v_n, 0.0), 0.0)
        v_t = foot_vel - v_n[..., None] * normals
        f_t = -contact.tangential_damping * v_t
        f_t_norm = np.linalg.norm(f_t, axis=-1)
        cap = params.friction[sl][:, None] * f_n
        scale = np.where(f_t_norm > cap, cap / np.maximum(f_t_norm, 1e-12), 1.0)
        f_t = np.where(in_contact[..., None], f_t * scale[..., None], 0.0)
        foot_force = f_n[..., None] * normals + f_t
        state.foot_force[sl] = foot_force
        state.foot_contact[sl] = in_contact

        # base
        rot = quat_to_matrix(state.base_quat[sl])
        mass = params.total_mass[sl]
        force = foot_force.sum(axis=1) + np.einsum("nij,nj->ni", rot, params.external_force[sl])
        force[:, 2] -= mass * GRAVITY
        com = state.base_pos[sl] + np.einsum("nij,nj->ni", rot, params.com_offset[sl])
        torque_w = np.cross(foot_pos - com[:, None, :], foot_force).sum(axis=1)

        lin_vel = state.base_lin_vel[sl] + force / mass[:, None] * dt
        base_pos = state.base_pos[sl] + lin_vel * dt

        inertia_scale = (mass / self.nominal_mass)[:, None]
        omega_b = np.einsum("nji,nj->ni", rot, state.base_ang_vel[sl])
        torque_b = np.einsum("nji,nj->ni", rot, torque_w)
        gyro = np.cross(omega_b, inertia_scale * (omega_b @ self.inertia.T))
        omega_dot = ((torque_b - gyro) @ self.inertia_inv.T) / inertia_scale
        omega_b = omega_b + omega_dot * dt
        quat = quat_multiply(state.base_quat[sl], quat_exp(omega_b * dt))
        quat /= np.linalg.norm(quat, axis=-1, keepdims=True)

        state.base_lin_vel[sl] = lin_vel
        state.base_pos[sl] = base_pos
        state.base_quat[sl] = quat
        state.base_ang_vel[sl] = np.einsum("nij,nj->ni", quat_to_matrix(quat), omega_b)
        state.time[sl] += dt
        self._update_feet(state, sl)
        self._flag_blowups(state, sl)

    def _flag_blowups(self, state: SimWorldState, sl: slice) -> None:
        watched = (state.base_pos[sl], state.base_lin_vel[sl], state.base_ang_vel[sl],
                   state.joint_pos[sl], state.joint_vel[sl], state.base_quat[sl])
        bad = np.zeros(sl.stop - sl.start, dtype=bool)
        for arr in watched:
            flat = arr.reshape(len(bad), -1)
            bad |= ~np.all(np.isfinite(flat) & (np.abs(flat) <= BLOWUP_LIMIT), axis=1)
        if not bad.any():
            return
        rows = np.arange(sl.start, sl.stop)[bad]
        logger.warning(f"Numerical blow-up in {len(rows)} env(s); flagged for reset")
        state.blown_up[rows] = True
        for arr in (state.base_lin_vel, state.base_ang_vel, state.joint_vel, state.joint_acc,
                    state.foot_vel, state.foot_force):
            arr[rows] = 0.0
        for arr in (state.base_pos, state.joint_pos, state.foot_pos):
            arr[rows] = np.nan_to_num(arr[rows], nan=0.0, posinf=0.0, neginf=0.0)
        quat = np.zeros((len(rows), 4))
        quat[:, 0] = 1.0
        state.base_quat[rows] = quat
