"""
Rewards Module

Reward terms for velocity-tracking locomotion and the termination signal.

Each term is a small function of the batched state returning one raw value
per env (tracking terms in (0, 1], penalties >= 0). The weighted sum is scaled
by the policy step so weights stay comparable across control rates.
"""

import logging
from dataclasses import dataclass, fields
from typing import Callable, Dict

import numpy as np

from src.sim.simcore import SimWorldState
from src.sim.terrain import HeightField, sample_heights
from src.utils.config import RewardConfig, RobotDescription

logger = logging.getLogger(__name__)

MIN_BASE_CLEARANCE = 0.05
MAX_TILT_DEG = 80.0


@dataclass
class RewardContext:
    """Everything a reward term may look at for one policy step."""

    state: SimWorldState
    command: np.ndarray
    action: np.ndarray
    prev_action: np.ndarray
    prev_prev_action: np.ndarray
    field: HeightField
    robot: RobotDescription
    sigma: float

    def __post_init__(self):
        self.lin_vel = self.state.lin_vel_body()
        self.ang_vel = self.state.ang_vel_body()


def _lin_vel_tracking(ctx: RewardContext) -> np.ndarray:
    error = np.sum(np.square(ctx.command[:, :2] - ctx.lin_vel[:, :2]), axis=1)
    return np.exp(-error / ctx.sigma)


def _ang_vel_tracking(ctx: RewardContext) -> np.ndarray:
    error = np.square(ctx.command[:, 2] - ctx.ang_vel[:, 2])
    return np.exp(-error / ctx.sigma)


def _lin_vel_z(ctx: RewardContext) -> np.ndarray:
    return np.square(ctx.lin_vel[:, 2])


def _ang_vel_xy(ctx: RewardContext) -> np.ndarray:
    return np.sum(np.square(ctx.ang_vel[:, :2]), axis=1)


def _orientation(ctx: RewardContext) -> np.ndarray:
    # tilt only; the full projected gravity is a unit vector
    return np.sum(np.square(ctx.state.gravity_in_body[:, :2]), axis=1)


def _joint_acc(ctx: RewardContext) -> np.ndarray:
    return np.sum(np.square(ctx.state.joint_acc), axis=1)


def _joint_power(ctx: RewardContext) -> np.ndarray:
    return np.sum(np.abs(ctx.state.joint_torque * ctx.state.joint_vel), axis=1)


def _base_height(ctx: RewardContext) -> np.ndarray:
    return np.square(ctx.robot.base_height_target - base_clearance(ctx.state, ctx.field))


def _foot_clearance(ctx: RewardContext) -> np.ndarray:
    foot = ctx.state.foot_pos
    height = foot[..., 2] - sample_heights(ctx.field, foot[..., 0], foot[..., 1])
    speed = np.linalg.norm(ctx.state.foot_vel_body()[..., :2], axis=-1)
    return np.sum(np.square(ctx.robot.foot_clearance_target - height) * speed, axis=1)


def _action_rate(ctx: RewardContext) -> np.ndarray:
    return np.sum(np.square(ctx.action - ctx.prev_action), axis=1)


def _smoothness(ctx: RewardContext) -> np.ndarray:
    return np.sum(np.square(ctx.action - 2.0 * ctx.prev_action + ctx.prev_prev_action), axis=1)


REWARD_TERMS: Dict[str, Callable[[RewardContext], np.ndarray]] = {
    "lin_vel_tracking": _lin_vel_tracking,
    "ang_vel_tracking": _ang_vel_tracking,
    "lin_vel_z": _lin_vel_z,
    "ang_vel_xy": _ang_vel_xy,
    "orientation": _orientation,
    "joint_acc": _joint_acc,
    "joint_power": _joint_power,
    "base_height": _base_height,
    "foot_clearance": _foot_clearance,
    "action_rate": _action_rate,
    "smoothness": _smoothness,
}


@dataclass
class RewardBreakdown:
    terms: Dict[str, np.ndarray]
    weights: Dict[str, float]
    dt: float

    def weighted(self, name: str) -> np.ndarray:
        return self.weights[name] * self.terms[name] * self.dt

    @property
    def total(self) -> np.ndarray:
        return sum(self.weighted(name) for name in self.terms)


def reward_weights(cfg: RewardConfig) -> Dict[str, float]:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name in REWARD_TERMS}


def base_clearance(state: SimWorldState, field: HeightField) -> np.ndarray:
    """Base height above the terrain directly beneath it."""
    pos = state.base_pos
    return pos[:, 2] - sample_heights(field, pos[:, 0], pos[:, 1])


def compute(state: SimWorldState, command: np.ndarray, action: np.ndarray,
            prev_action: np.ndarray, prev_prev_action: np.ndarray, field: HeightField,
            cfg: RewardConfig, robot: RobotDescription, policy_dt: float) -> RewardBreakdown:
    """
    Evaluate every reward term for a batch of envs.

    Args:
        state: Simulator state after the control tick
        command: (N, 3) commanded body-frame vx, vy, yaw rate
        action, prev_action, prev_prev_action: (N, 12) a_t, a_{t-1}, a_{t-2}
        cfg: Term weights and tracking sigma
        policy_dt: Control period; the weighted total is scaled by it

    Returns:
        RewardBreakdown with raw per-term values and weights
    """
    ctx = RewardContext(state=state, command=command, action=action, prev_action=prev_action,
                        prev_prev_action=prev_prev_action, field=field, robot=robot, sigma=cfg.sigma)
    terms = {name: fn(ctx) for name, fn in REWARD_TERMS.items()}
    return RewardBreakdown(terms=terms, weights=reward_weights(cfg), dt=policy_dt)


def terminated(state: SimWorldState, field: HeightField) -> np.ndarray:
    """Collapsed body, excessive tilt or numerical blow-up."""
    collapsed = base_clearance(state, field) < MIN_BASE_CLEARANCE
    tilted = -state.gravity_in_body[:, 2] < np.cos(np.radians(MAX_TILT_DEG))
    return collapsed | tilted | state.blown_up
