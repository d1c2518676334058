"""
Env Module

Batched locomotion environment on top of the surrogate simulator.

RESPONSIBILITIES:
- actor observation frames (45 values, proprioception + command + last action)
  and the privileged critic observation (adds push force and height scan)
- history window for the internal-model encoder
- action -> joint target mapping, control decimation
- command sampling and resampling, episode resets with domain randomization
- terrain curriculum (promotion, demotion, graduation)

Every per-env draw (reset randomization, spawn jitter, commands, graduation
levels) comes from that env's own counter-based stream, so a reset of env i
depends only on the seed and on how many times env i has been reset.
"""

import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable, Dict, List, Optional

import numpy as np

from src.sim import rewards
from src.sim.simcore import (EnvPhysicsParams, SimWorldState, SurrogateSim, randomize)
from src.sim.terrain import (HeightField, TerrainType, build_field, height_samples,
                             sample_heights, tile_center)
from src.utils.config import CurriculumConfig, TrainConfig
from src.utils.seeding import EnvStreams

logger = logging.getLogger(__name__)

OBS_DIM = 45
FORCE_DIM = 3

RESET_SALT = 0
COMMAND_SALT = 1
CURRICULUM_SALT = 2

CommandSampler = Callable[[int, np.random.Generator], np.ndarray]


def command_ranges(terrain_type: TerrainType, cfg: CurriculumConfig) -> np.ndarray:
    """(3, 2) sampling intervals for vx, vy and yaw rate on a terrain family."""
    if TerrainType(terrain_type).is_open:
        return np.array([cfg.open_lin_x, cfg.open_lin_y, cfg.open_ang_yaw], dtype=np.float64)
    return np.array([cfg.complex_lin_x, cfg.complex_lin_y, cfg.complex_ang_yaw], dtype=np.float64)


def sample_command(terrain_type: TerrainType, cfg: CurriculumConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """Uniform command [vx, vy, yaw rate] from the family's ranges."""
    ranges = command_ranges(terrain_type, cfg)
    return rng.uniform(ranges[:, 0], ranges[:, 1])


def update_curriculum(levels: np.ndarray, mean_lin_tracking: np.ndarray, distance: np.ndarray,
                      cfg: CurriculumConfig, tile_side: float,
                      rng: np.random.Generator) -> np.ndarray:
    """
    Next terrain levels from finished-episode statistics.

    Promotion (mean per-step linear tracking reward >= threshold) takes precedence
    over demotion (distance walked < demote_fraction * tile_side). An env
    promoted past the top level graduates to a uniformly random level.
    """
    levels = np.asarray(levels, dtype=np.int64)
    promote = np.asarray(mean_lin_tracking) >= cfg.promote_threshold
    demote = ~promote & (np.asarray(distance) < cfg.demote_fraction * tile_side)
    new = np.clip(levels + promote.astype(np.int64) - demote.astype(np.int64), 0, cfg.max_level)
    graduated = promote & (levels >= cfg.max_level)
    if graduated.any():
        new[graduated] = rng.integers(0, cfg.max_level + 1, size=int(graduated.sum()))
    return new


class HistoryBuffer:
    """The last H observation frames per env, oldest first."""

    def __init__(self, num_envs: int, history_len: int, frame_dim: int = OBS_DIM):
        self.frames = np.zeros((num_envs, history_len, frame_dim))

    @property
    def history_len(self) -> int:
        return self.frames.shape[1]

    def push(self, frames: np.ndarray) -> None:
        self.frames[:, :-1] = self.frames[:, 1:].copy()
        self.frames[:, -1] = frames

    def backfill(self, env_ids: np.ndarray, frames: np.ndarray) -> None:
        self.frames[env_ids] = frames[:, None, :]

    def window(self, current: np.ndarray) -> np.ndarray:
        """H past frames followed by the current one, flattened per env."""
        return np.concatenate([self.frames.reshape(len(self.frames), -1), current], axis=1)


@dataclass
class EpisodeStats:
    env_id: int
    terrain_type: int
    level: int
    length: int
    total_reward: float
    mean_lin_tracking: float
    mean_ang_tracking: float
    distance: float


@dataclass
class StepResult:
    obs: np.ndarray
    history: np.ndarray
    critic_obs: np.ndarray
    reward: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    # observation right after the step, before any auto-reset
    next_frames: np.ndarray
    breakdown: rewards.RewardBreakdown
    # commands and body-frame base velocities the rewards were computed from
    commands: np.ndarray
    base_lin_vel: np.ndarray
    base_ang_vel: np.ndarray
    episodes: List[EpisodeStats] = dc_field(default_factory=list)


class LocomotionEnv:
    """
    Batched environments, one robot each, sharing one heightfield.

    Env i lives on terrain row i mod tile_rows; its column follows its
    curriculum level. Evaluation pins rows, levels and the command sampler.
    """

    def __init__(self, cfg: TrainConfig, field: Optional[HeightField] = None, workers: int = 1,
                 terrain_rows: Optional[np.ndarray] = None, levels: Optional[np.ndarray] = None,
                 command_sampler: Optional[CommandSampler] = None,
                 resample_commands: bool = True, curriculum: Optional[bool] = None,
                 episode_length_s: Optional[float] = None, seed: Optional[int] = None):
        self.cfg = cfg
        self.num_envs = n = cfg.num_envs
        self.seed = cfg.seed if seed is None else int(seed)
        self.field = field if field is not None else build_field(self.seed, cfg.terrain.proportions, cfg.terrain)
        self.sim = SurrogateSim(cfg.robot, self.field, cfg.contact, workers=workers)
        self.robot = cfg.robot
        self.theta0 = np.asarray(cfg.robot.nominal_joint_positions, dtype=np.float64)
        self.curriculum_enabled = cfg.curriculum.enabled if curriculum is None else curriculum
        self.resample_commands = resample_commands
        self.command_sampler = command_sampler
        length_s = cfg.env.episode_length_s if episode_length_s is None else episode_length_s
        self.max_episode_steps = int(round(length_s / cfg.policy_dt))

        rows = np.arange(n) % self.field.tile_rows if terrain_rows is None else terrain_rows
        self.rows = np.asarray(rows, dtype=np.int64).copy()
        init = np.full(n, cfg.curriculum.init_level) if levels is None else levels
        self.levels = np.asarray(init, dtype=np.int64).copy()

        self._reset_streams = EnvStreams(self.seed, n, salt=RESET_SALT)
        self._command_streams = EnvStreams(self.seed, n, salt=COMMAND_SALT)
        self._curriculum_streams = EnvStreams(self.seed, n, salt=CURRICULUM_SALT)

        self.state = SimWorldState.zeros(n, cfg.robot.num_joints)
        self.params = EnvPhysicsParams.nominal(cfg.robot, n, cfg.randomization)
        self.commands = np.zeros((n, 3))
        self.prev_action = np.zeros((n, cfg.robot.num_joints))
        self.prev_prev_action = np.zeros((n, cfg.robot.num_joints))
        self.episode_step = np.zeros(n, dtype=np.int64)
        self.episode_reward = np.zeros(n)
        self.lin_tracking_sum = np.zeros(n)
        self.ang_tracking_sum = np.zeros(n)
        self.start_xy = np.zeros((n, 2))
        self.history = HistoryBuffer(n, cfg.him.history_len)
        self.current_frames = np.zeros((n, OBS_DIM))
        self._episodes: List[EpisodeStats] = []

        self.reset()

    # ------------------------------------------------------------------
    # Observations
    # ------------------------------------------------------------------

    @property
    def history_dim(self) -> int:
        return (self.history.history_len + 1) * OBS_DIM

    @property
    def critic_dim(self) -> int:
        return OBS_DIM + FORCE_DIM + self.cfg.terrain.scan_points ** 2

    @property
    def terrain_types(self) -> np.ndarray:
        return self.field.tile_types[self.rows, 0].astype(np.int64)

    def observation_frames(self) -> np.ndarray:
        s, env = self.state, self.cfg.env
        return np.concatenate([
            self.commands,
            s.joint_pos - self.theta0,
            s.joint_vel * env.dof_vel_scale,
            s.ang_vel_body() * env.ang_vel_scale,
            s.gravity_in_body,
            self.prev_action,
        ], axis=1)

    def critic_observations(self, frames: Optional[np.ndarray] = None) -> np.ndarray:
        frames = self.current_frames if frames is None else frames
        heights = height_samples(self.field, self.state.base_pos, self.state.yaw(),
                                 self.cfg.terrain.scan_points, self.cfg.terrain.scan_span)
        force = self.params.external_force * self.cfg.env.force_scale
        return np.concatenate([frames, force, heights], axis=1)

    def history_window(self) -> np.ndarray:
        return self.history.window(self.current_frames)

    def true_velocity(self) -> np.ndarray:
        """Body-frame base linear velocity (privileged, for the estimator loss)."""
        return self.state.lin_vel_body()

    # ------------------------------------------------------------------
    # Commands and resets
    # ------------------------------------------------------------------

    def _sample_command(self, env_id: int) -> np.ndarray:
        rng = self._command_streams.generator(env_id)
        if self.command_sampler is not None:
            return np.asarray(self.command_sampler(env_id, rng), dtype=np.float64)
        terrain_type = TerrainType(int(self.field.tile_types[self.rows[env_id], 0]))
        return sample_command(terrain_type, self.cfg.curriculum, rng)

    def act(self, actions: np.ndarray) -> np.ndarray:
        """Joint targets theta0 + k * clip(a)."""
        clip = self.cfg.env.clip_actions
        return self.theta0 + self.cfg.env.action_scale * np.clip(actions, -clip, clip)

    def reset(self, env_ids: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Re-randomize and respawn the given envs (all if None).

        Returns:
            (len(env_ids), 45) initial observation frames
        """
        env_ids = np.arange(self.num_envs) if env_ids is None else np.asarray(env_ids, dtype=np.int64)
        if len(env_ids) == 0:
            return np.zeros((0, OBS_DIM))
        cfg = self.cfg
        jitter = np.zeros((len(env_ids), 2))
        yaw = np.zeros(len(env_ids))
        for k, i in enumerate(env_ids):
            rng = self._reset_streams.generator(int(i))
            self.params.assign([i], randomize(cfg.randomization, cfg.robot, 1, rng))
            jitter[k] = rng.uniform(-0.5, 0.5, size=2) * cfg.env.spawn_jitter
            yaw[k] = rng.uniform(-np.pi, np.pi)
            self.commands[i] = self._sample_command(int(i))

        cols = np.array([self.field.column_for_level(int(level)) for level in self.levels[env_ids]])
        cx, cy = tile_center(self.field, self.rows[env_ids], cols)
        base = np.stack([cx + jitter[:, 0], cy + jitter[:, 1], np.zeros(len(env_ids))], axis=1)
        joint_pos = np.clip(self.theta0 * self.params.init_joint_scale[env_ids],
                            self.sim.lower, self.sim.upper)

        self.sim.place(self.state, env_ids, base, joint_pos, yaw)
        feet = self.state.foot_pos[env_ids]
        base[:, 2] = np.max(sample_heights(self.field, feet[..., 0], feet[..., 1]) - feet[..., 2], axis=1)
        self.sim.place(self.state, env_ids, base, joint_pos, yaw)

        self.prev_action[env_ids] = 0.0
        self.prev_prev_action[env_ids] = 0.0
        self.episode_step[env_ids] = 0
        self.episode_reward[env_ids] = 0.0
        self.lin_tracking_sum[env_ids] = 0.0
        self.ang_tracking_sum[env_ids] = 0.0
        self.start_xy[env_ids] = base[:, :2]

        frames = self.observation_frames()[env_ids]
        self.current_frames[env_ids] = frames
        self.history.backfill(env_ids, frames)
        return frames

    def _finish_episodes(self, env_ids: np.ndarray) -> List[EpisodeStats]:
        if len(env_ids) == 0:
            return []
        steps = np.maximum(self.episode_step[env_ids], 1)
        mean_lin = self.lin_tracking_sum[env_ids] / steps
        mean_ang = self.ang_tracking_sum[env_ids] / steps
        distance = np.linalg.norm(self.state.base_pos[env_ids, :2] - self.start_xy[env_ids], axis=1)
        finished = [
            EpisodeStats(env_id=int(i), terrain_type=int(self.terrain_types[i]),
                         level=int(self.levels[i]), length=int(self.episode_step[i]),
                         total_reward=float(self.episode_reward[i]),
                         mean_lin_tracking=float(mean_lin[k]), mean_ang_tracking=float(mean_ang[k]),
                         distance=float(distance[k]))
            for k, i in enumerate(env_ids)
        ]
        if self.curriculum_enabled:
            for k, i in enumerate(env_ids):
                rng = self._curriculum_streams.generator(int(i))
                self.levels[i] = update_curriculum(self.levels[i:i + 1], mean_lin[k:k + 1],
                                                   distance[k:k + 1], self.cfg.curriculum,
                                                   self.field.tile_side, rng)[0]
        self._episodes.extend(finished)
        return finished

    # ------------------------------------------------------------------
    # Stepping
    # ------------------------------------------------------------------

    def step(self, actions: np.ndarray) -> StepResult:
        """
        Apply one policy action per env and advance one control tick.

        Finished envs (terminated or truncated) are reset within the call; the
        returned next_frames hold their last observation before the reset.
        """
        cfg = self.cfg
        actions = np.clip(np.asarray(actions, dtype=np.float64), -cfg.env.clip_actions, cfg.env.clip_actions)
        target = self.act(actions)
        for sub in range(cfg.control_decimation):
            self.sim.step(self.state, self.params, target if sub == 0 else None, cfg.sim_dt)

        breakdown = rewards.compute(self.state, self.commands, actions, self.prev_action,
                                    self.prev_prev_action, self.field, cfg.rewards, cfg.robot,
                                    cfg.policy_dt)
        reward = breakdown.total
        self.prev_prev_action = self.prev_action.copy()
        self.prev_action = actions.copy()
        self.episode_step += 1
        self.episode_reward += reward
        self.lin_tracking_sum += breakdown.terms["lin_vel_tracking"]
        self.ang_tracking_sum += breakdown.terms["ang_vel_tracking"]

        commands = self.commands.copy()
        base_lin_vel = self.state.lin_vel_body()
        base_ang_vel = self.state.ang_vel_body()
        terminated = rewards.terminated(self.state, self.field)
        truncated = (self.episode_step >= self.max_episode_steps) & ~terminated
        done = terminated | truncated

        if self.resample_commands:
            due = np.flatnonzero(~done & (self.episode_step % cfg.curriculum.resample_interval == 0))
            for i in due:
                self.commands[i] = self._sample_command(int(i))

        next_frames = self.observation_frames()
        self.history.push(self.current_frames)
        self.current_frames = next_frames.copy()

        done_ids = np.flatnonzero(done)
        episodes = self._finish_episodes(done_ids)
        self.reset(done_ids)

        return StepResult(
            obs=self.current_frames.copy(),
            history=self.history_window(),
            critic_obs=self.critic_observations(),
            reward=reward,
            terminated=terminated,
            truncated=truncated,
            next_frames=next_frames,
            breakdown=breakdown,
            commands=commands,
            base_lin_vel=base_lin_vel,
            base_ang_vel=base_ang_vel,
            episodes=episodes,
        )

    def drain_episodes(self) -> List[EpisodeStats]:
        finished, self._episodes = self._episodes, []
        return finished

    def episode_summary(self, episodes: List[EpisodeStats]) -> Dict[str, float]:
        """
        Curriculum and tracking summary for the metrics row.

        Levels are the current per-env levels (mean overall and per family);
        reward and tracking means are over the given finished episodes, nan
        when none finished.
        """
        nan = float("nan")
        summary = {
            "episodes": len(episodes),
            "mean_episode_reward": float(np.mean([e.total_reward for e in episodes])) if episodes else nan,
            "episode_nlts": float(np.mean([e.mean_lin_tracking for e in episodes])) if episodes else nan,
            "episode_nats": float(np.mean([e.mean_ang_tracking for e in episodes])) if episodes else nan,
            "terrain_level": float(np.mean(self.levels)),
        }
        types = self.terrain_types
        for family in TerrainType:
            mask = types == family
            summary[f"level_{family.name.lower()}"] = float(np.mean(self.levels[mask])) if mask.any() else nan
        return summary

    def close(self) -> None:
        self.sim.close()

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    _ARRAYS = ("rows", "levels", "commands", "prev_action", "prev_prev_action", "episode_step",
               "episode_reward", "lin_tracking_sum", "ang_tracking_sum", "start_xy", "current_frames")

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"env.{name}": np.array(getattr(self, name)) for name in self._ARRAYS}
        state["env.history"] = self.history.frames.copy()
        state.update(self.state.state_dict("sim."))
        state.update(self.params.state_dict("params."))
        for prefix, streams in (("reset", self._reset_streams), ("command", self._command_streams),
                                ("curriculum", self._curriculum_streams)):
            state[f"streams.{prefix}"] = streams.state_dict()["counters"]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name in self._ARRAYS:
            current = getattr(self, name)
            value = np.asarray(state[f"env.{name}"])
            if value.shape != current.shape:
                raise ValueError(f"env.{name}: shape {value.shape} != {current.shape}")
            current[...] = value
        self.history.frames[...] = state["env.history"]
        self.state.load_state_dict(state, "sim.")
        self.params.load_state_dict(state, "params.")
        for prefix, streams in (("reset", self._reset_streams), ("command", self._command_streams),
                                ("curriculum", self._curriculum_streams)):
            streams.load_state_dict({"counters": state[f"streams.{prefix}"]})
