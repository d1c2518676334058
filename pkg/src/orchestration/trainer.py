"""
Trainer

Runs the alternating training loop. Each iteration:
1. collect a rollout with frozen networks
2. HIO: update the internal model (source/target encoders, prototypes)
3. PPO: freeze the internal model, update actor and critic
4. write a metrics row; checkpoint every checkpoint_interval iterations

Everything random is seeded from the run seed, so the same config, seed and
worker count give byte-identical metrics, and a resumed run continues exactly
where the checkpoint left off.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from src.agents.him import HioLosses, HybridInternalModel, hio_update
from src.agents.ppo import (ActorCritic, PpoStats, RolloutBuffer, act_rollout, actor_input_dim,
                            compute_gae, make_optimizer, ppo_update)
from src.sim.env import FORCE_DIM, OBS_DIM, LocomotionEnv
from src.sim.rewards import REWARD_TERMS
from src.sim.terrain import TerrainType
from src.storage import (CheckpointIncompatibleError, MetricsWriter, array_text, checkpoint_path,
                         load_checkpoint, save_checkpoint, text_array)
from src.utils.config import TrainConfig, parse_config, serialize_config
from src.utils.seeding import controller_rng, generator_state, restore_generator

logger = logging.getLogger(__name__)

PURPOSE_INIT = 0
PURPOSE_ACTIONS = 1
PURPOSE_UPDATES = 2
MAX_CONSECUTIVE_FAILURES = 3
FAMILY_COLUMNS = tuple(f"level_{family.name.lower()}" for family in TerrainType)


class TrainingAborted(RuntimeError):
    """Raised after too many consecutive non-finite updates; a partial checkpoint is written first."""
    pass


@dataclass
class PolicyBundle:
    """Everything needed to run a trained policy."""

    cfg: TrainConfig
    him: HybridInternalModel
    ac: ActorCritic
    iteration: int = 0

    @property
    def history_dim(self) -> int:
        return (self.cfg.him.history_len + 1) * OBS_DIM

    @property
    def critic_dim(self) -> int:
        return OBS_DIM + FORCE_DIM + self.cfg.terrain.scan_points ** 2


def build_models(cfg: TrainConfig) -> PolicyBundle:
    """Freshly initialized internal model and actor-critic for a config."""
    rng = controller_rng(cfg.seed, PURPOSE_INIT)
    history_dim = (cfg.him.history_len + 1) * OBS_DIM
    critic_dim = OBS_DIM + FORCE_DIM + cfg.terrain.scan_points ** 2
    him = HybridInternalModel(cfg.him, cfg.network, history_dim, OBS_DIM, rng)
    actor_dim = actor_input_dim(OBS_DIM, cfg.him.latent_dim, critic_dim - OBS_DIM, cfg.ablation)
    ac = ActorCritic(actor_dim, critic_dim, cfg.robot.num_joints, cfg.network, rng)
    return PolicyBundle(cfg=cfg, him=him, ac=ac)


def load_policy(path: Union[str, Path]) -> PolicyBundle:
    """
    Rebuild the policy stored in a checkpoint.

    Raises:
        CheckpointError: If the file is unreadable, corrupt or inconsistent
    """
    arrays = load_checkpoint(path)
    cfg = parse_config(array_text(arrays["meta.config"]))
    bundle = build_models(cfg)
    try:
        bundle.him.load_state_dict(arrays)
        bundle.ac.load_state_dict(arrays)
    except (KeyError, ValueError) as e:
        raise CheckpointIncompatibleError(f"{path}: {e}")
    bundle.iteration = int(arrays["meta.iteration"][0])
    return bundle


def metric_columns(cfg: TrainConfig) -> List[str]:
    columns = ["iteration"]
    if cfg.record_wall_time:
        columns.append("wall_time")
    columns += ["mean_episode_reward", "mean_step_reward", "episodes", "nlts", "nats", "terrain_level",
                *FAMILY_COLUMNS]
    columns.append("regression_loss" if cfg.ablation.regression_mode else "swav_loss")
    columns += ["velocity_loss", "policy_loss", "value_loss", "entropy", "kl", "clip_fraction", "lr"]
    columns += [f"reward_{name}" for name in REWARD_TERMS]
    return columns


class Trainer:
    """
    Owns the environments, networks, optimizers and generators of one run.

    Args:
        cfg: Validated run configuration
        out_dir: Directory for metrics.csv and ckpt_<iteration>.bin
        workers: Simulation worker threads
    """

    def __init__(self, cfg: TrainConfig, out_dir: Union[str, Path], workers: int = 1):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.workers = workers
        self.env = LocomotionEnv(cfg, workers=workers)
        bundle = build_models(cfg)
        self.him = bundle.him
        self.ac = bundle.ac
        self.ppo_optimizer = make_optimizer(self.ac, self.him, cfg.ppo)
        self.action_rng = controller_rng(cfg.seed, PURPOSE_ACTIONS)
        self.update_rng = controller_rng(cfg.seed, PURPOSE_UPDATES)
        self.buffer = RolloutBuffer(cfg.rollout_length, cfg.num_envs, self.env.history_dim,
                                    self.env.critic_dim, OBS_DIM, cfg.robot.num_joints)
        self.iteration = 0
        self.consecutive_failures = 0
        self.resumed = False
        self.phase_log: List[Tuple[int, str]] = []
        self.columns = metric_columns(cfg)

    # ------------------------------------------------------------------
    # One iteration
    # ------------------------------------------------------------------

    def collect_rollout(self) -> Dict[str, float]:
        """Fill the buffer with frozen networks and compute advantages."""
        cfg, env, buf = self.cfg, self.env, self.buffer
        buf.clear()
        buf.log_std[...] = self.ac.log_std
        history = env.history_window()
        critic_obs = env.critic_observations()
        term_sums = {name: 0.0 for name in REWARD_TERMS}
        lin_tracking = ang_tracking = step_reward = 0.0

        for _ in range(cfg.rollout_length):
            true_vel = env.true_velocity()
            terrain = env.terrain_types.copy()
            actions, log_probs, values, means, _ = act_rollout(
                self.ac, self.him, history, critic_obs, OBS_DIM, self.action_rng, cfg.ablation)
            result = env.step(actions)
            # timeout bootstrap
            rewards = result.reward + cfg.ppo.gamma * values * result.truncated
            buf.add(history, critic_obs, actions, means, log_probs, values, rewards,
                    result.terminated | result.truncated, result.truncated, result.next_frames,
                    true_vel, terrain)
            for name in REWARD_TERMS:
                term_sums[name] += float(np.mean(result.breakdown.weighted(name)))
            lin_tracking += float(np.mean(result.breakdown.terms["lin_vel_tracking"]))
            ang_tracking += float(np.mean(result.breakdown.terms["ang_vel_tracking"]))
            step_reward += float(np.mean(result.reward))
            history, critic_obs = result.history, result.critic_obs

        last_values = self.ac.value(critic_obs)
        advantages, returns = compute_gae(buf.rewards, buf.values, buf.dones, last_values,
                                          cfg.ppo.gamma, cfg.ppo.gae_lambda)
        buf.advantages[...] = advantages
        buf.returns[...] = returns

        steps = cfg.rollout_length
        stats = {f"reward_{name}": total / steps for name, total in term_sums.items()}
        stats.update(nlts=lin_tracking / steps, nats=ang_tracking / steps, mean_step_reward=step_reward / steps)
        return stats

    def _episode_stats(self) -> Dict[str, float]:
        summary = self.env.episode_summary(self.env.drain_episodes())
        return {k: v for k, v in summary.items() if k not in ("episode_nlts", "episode_nats")}

    def run_iteration(self) -> Dict[str, object]:
        """Collect, then HIO, then PPO. Returns the metrics row (without iteration)."""
        cfg = self.cfg
        started = time.perf_counter()

        self.phase_log.append((self.iteration, "collect"))
        row: Dict[str, object] = dict(self.collect_rollout())

        self.phase_log.append((self.iteration, "hio"))
        hio: HioLosses = hio_update(self.him, self.buffer, self.update_rng, cfg.ablation)

        self.phase_log.append((self.iteration, "ppo"))
        ppo: PpoStats = ppo_update(self.buffer, self.ac, self.him, self.ppo_optimizer, cfg.ppo,
                                   self.update_rng, cfg.ablation)

        failed = hio.aborted or ppo.aborted
        self.consecutive_failures = self.consecutive_failures + 1 if failed else 0

        row.update(self._episode_stats())
        row["swav_loss"] = hio.swav_loss
        row["regression_loss"] = hio.regression_loss
        row["velocity_loss"] = hio.velocity_loss
        row.update(policy_loss=ppo.policy_loss, value_loss=ppo.value_loss, entropy=ppo.entropy,
                   kl=ppo.kl, clip_fraction=ppo.clip_fraction, lr=ppo.learning_rate)
        if cfg.record_wall_time:
            row["wall_time"] = time.perf_counter() - started
        return row

    # ------------------------------------------------------------------
    # Loop
    # ------------------------------------------------------------------

    def train(self) -> Path:
        """
        Run until cfg.num_iterations.

        Returns:
            Path of the final checkpoint

        Raises:
            TrainingAborted: After more than three consecutive non-finite updates
        """
        cfg = self.cfg
        metrics = MetricsWriter(self.out_dir / "metrics.csv", self.columns,
                                resume_iteration=self.iteration if self.resumed else None)
        logger.info(f"Training {cfg.num_envs} envs x {cfg.rollout_length} steps "
                    f"from iteration {self.iteration} to {cfg.num_iterations} (seed {cfg.seed})")
        last = None
        if self.iteration >= cfg.num_iterations:
            return self.save(checkpoint_path(self.out_dir, self.iteration))

        while self.iteration < cfg.num_iterations:
            row = self.run_iteration()
            self.iteration += 1
            row["iteration"] = self.iteration
            metrics.write(row)
            logger.info(f"Iteration {self.iteration}: reward/step {row['mean_step_reward']:.4f}, "
                        f"NLTS {row['nlts']:.3f}, level {row['terrain_level']:.2f}, "
                        f"velocity loss {row['velocity_loss']:.4f}, lr {row['lr']:.2e}")
            if self.consecutive_failures > MAX_CONSECUTIVE_FAILURES:
                path = self.save(checkpoint_path(self.out_dir, self.iteration))
                logger.error(f"Aborting after {self.consecutive_failures} consecutive non-finite "
                             f"updates; partial checkpoint {path}")
                raise TrainingAborted(f"{self.consecutive_failures} consecutive non-finite updates "
                                      f"at iteration {self.iteration}")
            if self.iteration % cfg.checkpoint_interval == 0 or self.iteration == cfg.num_iterations:
                last = self.save(checkpoint_path(self.out_dir, self.iteration))
        logger.info(f"Training finished at iteration {self.iteration}")
        return last

    def close(self) -> None:
        self.env.close()

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {
            "meta.config": text_array(serialize_config(self.cfg)),
            "meta.iteration": np.array([self.iteration], dtype=np.int64),
            "meta.num_envs": np.array([self.cfg.num_envs], dtype=np.int64),
            "meta.consecutive_failures": np.array([self.consecutive_failures], dtype=np.int64),
            "rng.actions": text_array(generator_state(self.action_rng)),
            "rng.updates": text_array(generator_state(self.update_rng)),
        }
        state.update(self.him.state_dict())
        state.update(self.ac.state_dict())
        state.update(self.ppo_optimizer.state_dict("ppo.adam."))
        state.update(self.env.state_dict())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        num_envs = int(state["meta.num_envs"][0])
        if num_envs != self.cfg.num_envs:
            raise CheckpointIncompatibleError(
                f"checkpoint has {num_envs} envs, run is configured for {self.cfg.num_envs}")
        try:
            self.him.load_state_dict(state)
            self.ac.load_state_dict(state)
            self.ppo_optimizer.load_state_dict(state, "ppo.adam.")
            self.env.load_state_dict(state)
        except (KeyError, ValueError) as e:
            raise CheckpointIncompatibleError(f"checkpoint does not match this run: {e}")
        restore_generator(self.action_rng, array_text(state["rng.actions"]))
        restore_generator(self.update_rng, array_text(state["rng.updates"]))
        self.iteration = int(state["meta.iteration"][0])
        self.consecutive_failures = int(state["meta.consecutive_failures"][0])
        self.resumed = True

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(path, self.state_dict())

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], out_dir: Union[str, Path], workers: int = 1,
                        cfg: Optional[TrainConfig] = None) -> "Trainer":
        """
        Resume a run. The config snapshot in the checkpoint is used unless cfg is given.

        Raises:
            CheckpointError: Version mismatch, corruption, or a different num_envs
        """
        state = load_checkpoint(path)
        cfg = cfg or parse_config(array_text(state["meta.config"]))
        trainer = cls(cfg, out_dir, workers=workers)
        trainer.load_state_dict(state)
        logger.info(f"Resumed from {path} at iteration {trainer.iteration}")
        return trainer


def train(cfg: TrainConfig, out_dir: Union[str, Path], workers: int = 1,
          resume: Optional[Union[str, Path]] = None) -> Path:
    """Train from scratch (or resume) and return the final checkpoint path."""
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, out_dir, workers=workers, cfg=cfg)
    else:
        trainer = Trainer(cfg, out_dir, workers=workers)
    try:
        return trainer.train()
    finally:
        trainer.close()
