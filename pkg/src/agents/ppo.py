"""
PPO Module

Clipped-surrogate PPO with GAE for the locomotion policy.

The actor reads the current observation frame together with the internal
model's velocity estimate and latent; the critic reads the privileged
observation (frame, push force, height scan). By default the internal model
is frozen while PPO runs, so actor gradients stop at its embedding.

Key pieces:
- RolloutBuffer: (steps x envs) storage, including what HIO needs
- compute_gae: backward GAE recursion with done masking
- ppo_loss_and_grads: objective and analytic gradients for one minibatch
- ppo_update: epochs x minibatches of Adam steps with adaptive learning rate
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from src.agents.him import HybridEmbedding, HybridInternalModel, VELOCITY_DIM
from src.agents.nn import (Adam, DenseNet, LOG_STD_MAX, LOG_STD_MIN, Params, clamp_log_std,
                           gaussian_entropy, gaussian_log_prob, get_dtype, l2_normalize,
                           l2_normalize_backward)
from src.utils.config import AblationSpec, NetworkConfig, PpoConfig

logger = logging.getLogger(__name__)

LR_FACTOR = 1.5


class RolloutBuffer:
    """Fixed-capacity (num_steps, num_envs) storage for one iteration's rollout."""

    def __init__(self, num_steps: int, num_envs: int, history_dim: int, critic_dim: int,
                 frame_dim: int, num_actions: int):
        dtype = get_dtype()
        t, n = num_steps, num_envs
        self.frame_dim = frame_dim
        self.histories = np.zeros((t, n, history_dim), dtype=dtype)
        self.critic_obs = np.zeros((t, n, critic_dim), dtype=dtype)
        self.actions = np.zeros((t, n, num_actions), dtype=dtype)
        self.action_means = np.zeros((t, n, num_actions), dtype=dtype)
        self.log_probs = np.zeros((t, n), dtype=dtype)
        self.values = np.zeros((t, n), dtype=dtype)
        self.rewards = np.zeros((t, n), dtype=dtype)
        self.dones = np.zeros((t, n), dtype=bool)
        self.truncated = np.zeros((t, n), dtype=bool)
        self.next_frames = np.zeros((t, n, frame_dim), dtype=dtype)
        self.true_velocity = np.zeros((t, n, VELOCITY_DIM), dtype=dtype)
        self.terrain_types = np.zeros((t, n), dtype=np.int64)
        self.advantages = np.zeros((t, n), dtype=dtype)
        self.returns = np.zeros((t, n), dtype=dtype)
        self.log_std = np.zeros(num_actions, dtype=dtype)
        self.step = 0

    @property
    def num_steps(self) -> int:
        return self.histories.shape[0]

    @property
    def num_envs(self) -> int:
        return self.histories.shape[1]

    @property
    def frames(self) -> np.ndarray:
        """Current observation frame: the last frame of each history window."""
        return self.histories[..., -self.frame_dim:]

    def add(self, histories, critic_obs, actions, action_means, log_probs, values, rewards,
            dones, truncated, next_frames, true_velocity, terrain_types) -> None:
        if self.step >= self.num_steps:
            raise IndexError("rollout buffer overflow")
        t = self.step
        self.histories[t] = histories
        self.critic_obs[t] = critic_obs
        self.actions[t] = actions
        self.action_means[t] = action_means
        self.log_probs[t] = log_probs
        self.values[t] = values
        self.rewards[t] = rewards
        self.dones[t] = dones
        self.truncated[t] = truncated
        self.next_frames[t] = next_frames
        self.true_velocity[t] = true_velocity
        self.terrain_types[t] = terrain_types
        self.step += 1

    def clear(self) -> None:
        self.step = 0


class ActorCritic:
    """Gaussian actor with state-independent log-std, and a value critic."""

    def __init__(self, actor_input_dim: int, critic_input_dim: int, num_actions: int,
                 network: NetworkConfig, rng: np.random.Generator):
        self.actor = DenseNet((actor_input_dim, *network.actor_hidden, num_actions), rng, output_gain=0.01)
        self.critic = DenseNet((critic_input_dim, *network.critic_hidden, 1), rng, output_gain=1.0)
        self.log_std = np.full(num_actions, network.init_log_std, dtype=get_dtype())

    @property
    def num_actions(self) -> int:
        return self.actor.output_dim

    def parameters(self) -> Params:
        params = {f"actor.{k}": v for k, v in self.actor.params.items()}
        params.update({f"critic.{k}": v for k, v in self.critic.params.items()})
        params["log_std"] = self.log_std
        return params

    def act(self, actor_in: np.ndarray, rng: Optional[np.random.Generator] = None,
            deterministic: bool = False) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Returns:
            (actions, log-probabilities, means); deterministic mode returns the means
        """
        mean = self.actor(actor_in)
        log_std = clamp_log_std(self.log_std)
        if deterministic or rng is None:
            actions = mean.copy()
        else:
            noise = rng.standard_normal(mean.shape).astype(mean.dtype)
            actions = mean + np.exp(log_std) * noise
        return actions, gaussian_log_prob(actions, mean, log_std), mean

    def value(self, critic_in: np.ndarray) -> np.ndarray:
        return self.critic(critic_in)[:, 0]

    def state_dict(self, prefix: str = "ac.") -> Params:
        state = self.actor.state_dict(f"{prefix}actor.")
        state.update(self.critic.state_dict(f"{prefix}critic."))
        state[f"{prefix}log_std"] = self.log_std.copy()
        return state

    def load_state_dict(self, state: Params, prefix: str = "ac.") -> None:
        self.actor.load_state_dict(state, f"{prefix}actor.")
        self.critic.load_state_dict(state, f"{prefix}critic.")
        self.log_std[...] = state[f"{prefix}log_std"]


def actor_input_dim(frame_dim: int, latent_dim: int, privileged_dim: int,
                    ablation: Optional[AblationSpec] = None) -> int:
    ablation = ablation or AblationSpec()
    dim = frame_dim + VELOCITY_DIM + latent_dim
    return dim + privileged_dim if ablation.oracle_mode else dim


def actor_inputs(frames: np.ndarray, embedding: HybridEmbedding, ablation: Optional[AblationSpec] = None,
                 privileged: Optional[np.ndarray] = None) -> np.ndarray:
    """Observation frame ++ velocity estimate ++ latent (++ privileged extras in oracle mode)."""
    ablation = ablation or AblationSpec()
    velocity = np.zeros_like(embedding.velocity) if ablation.zero_velocity_input else embedding.velocity
    latent = np.zeros_like(embedding.latent) if ablation.zero_latent_input else embedding.latent
    parts = [frames, velocity, latent]
    if ablation.oracle_mode:
        parts.append(privileged)
    return np.concatenate(parts, axis=1)


def act_rollout(ac: ActorCritic, him: HybridInternalModel, history: np.ndarray,
                critic_obs: np.ndarray, frame_dim: int, rng: Optional[np.random.Generator],
                ablation: Optional[AblationSpec] = None, deterministic: bool = False):
    """
    Sample actions for one control tick with frozen networks.

    Returns:
        (actions, log-probs, values, means, embedding)
    """
    embedding = him.encode_source(history)
    frames = history[:, -frame_dim:]
    actor_in = actor_inputs(frames, embedding, ablation, critic_obs[:, frame_dim:])
    actions, log_probs, means = ac.act(actor_in, rng, deterministic)
    return actions, log_probs, ac.value(critic_obs), means, embedding


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                last_values: np.ndarray, gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generalized advantage estimation over a (T, ...) rollout.

    Returns:
        (advantages, returns) with returns = advantages + values; no normalization
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    not_done = 1.0 - np.asarray(dones, dtype=np.float64)
    advantages = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    for t in reversed(range(len(rewards))):
        next_values = last_values if t == len(rewards) - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_values * not_done[t] - values[t]
        running = delta + gamma * lam * not_done[t] * running
        advantages[t] = running
    return advantages, advantages + values


def normalize_advantages(advantages: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (advantages - advantages.mean()) / (advantages.std() + eps)


def gaussian_kl(old_mean, old_log_std, new_mean, new_log_std) -> np.ndarray:
    """KL(old || new) per sample for diagonal Gaussians."""
    old_var = np.exp(2.0 * old_log_std)
    new_var = np.exp(2.0 * new_log_std)
    return np.sum(new_log_std - old_log_std + (old_var + np.square(old_mean - new_mean)) / (2.0 * new_var) - 0.5,
                  axis=-1)


@dataclass
class PpoBatch:
    frames: np.ndarray
    histories: np.ndarray
    privileged: np.ndarray
    critic_obs: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    old_means: np.ndarray
    old_log_std: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    # frozen embedding; recomputed with gradients in joint mode
    embedding: Optional[HybridEmbedding] = None


@dataclass
class PpoStats:
    policy_loss: float = float("nan")
    value_loss: float = float("nan")
    entropy: float = float("nan")
    kl: float = float("nan")
    clip_fraction: float = float("nan")
    learning_rate: float = float("nan")
    aborted: bool = False


def ppo_loss_and_grads(ac: ActorCritic, batch: PpoBatch, cfg: PpoConfig,
                       ablation: Optional[AblationSpec] = None,
                       him: Optional[HybridInternalModel] = None):
    """
    Clipped surrogate + value MSE - entropy bonus for one minibatch.

    Args:
        him: Required when cfg.joint_him_gradient is set; its source encoder
            then receives the actor's gradient

    Returns:
        (loss, gradients keyed like the optimizer parameters, info dict)
    """
    ablation = ablation or AblationSpec()
    m = batch.actions.shape[0]
    joint = cfg.joint_him_gradient and him is not None

    src_tape = None
    if joint:
        out, src_tape = him.source.forward(batch.histories)
        latent, latent_norms = l2_normalize(out[:, VELOCITY_DIM:])
        embedding = HybridEmbedding(velocity=out[:, :VELOCITY_DIM], latent=latent)
    else:
        embedding = batch.embedding if batch.embedding is not None else him.encode_source(batch.histories)

    actor_in = actor_inputs(batch.frames, embedding, ablation, batch.privileged)
    mean, actor_tape = ac.actor.forward(actor_in)
    log_std = clamp_log_std(ac.log_std)
    log_prob = gaussian_log_prob(batch.actions, mean, log_std)
    ratio = np.exp(log_prob - batch.old_log_probs)
    adv = batch.advantages
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range) * adv
    policy_loss = float(-np.mean(np.minimum(surr1, surr2)))

    value, critic_tape = ac.critic.forward(batch.critic_obs)
    value_err = batch.returns - value[:, 0]
    value_loss = float(np.mean(np.square(value_err)))
    entropy = gaussian_entropy(log_std)
    loss = policy_loss + cfg.value_loss_coef * value_loss - cfg.entropy_coef * entropy

    # d loss / d log_prob: only samples where the unclipped branch is the minimum
    active = surr1 <= surr2
    d_logp = np.where(active, -adv * ratio / m, 0.0)
    inv_var = np.exp(-2.0 * log_std)
    diff = batch.actions - mean
    d_mean = d_logp[:, None] * diff * inv_var
    d_log_std = np.sum(d_logp[:, None] * (np.square(diff) * inv_var - 1.0), axis=0) - cfg.entropy_coef
    d_log_std = np.where((ac.log_std > LOG_STD_MIN) & (ac.log_std < LOG_STD_MAX), d_log_std, 0.0)

    actor_grads, d_actor_in = ac.actor.backward(actor_tape, d_mean)
    d_value = (-2.0 * cfg.value_loss_coef * value_err / m)[:, None]
    critic_grads, _ = ac.critic.backward(critic_tape, d_value)

    grads = {f"actor.{k}": g for k, g in actor_grads.items()}
    grads.update({f"critic.{k}": g for k, g in critic_grads.items()})
    grads["log_std"] = d_log_std.astype(ac.log_std.dtype)

    if joint:
        f = batch.frames.shape[1]
        d_vel = d_actor_in[:, f:f + VELOCITY_DIM]
        d_lat = d_actor_in[:, f + VELOCITY_DIM:f + VELOCITY_DIM + embedding.latent.shape[1]]
        if ablation.zero_velocity_input:
            d_vel = np.zeros_like(d_vel)
        if ablation.zero_latent_input:
            d_lat = np.zeros_like(d_lat)
        d_out = np.concatenate([d_vel, l2_normalize_backward(latent, latent_norms, d_lat)], axis=1)
        src_grads, _ = him.source.backward(src_tape, d_out)
        grads.update({f"him.source.{k}": g for k, g in src_grads.items()})

    info = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "kl": float(np.mean(gaussian_kl(batch.old_means, batch.old_log_std, mean, log_std))),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_range)),
    }
    return loss, grads, info


def ppo_parameters(ac: ActorCritic, him: Optional[HybridInternalModel], cfg: PpoConfig) -> Params:
    """Parameters the PPO optimizer owns; the source encoder joins only in joint mode."""
    params = ac.parameters()
    if cfg.joint_him_gradient and him is not None:
        params.update({f"him.source.{k}": v for k, v in him.source.params.items()})
    return params


def make_optimizer(ac: ActorCritic, him: Optional[HybridInternalModel], cfg: PpoConfig) -> Adam:
    return Adam(ppo_parameters(ac, him, cfg), lr=cfg.learning_rate, eps=cfg.adam_epsilon,
                max_grad_norm=cfg.grad_clip)


def adapt_learning_rate(lr: float, kl: float, cfg: PpoConfig) -> float:
    """Shrink the step when KL overshoots 2x the target, grow it below half the target."""
    if kl > 2.0 * cfg.desired_kl:
        lr = lr / LR_FACTOR
    elif kl < cfg.desired_kl / 2.0:
        lr = lr * LR_FACTOR
    bounded = min(max(lr, cfg.lr_min), cfg.lr_max)
    if bounded != lr:
        logger.debug(f"Learning rate {lr:.3g} clamped to {bounded:.3g}")
    return bounded


def _snapshot(optimizer: Adam) -> Dict[str, np.ndarray]:
    state = {f"param.{k}": v.copy() for k, v in optimizer.params.items()}
    state.update(optimizer.state_dict("adam."))
    return state


def _restore(optimizer: Adam, snapshot: Dict[str, np.ndarray]) -> None:
    for k, v in optimizer.params.items():
        v[...] = snapshot[f"param.{k}"]
    optimizer.load_state_dict(snapshot, "adam.")


def ppo_update(buffer: RolloutBuffer, ac: ActorCritic, him: HybridInternalModel,
               optimizer: Adam, cfg: PpoConfig, rng: np.random.Generator,
               ablation: Optional[AblationSpec] = None) -> PpoStats:
    """
    Optimize actor and critic on a rollout whose advantages are already computed.

    Advantages are normalized over the whole rollout. A non-finite loss restores
    the parameters and optimizer state held before the call and ends the update.
    """
    ablation = ablation or AblationSpec()
    t, n = buffer.num_steps, buffer.num_envs
    total = t * n
    frame_dim = buffer.frame_dim

    def flat(a):
        return a.reshape(total, *a.shape[2:])

    histories = flat(buffer.histories)
    critic_obs = flat(buffer.critic_obs)
    frozen = None if cfg.joint_him_gradient else him.encode_source(histories)
    advantages = normalize_advantages(flat(buffer.advantages))
    returns = flat(buffer.returns)
    batch_size = max(total // cfg.num_minibatches, 1)
    snapshot = _snapshot(optimizer)

    sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "kl": 0.0, "clip_fraction": 0.0}
    updates = 0
    for _ in range(cfg.num_epochs):
        order = rng.permutation(total)
        for start in range(0, batch_size * cfg.num_minibatches, batch_size):
            idx = order[start:start + batch_size]
            batch = PpoBatch(
                frames=histories[idx, -frame_dim:],
                histories=histories[idx],
                privileged=critic_obs[idx, frame_dim:],
                critic_obs=critic_obs[idx],
                actions=flat(buffer.actions)[idx],
                old_log_probs=flat(buffer.log_probs)[idx],
                old_means=flat(buffer.action_means)[idx],
                old_log_std=clamp_log_std(buffer.log_std),
                advantages=advantages[idx],
                returns=returns[idx],
                embedding=None if frozen is None else HybridEmbedding(frozen.velocity[idx], frozen.latent[idx]),
            )
            loss, grads, info = ppo_loss_and_grads(ac, batch, cfg, ablation, him)
            if not math.isfinite(loss):
                _restore(optimizer, snapshot)
                logger.warning("Non-finite PPO loss; restored pre-update parameters and aborted the update")
                return PpoStats(learning_rate=optimizer.lr, aborted=True)
            if cfg.adaptive_lr:
                optimizer.lr = adapt_learning_rate(optimizer.lr, info["kl"], cfg)
            optimizer.step(grads)
            for key in sums:
                sums[key] += info[key]
            updates += 1

    return PpoStats(learning_rate=optimizer.lr, **{k: v / updates for k, v in sums.items()})
