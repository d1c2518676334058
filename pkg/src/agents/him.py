"""
Hybrid Internal Model

The source encoder reads the proprioceptive history and returns an explicit
base-velocity estimate plus a unit-norm latent describing how the robot is
responding to its surroundings. The latent is trained by swapped prediction
against a target encoder that sees the next observation: both latents are
scored against a bank of prototypes, Sinkhorn-Knopp turns each score matrix
into balanced soft assignments, and each side predicts the other's
assignment. The velocity estimate is regressed onto the simulator's
ground truth.

Shapes (defaults): history 270 -> (512, 256, 128) -> 3 + 16;
next frame 45 -> (128, 64) -> 16; prototypes 16 x 16.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.agents.nn import (Adam, DenseNet, Params, get_dtype, l2_normalize,
                           l2_normalize_backward, softmax)
from src.utils.config import AblationSpec, HimConfig, NetworkConfig

logger = logging.getLogger(__name__)

VELOCITY_DIM = 3
LOG_CLAMP = 1e-12


class SinkhornError(ValueError):
    """Raised when a score row carries no mass (all -inf or underflow)."""
    pass


@dataclass
class HybridEmbedding:
    velocity: np.ndarray
    latent: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([self.velocity, self.latent], axis=1)


@dataclass
class HioLosses:
    swav_loss: float = float("nan")
    velocity_loss: float = float("nan")
    regression_loss: float = float("nan")
    grad_norm: float = 0.0
    skipped: bool = False
    aborted: bool = False


def assign_probs(latents: np.ndarray, prototypes_normed: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax over latent-prototype dot products divided by the temperature."""
    return softmax(latents @ prototypes_normed.T / temperature)


def sinkhorn(scores: np.ndarray, epsilon: float = 0.05, n_iter: int = 3,
             tol: float = 1e-5, max_iter: int = 1000) -> np.ndarray:
    """
    Balanced soft assignments of B samples to K prototypes.

    Starting from exp(scores / epsilon) normalized to unit total mass, alternately
    rescale columns to mass 1/K and rows to mass 1/B. At least n_iter rounds run;
    rounds continue until every row mass is within tol (relative) of 1/B right
    after the column step, so the returned columns each sum to B/K to that
    tolerance. Rows of the result sum to 1. Computed in float64; no gradient
    flows through it.

    Raises:
        SinkhornError: If a row or prototype column has no finite mass
    """
    s = np.asarray(scores, dtype=np.float64) / epsilon
    if np.isnan(s).any():
        # propagate so the caller sees a non-finite objective
        return np.full(s.shape, np.nan)
    finite = np.isfinite(s)
    if not finite.any():
        raise SinkhornError("degenerate score row")
    q = np.exp(s - s[finite].max())
    if np.any(q.sum(axis=1) <= 0.0):
        raise SinkhornError("degenerate score row")
    if np.any(q.sum(axis=0) <= 0.0):
        raise SinkhornError("prototype column with no mass")
    b, k = q.shape
    q /= q.sum()
    rounds = 0
    while True:
        q /= q.sum(axis=0, keepdims=True)
        q /= k
        rows = q.sum(axis=1, keepdims=True)
        rounds += 1
        balanced = np.max(np.abs(rows * b - 1.0)) <= tol
        q /= rows
        q /= b
        if rounds >= n_iter and balanced:
            break
        if rounds >= max_iter:
            logger.warning(f"Sinkhorn stopped unbalanced after {rounds} rounds")
            break
    return q * b


def swav_loss(p_source: np.ndarray, p_target: np.ndarray,
              q_source: np.ndarray, q_target: np.ndarray) -> float:
    """-(1/2B) * sum(q_source . log p_target + q_target . log p_source)."""
    b = p_source.shape[0]
    log_pt = np.log(np.maximum(p_target, LOG_CLAMP))
    log_ps = np.log(np.maximum(p_source, LOG_CLAMP))
    return float(-(np.sum(q_source * log_pt) + np.sum(q_target * log_ps)) / (2.0 * b))


def velocity_loss(v_hat: np.ndarray, v_true: np.ndarray) -> float:
    return float(np.mean(np.square(v_hat - v_true)))


def shared_sequence_noise(histories: np.ndarray, next_frames: np.ndarray, sigma: float,
                          rng: np.random.Generator):
    """Add one Gaussian noise vector per sample to every frame of its history and its target frame."""
    if sigma <= 0:
        return histories, next_frames
    frame_dim = next_frames.shape[1]
    noise = rng.normal(0.0, sigma, size=next_frames.shape)
    repeats = histories.shape[1] // frame_dim
    return histories + np.tile(noise, repeats), next_frames + noise


class HybridInternalModel:
    """
    Source encoder, target encoder and prototype bank with their optimizer.

    Args:
        cfg: HIM hyperparameters
        network: Hidden widths for both encoders
        history_dim: (history_len + 1) * frame_dim
        frame_dim: Width of one observation frame
        rng: Generator for initialization
    """

    def __init__(self, cfg: HimConfig, network: NetworkConfig, history_dim: int,
                 frame_dim: int, rng: np.random.Generator):
        self.cfg = cfg
        self.history_dim = history_dim
        self.frame_dim = frame_dim
        self.source = DenseNet((history_dim, *network.encoder_hidden, VELOCITY_DIM + cfg.latent_dim), rng)
        self.target = DenseNet((frame_dim, *network.target_hidden, cfg.latent_dim), rng)
        self.prototypes = rng.standard_normal((cfg.num_prototypes, cfg.latent_dim)).astype(get_dtype())
        self.optimizer = Adam(self.parameters(), lr=cfg.learning_rate, eps=cfg.adam_epsilon,
                              max_grad_norm=cfg.grad_clip)

    def parameters(self) -> Params:
        params = {f"source.{k}": v for k, v in self.source.params.items()}
        params.update({f"target.{k}": v for k, v in self.target.params.items()})
        if not self.cfg.frozen_prototypes:
            params["prototypes"] = self.prototypes
        return params

    def normalized_prototypes(self):
        return l2_normalize(self.prototypes)

    # ------------------------------------------------------------------
    # Encoding
    # ------------------------------------------------------------------

    def encode_source(self, history: np.ndarray) -> HybridEmbedding:
        out = self.source(history)
        latent, _ = l2_normalize(out[:, VELOCITY_DIM:])
        return HybridEmbedding(velocity=out[:, :VELOCITY_DIM], latent=latent)

    def encode_target(self, frames: np.ndarray) -> np.ndarray:
        latent, _ = l2_normalize(self.target(frames))
        return latent

    # ------------------------------------------------------------------
    # Losses
    # ------------------------------------------------------------------

    def losses_and_grads(self, histories: np.ndarray, next_frames: np.ndarray, true_vel: np.ndarray,
                         ablation: Optional[AblationSpec] = None):
        """
        Evaluate the HIO objective on a batch of (history, next frame) pairs.

        Returns:
            (HioLosses, gradients keyed like parameters(), scalar objective)
        """
        ablation = ablation or AblationSpec()
        cfg = self.cfg
        b = histories.shape[0]
        dtype = self.source.params["l0.W"].dtype
        true_vel = np.asarray(true_vel, dtype=dtype)

        out, src_tape = self.source.forward(histories)
        v_hat = out[:, :VELOCITY_DIM]
        l_s, n_s = l2_normalize(out[:, VELOCITY_DIM:])
        d_vhat = np.zeros_like(v_hat)
        d_ls = np.zeros_like(l_s)
        d_target_out = None
        d_protos_normed = np.zeros_like(self.prototypes)
        losses = HioLosses()
        objective = 0.0

        use_velocity = not ablation.drop_velocity_loss and cfg.velocity_scale != 0.0
        use_latent = not ablation.drop_latent_loss and cfg.contrastive_scale != 0.0

        if use_velocity:
            losses.velocity_loss = velocity_loss(v_hat, true_vel)
            objective += cfg.velocity_scale * losses.velocity_loss
            d_vhat = cfg.velocity_scale * 2.0 * (v_hat - true_vel) / v_hat.size

        t_out, tgt_tape = self.target.forward(next_frames)
        l_t, n_t = l2_normalize(t_out)

        if use_latent and ablation.regression_mode:
            diff = l_s - l_t
            losses.regression_loss = float(np.mean(np.square(diff)))
            objective += cfg.contrastive_scale * losses.regression_loss
            d_ls = d_ls + cfg.contrastive_scale * 2.0 * diff / diff.size
        elif use_latent:
            protos, proto_norms = self.normalized_prototypes()
            scores_s = l_s @ protos.T
            scores_t = l_t @ protos.T
            p_s = softmax(scores_s / cfg.temperature)
            p_t = softmax(scores_t / cfg.temperature)
            q_s = sinkhorn(scores_s, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters).astype(dtype)
            q_t = sinkhorn(scores_t, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters).astype(dtype)
            losses.swav_loss = swav_loss(p_s, p_t, q_s, q_t)
            objective += cfg.contrastive_scale * losses.swav_loss

            scale = cfg.contrastive_scale / (2.0 * b * cfg.temperature)
            d_scores_t = scale * (p_t * q_s.sum(axis=1, keepdims=True) - q_s)
            d_scores_s = scale * (p_s * q_t.sum(axis=1, keepdims=True) - q_t)
            d_ls = d_ls + d_scores_s @ protos
            d_lt = d_scores_t @ protos
            d_protos_normed = d_scores_s.T @ l_s + d_scores_t.T @ l_t
            d_target_out = l2_normalize_backward(l_t, n_t, d_lt)

        d_src_out = np.concatenate([d_vhat, l2_normalize_backward(l_s, n_s, d_ls)], axis=1)
        src_grads, _ = self.source.backward(src_tape, d_src_out)
        if d_target_out is None:
            d_target_out = np.zeros_like(t_out)
        tgt_grads, _ = self.target.backward(tgt_tape, d_target_out)

        grads = {f"source.{k}": g for k, g in src_grads.items()}
        grads.update({f"target.{k}": g for k, g in tgt_grads.items()})
        if not cfg.frozen_prototypes:
            protos, proto_norms = self.normalized_prototypes()
            grads["prototypes"] = l2_normalize_backward(protos, proto_norms, d_protos_normed)
        return losses, grads, objective

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def state_dict(self, prefix: str = "him.") -> Params:
        state = self.source.state_dict(f"{prefix}source.")
        state.update(self.target.state_dict(f"{prefix}target."))
        state[f"{prefix}prototypes"] = self.prototypes.copy()
        state.update(self.optimizer.state_dict(f"{prefix}adam."))
        return state

    def load_state_dict(self, state: Params, prefix: str = "him.") -> None:
        self.source.load_state_dict(state, f"{prefix}source.")
        self.target.load_state_dict(state, f"{prefix}target.")
        self.prototypes[...] = state[f"{prefix}prototypes"]
        self.optimizer.load_state_dict(state, f"{prefix}adam.")


def hio_update(model: HybridInternalModel, rollout, rng: np.random.Generator,
               ablation: Optional[AblationSpec] = None) -> HioLosses:
    """
    One HIO pass over a collected rollout.

    Every (history window at t, observation at t+1) pair in the buffer belongs
    to one trajectory: at an episode end the stored next frame is the terminal
    observation, never the first frame of the following episode.

    A non-finite objective in any minibatch restores the parameters and optimizer
    state held on entry.

    Args:
        rollout: Buffer exposing histories, next_frames, true_velocity and num_steps
        rng: Controller generator for augmentation noise and minibatch order
    """
    ablation = ablation or AblationSpec()
    cfg = model.cfg
    if rollout.num_steps < cfg.history_len + 1:
        logger.warning(f"Skipping HIO update: rollout of {rollout.num_steps} steps is shorter "
                       f"than history_len + 1 = {cfg.history_len + 1}")
        return HioLosses(skipped=True)
    if ablation.drop_velocity_loss and ablation.drop_latent_loss:
        return HioLosses(skipped=True)

    histories = rollout.histories.reshape(-1, rollout.histories.shape[-1])
    next_frames = rollout.next_frames.reshape(-1, rollout.next_frames.shape[-1])
    true_vel = rollout.true_velocity.reshape(-1, VELOCITY_DIM)
    total = len(histories)
    batch = max(total // cfg.num_minibatches, 1)
    snapshot = model.state_dict()

    sums = {"swav_loss": 0.0, "velocity_loss": 0.0, "regression_loss": 0.0, "grad_norm": 0.0}
    updates = 0
    for _ in range(cfg.num_epochs):
        order = rng.permutation(total) if cfg.num_minibatches > 1 else np.arange(total)
        for start in range(0, batch * cfg.num_minibatches, batch):
            idx = order[start:start + batch]
            h, f = shared_sequence_noise(histories[idx], next_frames[idx], cfg.augment_noise, rng)
            losses, grads, objective = model.losses_and_grads(h, f, true_vel[idx], ablation)
            if not math.isfinite(objective):
                model.load_state_dict(snapshot)
                logger.warning("Non-finite HIO loss; restored pre-update parameters and skipped the update")
                return HioLosses(aborted=True)
            norm = model.optimizer.step(grads)
            for key in ("swav_loss", "velocity_loss", "regression_loss"):
                sums[key] += getattr(losses, key)
            sums["grad_norm"] += norm
            updates += 1
    return HioLosses(**{k: v / updates for k, v in sums.items()})


def velocity_mse(model: HybridInternalModel, histories: np.ndarray, true_vel: np.ndarray) -> float:
    """Mean squared error of the velocity estimate against ground truth."""
    return velocity_loss(model.encode_source(histories).velocity, np.asarray(true_vel))
