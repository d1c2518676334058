"""
Evaluation harness

TRACKING BENCHMARK:
- one terrain family per run, envs spread equally over levels 1-4
- regime "lin" commands (vx, vy) with zero yaw rate, "ang" commands a yaw
  rate with zero linear target, "combined" samples both
- deterministic (mean) actions, 10 s episodes, one episode per env
- reports mean linear/angular tracking errors, NLTS and NATS with a 95%
  normal-approximation half-width over per-episode means

ALSO:
- latent_probe: linear terrain-type classifier on the internal-model latent,
  with a shuffled-label control that must land in the binomial chance band
- run_ablation / sweep_prototypes: train config variants over several seeds
  and tabulate final metrics
- velocity_estimation_mse: trained vs. untrained velocity estimator error
"""

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.agents.him import velocity_mse
from src.agents.nn import Adam, DenseNet, log_softmax, softmax
from src.agents.ppo import act_rollout
from src.orchestration.trainer import PolicyBundle, build_models, train
from src.sim.env import OBS_DIM, LocomotionEnv
from src.sim.terrain import TerrainType
from src.storage import read_metrics
from src.utils.config import AblationSpec, ConfigError, TrainConfig, parse_kv_text
from src.utils.seeding import controller_rng

logger = logging.getLogger(__name__)

TRACKING_SIGMA = 0.25
EVAL_LEVELS = (1, 2, 3, 4)
EVAL_NUM_ENVS = 64
EVAL_EPISODE_S = 10.0
Z_95 = 1.96

# vx, vy, yaw rate
COMMAND_RANGES = {
    1: ((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)),
    2: ((-2.0, 2.0), (-1.0, 1.0), (-2.0, 2.0)),
    3: ((-3.0, 3.0), (-1.0, 1.0), (-3.0, 3.0)),
}
REGIMES = ("lin", "ang", "combined")
TERRAIN_NAMES = {
    "slope": TerrainType.SLOPE,
    "rough": TerrainType.ROUGH_SLOPE,
    "stairs": TerrainType.STAIRS,
    "obstacles": TerrainType.DISCRETE_OBSTACLES,
}

MIN_SAMPLES_PER_CLASS = 100
PROBE_TRAIN_FRACTION = 0.7
FINAL_WINDOW = 10

PURPOSE_EVAL = 10
PURPOSE_PROBE = 11


class ProbeError(Exception):
    """Raised when the latent probe cannot be run or its result cannot be trusted."""
    pass


class ProbeControlError(ProbeError):
    """Raised when the shuffled-label control lands outside the chance band; carries the result."""

    def __init__(self, message: str, result: "ProbeResult"):
        super().__init__(message)
        self.result = result


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def nlts(v: np.ndarray, v_target: np.ndarray) -> np.ndarray:
    """exp(-||v_xy - v_target_xy||^2 / 0.25), over the last axis."""
    diff = np.asarray(v, dtype=np.float64) - np.asarray(v_target, dtype=np.float64)
    return np.exp(-np.sum(diff * diff, axis=-1) / TRACKING_SIGMA)


def nats(w: np.ndarray, w_target: np.ndarray) -> np.ndarray:
    """exp(-(w_yaw - w_target_yaw)^2 / 0.25)."""
    diff = np.asarray(w, dtype=np.float64) - np.asarray(w_target, dtype=np.float64)
    return np.exp(-diff * diff / TRACKING_SIGMA)


def half_width(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0
    return float(Z_95 * np.std(values, ddof=1) / math.sqrt(len(values)))


@dataclass
class EvalReport:
    terrain: str
    regime: str
    command_range: int
    trials: int
    lin_error: float
    lin_error_hw: float
    ang_error: float
    ang_error_hw: float
    nlts: float
    nlts_hw: float
    nats: float
    nats_hw: float

    def as_row(self) -> Dict[str, object]:
        return dict(self.__dict__)


def summarize_tracking(lin_error: np.ndarray, ang_error: np.ndarray,
                       mask: Optional[np.ndarray] = None) -> Dict[str, float]:
    """
    Per-episode means of (episodes, steps) error norms, then means and half-widths.

    Args:
        lin_error: ||v_xy - v_target_xy|| per step
        ang_error: |w_yaw - w_target_yaw| per step
        mask: Steps that belong to the episode (all if None)
    """
    lin_error = np.asarray(lin_error, dtype=np.float64)
    ang_error = np.asarray(ang_error, dtype=np.float64)
    mask = np.ones(lin_error.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    counts = np.maximum(mask.sum(axis=1), 1)

    def per_episode(x: np.ndarray) -> np.ndarray:
        return np.where(mask, x, 0.0).sum(axis=1) / counts

    episodes = {
        "lin_error": per_episode(lin_error),
        "ang_error": per_episode(ang_error),
        "nlts": per_episode(np.exp(-lin_error ** 2 / TRACKING_SIGMA)),
        "nats": per_episode(np.exp(-ang_error ** 2 / TRACKING_SIGMA)),
    }
    summary = {"trials": len(lin_error)}
    for name, values in episodes.items():
        summary[name] = float(np.mean(values))
        summary[f"{name}_hw"] = half_width(values)
    return summary


# ---------------------------------------------------------------------------
# Tracking benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalProtocol:
    terrain: TerrainType
    regime: str = "combined"
    command_range: int = 3
    num_envs: int = EVAL_NUM_ENVS
    episode_length_s: float = EVAL_EPISODE_S
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got '{self.regime}'")
        if self.command_range not in COMMAND_RANGES:
            raise ValueError(f"command range must be one of {sorted(COMMAND_RANGES)}, got {self.command_range}")


def command_sampler(regime: str, command_range: int):
    """Uniform commands in the range; the unused part of the regime is zero."""
    bounds = np.array(COMMAND_RANGES[command_range], dtype=np.float64)

    def sample(env_id: int, rng: np.random.Generator) -> np.ndarray:
        command = rng.uniform(bounds[:, 0], bounds[:, 1])
        if regime == "lin":
            command[2] = 0.0
        elif regime == "ang":
            command[:2] = 0.0
        return command

    return sample


def single_terrain_config(cfg: TrainConfig, terrain: TerrainType, num_envs: int) -> TrainConfig:
    """One row of the given family, curriculum off."""
    proportions = tuple(1.0 if t == terrain else 0.0 for t in TerrainType)
    return replace(cfg, num_envs=num_envs,
                   terrain=replace(cfg.terrain, proportions=proportions, tile_rows=1),
                   curriculum=replace(cfg.curriculum, enabled=False))


def mixed_terrain_config(cfg: TrainConfig, num_envs: int) -> TrainConfig:
    """One row per family, curriculum off."""
    return replace(cfg, num_envs=num_envs,
                   terrain=replace(cfg.terrain, proportions=(0.25, 0.25, 0.25, 0.25), tile_rows=4),
                   curriculum=replace(cfg.curriculum, enabled=False))


def evaluate(bundle: PolicyBundle, protocol: EvalProtocol, workers: int = 1) -> EvalReport:
    """
    Run the tracking benchmark for one (terrain, regime, range) cell.

    Each env runs a single episode of the protocol length (or until it
    terminates); the same bundle and protocol give the same report.
    """
    cfg = single_terrain_config(bundle.cfg, protocol.terrain, protocol.num_envs)
    n = protocol.num_envs
    levels = np.array(EVAL_LEVELS)[np.arange(n) % len(EVAL_LEVELS)]
    env = LocomotionEnv(cfg, workers=workers, levels=levels,
                        command_sampler=command_sampler(protocol.regime, protocol.command_range),
                        resample_commands=False, curriculum=False,
                        episode_length_s=protocol.episode_length_s, seed=protocol.seed)
    steps = env.max_episode_steps
    lin_error = np.zeros((n, steps))
    ang_error = np.zeros((n, steps))
    mask = np.zeros((n, steps), dtype=bool)
    active = np.ones(n, dtype=bool)
    try:
        history, critic_obs = env.history_window(), env.critic_observations()
        for t in range(steps):
            actions, _, _, _, _ = act_rollout(bundle.ac, bundle.him, history, critic_obs, OBS_DIM,
                                              None, cfg.ablation, deterministic=True)
            result = env.step(actions)
            lin_error[:, t] = np.linalg.norm(result.commands[:, :2] - result.base_lin_vel[:, :2], axis=1)
            ang_error[:, t] = np.abs(result.commands[:, 2] - result.base_ang_vel[:, 2])
            mask[:, t] = active
            active &= ~(result.terminated | result.truncated)
            if not active.any():
                break
            history, critic_obs = result.history, result.critic_obs
    finally:
        env.close()

    summary = summarize_tracking(lin_error, ang_error, mask)
    name = next(k for k, v in TERRAIN_NAMES.items() if v == protocol.terrain)
    report = EvalReport(terrain=name, regime=protocol.regime, command_range=protocol.command_range, **summary)
    logger.info(f"Eval {name}/{protocol.regime}/range {protocol.command_range}: "
                f"lin error {report.lin_error:.3f} ± {report.lin_error_hw:.3f}, "
                f"ang error {report.ang_error:.3f} ± {report.ang_error_hw:.3f}, "
                f"NLTS {report.nlts:.3f}, NATS {report.nats:.3f}")
    return report


def write_table(path: Union[str, Path], rows: Sequence[Dict[str, object]]) -> Path:
    """Comma-delimited table with the first row's keys as header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path


# ---------------------------------------------------------------------------
# Latent probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeResult:
    accuracy: float
    shuffled_accuracy: float
    chance_low: float
    chance_high: float
    samples_per_class: int
    test_size: int

    @property
    def control_passed(self) -> bool:
        return self.chance_low <= self.shuffled_accuracy <= self.chance_high


def chance_band(num_classes: int, n_test: int) -> Tuple[float, float]:
    """Binomial 95% band around 1/num_classes for n_test predictions."""
    p = 1.0 / num_classes
    hw = Z_95 * math.sqrt(p * (1.0 - p) / max(n_test, 1))
    return p - hw, p + hw


def fit_linear_probe(features: np.ndarray, labels: np.ndarray, num_classes: int,
                     rng: np.random.Generator, epochs: int = 300, lr: float = 0.05) -> float:
    """
    Multinomial logistic regression, full-batch Adam, 70/30 split.

    Returns:
        Held-out accuracy
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    order = rng.permutation(len(labels))
    n_train = int(PROBE_TRAIN_FRACTION * len(labels))
    train_idx, test_idx = order[:n_train], order[n_train:]

    mean = features[train_idx].mean(axis=0)
    std = features[train_idx].std(axis=0) + 1e-8
    x = (features - mean) / std
    onehot = np.eye(num_classes)[labels]

    model = DenseNet((x.shape[1], num_classes), rng, output_gain=1.0)
    optimizer = Adam(model.params, lr=lr)
    x_train = x[train_idx].astype(model.params["l0.W"].dtype)
    for _ in range(epochs):
        logits, tape = model.forward(x_train)
        grad = (softmax(logits) - onehot[train_idx]) / len(train_idx)
        grads, _ = model.backward(tape, grad)
        optimizer.step(grads)

    predicted = np.argmax(log_softmax(model(x[test_idx])), axis=1)
    return float(np.mean(predicted == labels[test_idx]))


def collect_latents(bundle: PolicyBundle, samples_per_class: int, seed: int = 0,
                    num_envs: int = EVAL_NUM_ENVS, workers: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Roll out the policy on all four families and record (latent, terrain type).

    Returns:
        (latents of shape (4 * samples_per_class, latent_dim), labels)
    """
    num_envs = max(len(TerrainType), num_envs - num_envs % len(TerrainType))
    cfg = mixed_terrain_config(bundle.cfg, num_envs)
    levels = np.array(EVAL_LEVELS)[(np.arange(num_envs) // len(TerrainType)) % len(EVAL_LEVELS)]
    env = LocomotionEnv(cfg, workers=workers, levels=levels, curriculum=False, seed=seed)
    per_step = num_envs // len(TerrainType)
    steps = int(math.ceil(samples_per_class / per_step))
    latents, labels = [], []
    try:
        history, critic_obs = env.history_window(), env.critic_observations()
        for _ in range(steps):
            types = env.terrain_types.copy()
            actions, _, _, _, embedding = act_rollout(bundle.ac, bundle.him, history, critic_obs,
                                                      OBS_DIM, None, cfg.ablation, deterministic=True)
            latents.append(np.asarray(embedding.latent, dtype=np.float64))
            labels.append(types)
            result = env.step(actions)
            history, critic_obs = result.history, result.critic_obs
    finally:
        env.close()

    latents = np.concatenate(latents)
    labels = np.concatenate(labels)
    keep = np.concatenate([np.flatnonzero(labels == t)[:samples_per_class] for t in TerrainType])
    return latents[keep], labels[keep]


def write_latents(path: Union[str, Path], latents: np.ndarray, labels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["terrain_type"] + [f"l{i}" for i in range(latents.shape[1])])
        for label, row in zip(labels, latents):
            writer.writerow([TerrainType(int(label)).name.lower()] + [repr(float(x)) for x in row])
    logger.info(f"Wrote {len(labels)} latent rows to {path}")
    return path


def probe_features(latents: np.ndarray, labels: np.ndarray, seed: int = 0) -> ProbeResult:
    """
    Probe accuracy on given features plus the shuffled-label control.

    Raises:
        ProbeError: If any class has fewer than 100 samples
    """
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = len(TerrainType)
    counts = np.bincount(labels, minlength=num_classes)
    if counts.min() < MIN_SAMPLES_PER_CLASS:
        raise ProbeError(f"need at least {MIN_SAMPLES_PER_CLASS} samples per terrain type, got {counts.tolist()}")

    rng = controller_rng(seed, PURPOSE_PROBE)
    accuracy = fit_linear_probe(latents, labels, num_classes, rng)
    shuffled = rng.permutation(labels)
    shuffled_accuracy = fit_linear_probe(latents, shuffled, num_classes, rng)
    test_size = len(labels) - int(PROBE_TRAIN_FRACTION * len(labels))
    low, high = chance_band(num_classes, test_size)
    return ProbeResult(accuracy=accuracy, shuffled_accuracy=shuffled_accuracy, chance_low=low,
                       chance_high=high, samples_per_class=int(counts.min()), test_size=test_size)


def latent_probe(bundle: PolicyBundle, samples_per_class: int = 500, seed: int = 0,
                 out_path: Optional[Union[str, Path]] = None, workers: int = 1) -> ProbeResult:
    """
    Linear separability of terrain types in the internal-model latent.

    Raises:
        ProbeError: If samples_per_class is below 100
        ProbeControlError: If the shuffled-label control fails
    """
    if samples_per_class < MIN_SAMPLES_PER_CLASS:
        raise ProbeError(f"need at least {MIN_SAMPLES_PER_CLASS} samples per terrain type, got {samples_per_class}")
    latents, labels = collect_latents(bundle, samples_per_class, seed=seed, workers=workers)
    if out_path is not None:
        write_latents(out_path, latents, labels)
    result = probe_features(latents, labels, seed=seed)
    logger.info(f"Latent probe: accuracy {result.accuracy:.3f}, shuffled control "
                f"{result.shuffled_accuracy:.3f} (chance band [{result.chance_low:.3f}, {result.chance_high:.3f}])")
    if not result.control_passed:
        raise ProbeControlError("shuffled-label control outside the chance band; probe accuracy is not "
                                "meaningful", result)
    return result


def velocity_estimation_mse(bundle: PolicyBundle, seed: int = 0, steps: int = 200,
                            num_envs: int = EVAL_NUM_ENVS, workers: int = 1) -> Tuple[float, float]:
    """
    Velocity-estimate MSE of the trained encoder and of a freshly initialized one
    on the same mixed-terrain rollout of the trained policy.

    Returns:
        (trained MSE, untrained MSE)
    """
    cfg = mixed_terrain_config(bundle.cfg, num_envs)
    env = LocomotionEnv(cfg, workers=workers, curriculum=False, seed=seed)
    histories, velocities = [], []
    try:
        history, critic_obs = env.history_window(), env.critic_observations()
        for _ in range(steps):
            histories.append(history)
            velocities.append(env.true_velocity())
            actions, _, _, _, _ = act_rollout(bundle.ac, bundle.him, history, critic_obs, OBS_DIM,
                                              None, cfg.ablation, deterministic=True)
            result = env.step(actions)
            history, critic_obs = result.history, result.critic_obs
    finally:
        env.close()
    histories = np.concatenate(histories)
    velocities = np.concatenate(velocities)
    untrained = build_models(bundle.cfg).him
    return velocity_mse(bundle.him, histories, velocities), velocity_mse(untrained, histories, velocities)


# ---------------------------------------------------------------------------
# Ablations and sweeps
# ---------------------------------------------------------------------------

_ABLATION_FLAGS = tuple(AblationSpec.__dataclass_fields__)


def parse_ablation_variants(text: str) -> Dict[str, AblationSpec]:
    """
    Variants from lines of the form `<variant>.<flag> = true|false`.

    Variants keep first-appearance order; unset flags are off.

    Raises:
        ConfigError: Unknown flag, malformed key or non-boolean value
    """
    flags: Dict[str, Dict[str, bool]] = {}
    for line, key, tokens in parse_kv_text(text):
        name, _, flag = key.partition(".")
        if not name or not flag:
            raise ConfigError(f"expected '<variant>.<flag>', got '{key}'", line=line)
        if flag not in _ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation flag '{flag}'", line=line)
        if len(tokens) != 1 or tokens[0].lower() not in ("true", "false"):
            raise ConfigError(f"{key}: expected true or false", line=line)
        flags.setdefault(name, {})[flag] = tokens[0].lower() == "true"
    return {name: AblationSpec(**values) for name, values in flags.items()}


def seed_list(cfg: TrainConfig, seeds: Union[int, Sequence[int]]) -> List[int]:
    if isinstance(seeds, int):
        return [cfg.seed + k for k in range(seeds)]
    return [int(s) for s in seeds]


def final_means(metrics_path: Union[str, Path], window: int = FINAL_WINDOW) -> Dict[str, float]:
    """Mean NLTS, NATS and terrain level over the last `window` metrics rows."""
    rows = read_metrics(metrics_path)[-window:]
    if not rows:
        return {"final_nlts": float("nan"), "final_nats": float("nan"), "final_terrain_level": float("nan")}
    return {
        "final_nlts": float(np.mean([r["nlts"] for r in rows])),
        "final_nats": float(np.mean([r["nats"] for r in rows])),
        "final_terrain_level": float(np.mean([r["terrain_level"] for r in rows])),
    }


def run_ablation(cfg: TrainConfig, variants: Dict[str, AblationSpec], seeds: Union[int, Sequence[int]],
                 out_dir: Union[str, Path], workers: int = 1) -> List[Dict[str, object]]:
    """
    Train every variant for every seed under out_dir/<variant>/seed_<s>/ and
    tabulate final means; the per-iteration curves stay in each run's metrics.csv.
    """
    out_dir = Path(out_dir)
    rows = []
    for name, spec in variants.items():
        for seed in seed_list(cfg, seeds):
            run_dir = out_dir / name / f"seed_{seed}"
            logger.info(f"Ablation variant '{name}', seed {seed}")
            train(replace(cfg, ablation=spec, seed=seed), run_dir, workers=workers)
            metrics = run_dir / "metrics.csv"
            rows.append({"variant": name, "seed": seed, **final_means(metrics), "metrics": str(metrics)})
    write_table(out_dir / "ablation.csv", rows)
    return rows


def sweep_prototypes(cfg: TrainConfig, k_values: Sequence[int], seeds: Union[int, Sequence[int]],
                     out_dir: Union[str, Path], workers: int = 1) -> List[Dict[str, object]]:
    """
    Final NLTS per (prototype count, seed).

    Raises:
        ConfigError: If any K is below 2
    """
    bad = [k for k in k_values if k < 2]
    if bad:
        raise ConfigError(f"prototype counts must be ≥ 2, got {bad}")
    out_dir = Path(out_dir)
    rows = []
    for k in k_values:
        for seed in seed_list(cfg, seeds):
            run_dir = out_dir / f"k_{k}" / f"seed_{seed}"
            logger.info(f"Prototype sweep K={k}, seed {seed}")
            train(replace(cfg, him=replace(cfg.him, num_prototypes=int(k)), seed=seed), run_dir, workers=workers)
            rows.append({"num_prototypes": int(k), "seed": seed,
                         "final_nlts": final_means(run_dir / "metrics.csv")["final_nlts"]})
    write_table(out_dir / "sweep_k.csv", rows)
    return rows
