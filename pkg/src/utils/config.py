"""
Configuration management for the HIM locomotion trainer.

Two layers live here:
- Config: runtime settings (output dir, worker count, log level) read from
  environment variables, with a .env file picked up automatically.
- TrainConfig: the run configuration (robot, terrain, randomization, HIM/PPO
  hyperparameters, curriculum) loaded from a flat dotted key-value file.

File format:
    # comment
    num_envs = 256
    ppo.clip_range = 0.2
    randomization.friction = 0.2, 2.75
    network.encoder_hidden = 512, 256, 128

Every key not present in the file keeps its default. Defaults are the
full-scale training setup.
"""

import logging
import os
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

Interval = Tuple[float, float]
Interval3 = Tuple[Interval, Interval, Interval]


class ConfigError(ValueError):
    """Raised when a config file cannot be parsed or a config fails validation."""

    def __init__(self, message: str, line: Optional[int] = None,
                 violations: Optional[List[str]] = None):
        self.line = line
        self.violations = list(violations or [])
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class Config:
    """Runtime settings from the environment variables."""

    OUT_DIR = os.getenv("HIM_OUT_DIR", "runs")
    WORKERS = os.getenv("HIM_WORKERS", "1")
    LOG_LEVEL = os.getenv("HIM_LOG_LEVEL", "INFO")
    CONFIG_PATH = os.getenv("HIM_CONFIG", "")

    @classmethod
    def worker_count(cls) -> int:
        """Worker pool size for simulation stepping.

        Raises:
            ValueError: If HIM_WORKERS is not a positive integer.
        """
        try:
            workers = int(cls.WORKERS)
        except ValueError:
            workers = 0
        if workers < 1:
            raise ValueError(
                f"HIM_WORKERS must be a positive integer, got '{cls.WORKERS}'.\n"
                "Set it in your .env file or leave it unset for a single worker.\n"
            )
        return workers


config = Config()


def _interval(kind: str = "interval", **kwargs):
    return field(metadata={"kind": kind}, **kwargs)


def _floats(default: Tuple[float, ...]):
    return field(default=default, metadata={"kind": "floats"})


def _ints(default: Tuple[int, ...]):
    return field(default=default, metadata={"kind": "ints"})


@dataclass(frozen=True)
class RobotDescription:
    """A Unitree-A1-class quadruped. Legs ordered FL, FR, RL, RR; joints per leg
    ordered hip abduction, hip pitch (thigh), knee (calf)."""

    num_joints: int = 12
    nominal_joint_positions: Tuple[float, ...] = _floats(
        (0.1, 0.8, -1.5, -0.1, 0.8, -1.5, 0.1, 0.8, -1.5, -0.1, 0.8, -1.5))
    # hip offset, thigh, calf
    leg_link_lengths: Tuple[float, ...] = _floats((0.08, 0.2, 0.2))
    # hip mounting points in the base frame, one xyz triple per leg
    hip_mount_offsets: Tuple[float, ...] = _floats(
        (0.1805, 0.047, 0.0, 0.1805, -0.047, 0.0,
         -0.1805, 0.047, 0.0, -0.1805, -0.047, 0.0))
    joint_lower_limits: Tuple[float, ...] = _floats((-0.8, -1.0, -2.7) * 4)
    joint_upper_limits: Tuple[float, ...] = _floats((0.8, 4.2, -0.9) * 4)
    base_mass_nominal: float = 12.0
    link_masses_nominal: Tuple[float, ...] = _floats((0.6, 0.9, 0.2) * 4)
    # row-major 3x3, legs lumped into the base
    base_inertia_nominal: Tuple[float, ...] = _floats(
        (0.15, 0.0, 0.0, 0.0, 0.35, 0.0, 0.0, 0.0, 0.40))
    motor_torque_nominal: float = 33.5
    joint_inertia: float = 0.05
    joint_damping: float = 0.01
    base_height_target: float = 0.30
    foot_clearance_target: float = 0.08


@dataclass(frozen=True)
class RandomizationRanges:
    """Per-episode domain randomization intervals. Scale entries multiply the
    nominal value; kp/kd scales multiply 20 and 0.5."""

    body_mass_scale: Interval = _interval(default=(0.8, 1.2))
    link_mass_scale: Interval = _interval(default=(0.8, 1.2))
    com_offset: Interval3 = _interval("interval3", default=((-0.1, 0.1),) * 3)
    payload: Interval = _interval(default=(-1.0, 3.0))
    friction: Interval = _interval(default=(0.2, 2.75))
    restitution: Interval = _interval(default=(0.0, 1.0))
    motor_strength_scale: Interval = _interval(default=(0.8, 1.2))
    kp_scale: Interval = _interval(default=(0.8, 1.2))
    kd_scale: Interval = _interval(default=(0.8, 1.2))
    init_joint_scale: Interval = _interval(default=(0.5, 1.5))
    delay_steps: Tuple[int, int] = _interval("int_interval", default=(0, 3))
    external_force: Interval3 = _interval("interval3", default=((-30.0, 30.0),) * 3)
    kp_nominal: float = 20.0
    kd_nominal: float = 0.5


@dataclass(frozen=True)
class ContactConfig:
    stiffness: float = 2.0e4
    damping_max: float = 600.0
    tangential_damping: float = 400.0


@dataclass(frozen=True)
class TerrainConfig:
    # slope, rough slope, stairs, discrete obstacles
    proportions: Tuple[float, ...] = _floats((0.1, 0.2, 0.6, 0.1))
    tile_rows: int = 20
    tile_cols: int = 10
    tile_side: float = 10.0
    cell_size: float = 0.05
    platform_size: float = 2.0
    stair_width_range: Interval = _interval(default=(0.20, 0.40))
    num_obstacles: int = 20
    obstacle_size_range: Interval = _interval(default=(1.0, 2.0))
    scan_points: int = 11
    scan_span: float = 1.0


@dataclass(frozen=True)
class EnvConfig:
    action_scale: float = 0.25
    clip_actions: float = 100.0
    episode_length_s: float = 20.0
    dof_vel_scale: float = 0.05
    ang_vel_scale: float = 0.25
    force_scale: float = 0.1
    spawn_jitter: float = 1.0


@dataclass(frozen=True)
class RewardConfig:
    sigma: float = 0.25
    lin_vel_tracking: float = 1.0
    ang_vel_tracking: float = 0.5
    lin_vel_z: float = -2.0
    ang_vel_xy: float = -0.05
    orientation: float = -0.2
    joint_acc: float = -2.5e-7
    joint_power: float = -2.0e-5
    base_height: float = -1.0
    foot_clearance: float = -0.01
    action_rate: float = -0.01
    smoothness: float = -0.01


@dataclass(frozen=True)
class CurriculumConfig:
    enabled: bool = True
    init_level: int = 0
    max_level: int = 9
    promote_threshold: float = 0.8
    demote_fraction: float = 0.5
    resample_interval: int = 25
    # stairs and discrete obstacles
    complex_lin_x: Interval = _interval(default=(-1.0, 1.0))
    complex_lin_y: Interval = _interval(default=(-1.0, 1.0))
    complex_ang_yaw: Interval = _interval(default=(-2.0, 2.0))
    # slopes and rough slopes
    open_lin_x: Interval = _interval(default=(-3.0, 3.0))
    open_lin_y: Interval = _interval(default=(-1.0, 1.0))
    open_ang_yaw: Interval = _interval(default=(-3.0, 3.0))


@dataclass(frozen=True)
class PpoConfig:
    clip_range: float = 0.2
    entropy_coef: float = 0.01
    value_loss_coef: float = 1.0
    gamma: float = 0.99
    gae_lambda: float = 0.95
    desired_kl: float = 0.01
    learning_rate: float = 1e-3
    lr_min: float = 1e-6
    lr_max: float = 1e-2
    adaptive_lr: bool = True
    num_epochs: int = 5
    num_minibatches: int = 4
    grad_clip: float = 10.0
    adam_epsilon: float = 1e-8
    joint_him_gradient: bool = False


@dataclass(frozen=True)
class HimConfig:
    history_len: int = 5
    latent_dim: int = 16
    num_prototypes: int = 16
    temperature: float = 0.1
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 3
    contrastive_scale: float = 1.0
    velocity_scale: float = 1.0
    learning_rate: float = 1e-3
    grad_clip: float = 10.0
    adam_epsilon: float = 1e-8
    augment_noise: float = 0.01
    num_epochs: int = 1
    num_minibatches: int = 1
    frozen_prototypes: bool = False


@dataclass(frozen=True)
class NetworkConfig:
    actor_hidden: Tuple[int, ...] = _ints((512, 256, 128))
    critic_hidden: Tuple[int, ...] = _ints((512, 256, 128))
    encoder_hidden: Tuple[int, ...] = _ints((512, 256, 128))
    target_hidden: Tuple[int, ...] = _ints((128, 64))
    init_log_std: float = 0.0


@dataclass(frozen=True)
class AblationSpec:
    """Switchboard for the ablation variants. All off = the full method."""

    zero_velocity_input: bool = False
    drop_velocity_loss: bool = False
    zero_latent_input: bool = False
    drop_latent_loss: bool = False
    regression_mode: bool = False
    oracle_mode: bool = False


@dataclass(frozen=True)
class TrainConfig:
    num_envs: int = 4096
    # steps per env per iteration; 200 doubles the batch at the same env count
    rollout_length: int = 100
    num_iterations: int = 1000
    seed: int = 1
    sim_dt: float = 0.005
    control_decimation: int = 4
    checkpoint_interval: int = 50
    record_wall_time: bool = False
    robot: RobotDescription = field(default_factory=RobotDescription)
    randomization: RandomizationRanges = field(default_factory=RandomizationRanges)
    contact: ContactConfig = field(default_factory=ContactConfig)
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    him: HimConfig = field(default_factory=HimConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    ablation: AblationSpec = field(default_factory=AblationSpec)

    @property
    def policy_dt(self) -> float:
        return self.sim_dt * self.control_decimation

    @property
    def max_episode_steps(self) -> int:
        return int(round(self.env.episode_length_s / self.policy_dt))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _field_kind(obj: Any, name: str) -> str:
    for f in fields(obj):
        if f.name == name:
            return f.metadata.get("kind", "scalar")
    return "scalar"


def _parse_token(token: str, kind: type, key: str, line: int) -> Any:
    try:
        if kind is bool:
            lowered = token.lower()
            if lowered not in ("true", "false"):
                raise ValueError(token)
            return lowered == "true"
        if kind is int:
            return int(token)
        if kind is float:
            return float(token)
        return token
    except ValueError:
        raise ConfigError(f"{key}: cannot parse '{token}' as {kind.__name__}", line=line)


def _coerce(current: Any, kind: str, tokens: List[str], key: str, line: int) -> Any:
    if kind == "interval":
        if len(tokens) != 2:
            raise ConfigError(f"{key}: expected 'min, max'", line=line)
        return tuple(_parse_token(t, float, key, line) for t in tokens)
    if kind == "int_interval":
        if len(tokens) != 2:
            raise ConfigError(f"{key}: expected 'min, max'", line=line)
        return tuple(_parse_token(t, int, key, line) for t in tokens)
    if kind == "interval3":
        values = [_parse_token(t, float, key, line) for t in tokens]
        if len(values) == 2:
            return (tuple(values),) * 3
        if len(values) == 6:
            return tuple(tuple(values[i:i + 2]) for i in (0, 2, 4))
        raise ConfigError(f"{key}: expected 2 or 6 numbers", line=line)
    if kind == "floats":
        return tuple(_parse_token(t, float, key, line) for t in tokens)
    if kind == "ints":
        return tuple(_parse_token(t, int, key, line) for t in tokens)
    if len(tokens) != 1:
        raise ConfigError(f"{key}: expected a single value", line=line)
    return _parse_token(tokens[0], type(current), key, line)


def _set_path(obj: Any, parts: List[str], tokens: List[str], key: str, line: int) -> Any:
    names = {f.name for f in fields(obj)}
    name = parts[0]
    if name not in names:
        raise ConfigError(f"unknown key '{key}'", line=line)
    current = getattr(obj, name)
    if len(parts) > 1:
        if not is_dataclass(current):
            raise ConfigError(f"'{key}': '{name}' is not a section", line=line)
        return replace(obj, **{name: _set_path(current, parts[1:], tokens, key, line)})
    if is_dataclass(current):
        raise ConfigError(f"'{key}' is a section, not a value", line=line)
    return replace(obj, **{name: _coerce(current, _field_kind(obj, name), tokens, key, line)})


def parse_kv_text(text: str) -> List[Tuple[int, str, List[str]]]:
    """
    Split a dotted key-value document into (line, key, value tokens) entries.

    Raises:
        ConfigError: On a line without '=' or with an empty key.
    """
    entries = []
    for number, raw in enumerate(text.splitlines(), 1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got '{stripped}'", line=number)
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ConfigError("empty key", line=number)
        tokens = [t.strip() for t in value.split(",") if t.strip()]
        if not tokens:
            raise ConfigError(f"{key}: missing value", line=number)
        entries.append((number, key, tokens))
    return entries


def apply_overrides(cfg: TrainConfig, overrides: Dict[str, Union[str, Any]]) -> TrainConfig:
    """Return a copy of cfg with dotted-path overrides applied, e.g.
    {"him.num_prototypes": 64}. Values may be strings in file syntax or Python values."""
    for key, value in overrides.items():
        if isinstance(value, str):
            tokens = [t.strip() for t in value.split(",") if t.strip()]
        elif isinstance(value, bool):
            tokens = ["true" if value else "false"]
        elif isinstance(value, (tuple, list)):
            tokens = [_format_scalar(v) for v in _flatten(value)]
        else:
            tokens = [_format_scalar(value)]
        cfg = _set_path(cfg, key.split("."), tokens, key, line=None)
    return cfg


def parse_config(text: str, validate_result: bool = True) -> TrainConfig:
    cfg = TrainConfig()
    for line, key, tokens in parse_kv_text(text):
        cfg = _set_path(cfg, key.split("."), tokens, key, line)
    if validate_result:
        violations = validate(cfg)
        if violations:
            raise ConfigError("invalid config: " + "; ".join(violations),
                              violations=violations)
    return cfg


def load_config(path: Union[str, Path]) -> TrainConfig:
    """
    Load, default and validate a run configuration file.

    Args:
        path: Path to a dotted key-value file (may be empty)

    Returns:
        Fully defaulted TrainConfig

    Raises:
        ConfigError: On parse errors (with line number) or invariant violations
    """
    text = Path(path).read_text(encoding="utf-8")
    cfg = parse_config(text)
    logger.info(f"Loaded config from {path}")
    return cfg


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _flatten(value: Any) -> List[Any]:
    if isinstance(value, (tuple, list)):
        out = []
        for item in value:
            out.extend(_flatten(item))
        return out
    return [value]


def _format_scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _serialize_into(obj: Any, prefix: str, lines: List[str]) -> None:
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(value):
            lines.append("")
            lines.append(f"# {f.name}")
            _serialize_into(value, f"{key}.", lines)
        else:
            lines.append(f"{key} = " + ", ".join(_format_scalar(v) for v in _flatten(value)))


def serialize_config(cfg: TrainConfig) -> str:
    """Write every field of cfg in the key-value format; reparses to an equal config."""
    lines: List[str] = []
    _serialize_into(cfg, "", lines)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _check_intervals(section: Any, prefix: str, violations: List[str]) -> None:
    for f in fields(section):
        kind = f.metadata.get("kind")
        value = getattr(section, f.name)
        if kind in ("interval", "int_interval"):
            if value[0] > value[1]:
                violations.append(f"{prefix}{f.name}: min > max")
        elif kind == "interval3":
            for axis, interval in zip("xyz", value):
                if interval[0] > interval[1]:
                    violations.append(f"{prefix}{f.name}.{axis}: min > max")


def validate(cfg: TrainConfig) -> List[str]:
    """
    Check every config invariant.

    Returns:
        List of violation messages; empty iff the config is valid
    """
    v: List[str] = []

    if cfg.num_envs < 1:
        v.append("num_envs must be ≥ 1")
    if cfg.rollout_length < 2:
        v.append("rollout_length must be ≥ 2")
    if cfg.num_iterations < 0:
        v.append("num_iterations must be ≥ 0")
    if cfg.seed < 0:
        v.append("seed must be ≥ 0")
    if not cfg.sim_dt > 0:
        v.append("sim_dt must be > 0")
    if cfg.control_decimation < 1:
        v.append("control_decimation must be ≥ 1")
    if cfg.checkpoint_interval < 1:
        v.append("checkpoint_interval must be ≥ 1")

    robot = cfg.robot
    n = robot.num_joints
    if n != 12:
        v.append("robot.num_joints must be 12")
    for name in ("nominal_joint_positions", "joint_lower_limits",
                 "joint_upper_limits", "link_masses_nominal"):
        if len(getattr(robot, name)) != n:
            v.append(f"robot.{name} must have {n} entries")
    if len(robot.leg_link_lengths) != 3:
        v.append("robot.leg_link_lengths must have 3 entries")
    if len(robot.hip_mount_offsets) != 12:
        v.append("robot.hip_mount_offsets must have 12 entries")
    if len(robot.base_inertia_nominal) != 9:
        v.append("robot.base_inertia_nominal must have 9 entries")
    positive = list(robot.leg_link_lengths[1:]) + list(robot.link_masses_nominal) + [
        robot.base_mass_nominal, robot.motor_torque_nominal, robot.joint_inertia,
        robot.base_height_target, robot.foot_clearance_target]
    if any(not x > 0 for x in positive):
        v.append("robot lengths, masses and torques must be > 0")
    if len(robot.nominal_joint_positions) == n == len(robot.joint_lower_limits) == len(robot.joint_upper_limits):
        for i, (q, lo, hi) in enumerate(zip(robot.nominal_joint_positions,
                                             robot.joint_lower_limits,
                                             robot.joint_upper_limits)):
            if not lo <= q <= hi:
                v.append(f"robot.nominal_joint_positions[{i}] outside joint limits")

    _check_intervals(cfg.randomization, "", v)
    if cfg.randomization.delay_steps[0] < 0:
        v.append("delay_steps must be ≥ 0")
    if cfg.randomization.friction[0] < 0:
        v.append("friction must be ≥ 0")
    lo, hi = cfg.randomization.restitution
    if lo <= hi and not (0.0 <= lo and hi <= 1.0):
        v.append("restitution must lie in [0, 1]")

    terrain = cfg.terrain
    if len(terrain.proportions) != 4 or any(p < 0 for p in terrain.proportions):
        v.append("terrain.proportions must be 4 non-negative numbers")
    elif abs(sum(terrain.proportions) - 1.0) > 1e-9:
        v.append("terrain.proportions must sum to 1")
    if terrain.tile_rows < 1 or terrain.tile_cols < 1:
        v.append("terrain tile grid must be at least 1 x 1")
    if not terrain.cell_size > 0 or not terrain.tile_side > 0:
        v.append("terrain.cell_size and terrain.tile_side must be > 0")
    elif abs(terrain.tile_side / terrain.cell_size - round(terrain.tile_side / terrain.cell_size)) > 1e-6:
        v.append("terrain.tile_side must be a multiple of terrain.cell_size")
    if terrain.scan_points < 1:
        v.append("terrain.scan_points must be ≥ 1")
    _check_intervals(terrain, "terrain.", v)

    cur = cfg.curriculum
    if not 0 <= cur.init_level <= cur.max_level <= 9:
        v.append("curriculum levels must satisfy 0 ≤ init_level ≤ max_level ≤ 9")
    if cur.resample_interval < 1:
        v.append("curriculum.resample_interval must be ≥ 1")
    _check_intervals(cur, "curriculum.", v)

    if not cfg.env.action_scale > 0 or cfg.env.action_scale > 1:
        v.append("env.action_scale must be in (0,1]")
    if not cfg.env.episode_length_s > 0:
        v.append("env.episode_length_s must be > 0")
    if not cfg.rewards.sigma > 0:
        v.append("rewards.sigma must be > 0")

    ppo = cfg.ppo
    if not 0 < ppo.gamma <= 1:
        v.append("gamma must be in (0,1]")
    if not 0 <= ppo.gae_lambda <= 1:
        v.append("gae_lambda must be in [0,1]")
    if not ppo.clip_range > 0:
        v.append("clip_range must be > 0")
    if ppo.num_epochs < 1 or ppo.num_minibatches < 1:
        v.append("ppo.num_epochs and ppo.num_minibatches must be ≥ 1")
    if not 0 < ppo.lr_min <= ppo.learning_rate <= ppo.lr_max:
        v.append("ppo learning rate must satisfy 0 < lr_min ≤ learning_rate ≤ lr_max")

    him = cfg.him
    if him.history_len < 1:
        v.append("history_len must be ≥ 1")
    if him.latent_dim < 1:
        v.append("latent_dim must be ≥ 1")
    if him.num_prototypes < 2:
        v.append("num_prototypes must be ≥ 2")
    if not him.temperature > 0:
        v.append("temperature must be > 0")
    if not him.sinkhorn_epsilon > 0:
        v.append("sinkhorn_epsilon must be > 0")
    if him.sinkhorn_iters < 1:
        v.append("sinkhorn_iters must be ≥ 1")
    if him.num_epochs < 1 or him.num_minibatches < 1:
        v.append("him.num_epochs and him.num_minibatches must be ≥ 1")
    if him.augment_noise < 0:
        v.append("him.augment_noise must be ≥ 0")

    net = cfg.network
    for name in ("actor_hidden", "critic_hidden", "encoder_hidden", "target_hidden"):
        sizes = getattr(net, name)
        if not sizes or any(s < 1 for s in sizes):
            v.append(f"network.{name} must list positive widths")

    return v
