from dataclasses import replace

import numpy as np
import pytest

from src.sim.env import (OBS_DIM, HistoryBuffer, LocomotionEnv, command_ranges, sample_command,
                         update_curriculum)
from src.sim.terrain import TerrainType, sample_heights
from src.utils.config import CurriculumConfig


@pytest.fixture
def env(tiny_config):
    env = LocomotionEnv(tiny_config)
    yield env
    env.close()


def test_dimensions(env, tiny_config):
    assert env.observation_frames().shape == (8, OBS_DIM)
    assert env.critic_dim == OBS_DIM + 3 + 9
    assert env.critic_observations().shape == (8, env.critic_dim)
    assert env.history_dim == 6 * OBS_DIM
    assert env.history_window().shape == (8, env.history_dim)
    assert env.max_episode_steps == 50


def test_spawn_puts_lowest_foot_on_terrain(env):
    feet = env.state.foot_pos
    gap = feet[..., 2] - sample_heights(env.field, feet[..., 0], feet[..., 1])
    assert np.allclose(gap.min(axis=1), 0.0, atol=1e-9)


def test_rows_and_families(env):
    assert env.rows.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
    assert env.terrain_types.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]


def test_commands_within_family_ranges(env, tiny_config):
    for i in range(env.num_envs):
        ranges = command_ranges(TerrainType(int(env.terrain_types[i])), tiny_config.curriculum)
        assert np.all(env.commands[i] >= ranges[:, 0]) and np.all(env.commands[i] <= ranges[:, 1])


def test_command_ranges_by_family():
    cfg = CurriculumConfig()
    assert command_ranges(TerrainType.SLOPE, cfg)[0].tolist() == [-3.0, 3.0]
    assert command_ranges(TerrainType.STAIRS, cfg)[0].tolist() == [-1.0, 1.0]
    rng = np.random.default_rng(0)
    draws = np.array([sample_command(TerrainType.DISCRETE_OBSTACLES, cfg, rng) for _ in range(200)])
    assert np.all(np.abs(draws[:, 0]) <= 1.0) and np.all(np.abs(draws[:, 2]) <= 2.0)


def test_action_clipping(env, tiny_config):
    clip = tiny_config.env.clip_actions
    at_bound = env.act(np.full((8, 12), clip))
    beyond = env.act(np.full((8, 12), clip * 10))
    assert np.array_equal(at_bound, beyond)
    assert np.allclose(env.act(np.zeros((8, 12))), env.theta0)


def test_curriculum_rules():
    cfg = CurriculumConfig()
    rng = np.random.default_rng(0)
    levels = np.array([3, 3, 3, 0, 9])
    tracking = np.array([0.9, 0.5, 0.9, 0.1, 0.95])
    distance = np.array([0.0, 1.0, 10.0, 0.0, 10.0])
    new = update_curriculum(levels, tracking, distance, cfg, 10.0, rng)
    # promotion wins over demotion; demotion clamps at 0
    assert new[:4].tolist() == [4, 2, 4, 0]
    assert 0 <= new[4] <= 9


def test_graduation_is_random_level():
    cfg = CurriculumConfig()
    rng = np.random.default_rng(1)
    new = update_curriculum(np.full(200, 9), np.ones(200), np.full(200, 10.0), cfg, 10.0, rng)
    assert len(np.unique(new)) > 5


def test_history_buffer():
    buf = HistoryBuffer(2, 3, frame_dim=2)
    buf.backfill(np.array([0, 1]), np.array([[1.0, 1.0], [2.0, 2.0]]))
    buf.push(np.array([[5.0, 5.0], [6.0, 6.0]]))
    window = buf.window(np.array([[9.0, 9.0], [8.0, 8.0]]))
    assert window[0].tolist() == [1, 1, 1, 1, 5, 5, 9, 9]
    assert window[1].tolist() == [2, 2, 2, 2, 6, 6, 8, 8]


def test_step_updates_history(env):
    before = env.current_frames.copy()
    result = env.step(np.zeros((8, 12)))
    frames = result.history.reshape(8, 6, OBS_DIM)
    assert np.array_equal(frames[:, -1], result.obs)
    alive = ~(result.terminated | result.truncated)
    assert np.array_equal(frames[alive, -2], before[alive])
    assert result.reward.shape == (8,)
    assert result.commands.shape == (8, 3)


def test_truncation_and_auto_reset(env):
    done_at = np.full(8, -1)
    for t in range(env.max_episode_steps):
        result = env.step(np.zeros((8, 12)))
        finished = (result.terminated | result.truncated) & (done_at < 0)
        done_at[finished] = t
    assert np.all(done_at >= 0)
    assert not np.any(result.terminated & result.truncated)
    episodes = env.drain_episodes()
    assert len(episodes) >= 8
    assert all(e.length <= env.max_episode_steps for e in episodes)


def test_zero_action_tracks_poorly_with_commands(tiny_config):
    env = LocomotionEnv(tiny_config, command_sampler=lambda i, rng: np.array([1.0, 0.0, 0.0]),
                        resample_commands=False, curriculum=False)
    result = None
    for _ in range(10):
        result = env.step(np.zeros((8, 12)))
    env.close()
    assert np.all(result.breakdown.terms["lin_vel_tracking"] < 1.0)


def test_same_seed_same_rollout(tiny_config):
    def rollout():
        env = LocomotionEnv(tiny_config)
        rng = np.random.default_rng(0)
        obs = []
        for _ in range(20):
            obs.append(env.step(0.5 * rng.standard_normal((8, 12))).obs)
        env.close()
        return np.stack(obs)

    assert rollout().tobytes() == rollout().tobytes()


def test_reset_draws_independent_of_batch_size(tiny_config):
    small = LocomotionEnv(replace(tiny_config, num_envs=4))
    large = LocomotionEnv(tiny_config)
    for name, value in small.params.state_dict().items():
        assert np.array_equal(value, large.params.state_dict()[name][:4]), name
    assert np.array_equal(small.commands, large.commands[:4])
    small.close()
    large.close()


def test_state_dict_resume_is_exact(tiny_config):
    rng = np.random.default_rng(3)
    first = LocomotionEnv(tiny_config)
    for _ in range(7):
        first.step(0.3 * rng.standard_normal((8, 12)))
    saved = first.state_dict()

    second = LocomotionEnv(tiny_config)
    second.load_state_dict(saved)
    actions = [0.3 * rng.standard_normal((8, 12)) for _ in range(60)]
    a = [first.step(x) for x in actions]
    b = [second.step(x) for x in actions]
    for ra, rb in zip(a, b):
        assert ra.obs.tobytes() == rb.obs.tobytes()
        assert ra.reward.tobytes() == rb.reward.tobytes()
    first.close()
    second.close()


def test_episode_summary(env):
    summary = env.episode_summary([])
    assert summary["episodes"] == 0
    assert np.isnan(summary["mean_episode_reward"])
    assert summary["terrain_level"] == 0.0
    assert set(k for k in summary if k.startswith("level_")) == {
        "level_slope", "level_rough_slope", "level_stairs", "level_discrete_obstacles"}
