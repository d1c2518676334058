import pytest

from src.utils.config import parse_config

TINY_CONFIG = """
num_envs = 8
rollout_length = 8
num_iterations = 2
checkpoint_interval = 1
seed = 3

terrain.tile_rows = 4
terrain.tile_cols = 3
terrain.tile_side = 2.0
terrain.cell_size = 0.1
terrain.platform_size = 0.6
terrain.num_obstacles = 3
terrain.obstacle_size_range = 0.2, 0.4
terrain.scan_points = 3
terrain.scan_span = 0.4
terrain.proportions = 0.25, 0.25, 0.25, 0.25

env.episode_length_s = 1.0
env.spawn_jitter = 0.2

ppo.num_epochs = 2
ppo.num_minibatches = 2

him.latent_dim = 4
him.num_prototypes = 4

network.actor_hidden = 16, 16
network.critic_hidden = 16, 16
network.encoder_hidden = 16, 16
network.target_hidden = 8
"""


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long training experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiment")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    return parse_config(TINY_CONFIG)
