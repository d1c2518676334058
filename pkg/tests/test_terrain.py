import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.sim.terrain import (HeightField, TerrainError, TerrainType, build_field, dump_field,
                             height_at, height_samples, level_for_column, rows_per_type,
                             sample_heights, scan_pattern, surface_normals, tile_center, tile_params)
from src.utils.config import TerrainConfig


def _single_family(terrain_type, **overrides):
    proportions = tuple(1.0 if t == terrain_type else 0.0 for t in TerrainType)
    return replace(TerrainConfig(), proportions=proportions, tile_rows=1, **overrides)


def test_tile_params_level_formulas():
    assert tile_params(TerrainType.SLOPE, 0).inclination_deg == 0.0
    assert tile_params(TerrainType.SLOPE, 9).inclination_deg == pytest.approx(40.0)
    assert tile_params(TerrainType.ROUGH_SLOPE, 9).noise_amplitude == pytest.approx(0.08)
    assert tile_params(TerrainType.ROUGH_SLOPE, 0).noise_amplitude == pytest.approx(0.01)
    assert tile_params(TerrainType.STAIRS, 0).step_height == pytest.approx(0.05)
    assert tile_params(TerrainType.STAIRS, 9).step_height == pytest.approx(0.23)
    assert tile_params(TerrainType.DISCRETE_OBSTACLES, 9).obstacle_height == pytest.approx(0.15)
    assert tile_params(TerrainType.STAIRS, 4).inclination_deg == 0.0


@pytest.mark.parametrize("level", [-1, 10, 2.5])
def test_tile_params_rejects_bad_levels(level):
    with pytest.raises(TerrainError):
        tile_params(TerrainType.SLOPE, level)


def test_rows_per_type_largest_remainder():
    assert rows_per_type((0.1, 0.2, 0.6, 0.1), 20) == [2, 4, 12, 2]
    assert sum(rows_per_type((0.25, 0.25, 0.25, 0.25), 7)) == 7
    assert rows_per_type((0.0, 1.0, 0.0, 0.0), 1) == [0, 1, 0, 0]


def test_level_column_mapping():
    assert level_for_column(0, 10) == 0
    assert level_for_column(9, 10) == 9
    assert level_for_column(0, 1) == 0


def test_steepest_slope_analytic_height():
    cfg = _single_family(TerrainType.SLOPE)
    field = build_field(0, cfg.proportions, cfg)
    # 1 m in from the tile edge, along the middle of the level-9 column
    y = (field.column_for_level(9) + 0.5) * field.tile_side
    assert height_at(field, 1.0, y) == pytest.approx(math.tan(math.radians(40.0)), abs=1e-9)
    assert height_at(field, 0.0, y) == pytest.approx(0.0, abs=1e-12)


def test_level_zero_slope_is_flat():
    cfg = _single_family(TerrainType.SLOPE)
    field = build_field(0, cfg.proportions, cfg)
    n = field.nodes_per_tile
    assert np.all(field.grid[:, : n + 1] == 0.0)


@pytest.mark.parametrize("terrain_type", list(TerrainType))
@pytest.mark.parametrize("seed", [0, 7])
def test_level_zero_is_within_noise_amplitude(terrain_type, seed):
    cfg = _single_family(terrain_type)
    field = build_field(seed, cfg.proportions, cfg)
    n = field.nodes_per_tile
    amplitude = tile_params(terrain_type, 0).noise_amplitude
    assert np.abs(field.grid[:, :n]).max() <= amplitude
    # the next level up is no longer flat
    assert np.abs(field.grid[:, n + 1:2 * n]).max() > 0.0


def test_same_seed_bit_identical_and_seed_matters():
    cfg = replace(TerrainConfig(), tile_rows=4, tile_cols=3, tile_side=2.0, cell_size=0.1,
                  proportions=(0.25, 0.25, 0.25, 0.25), platform_size=0.6,
                  obstacle_size_range=(0.2, 0.4), num_obstacles=3)
    a = build_field(5, cfg.proportions, cfg)
    b = build_field(5, cfg.proportions, cfg)
    c = build_field(6, cfg.proportions, cfg)
    assert a.grid.tobytes() == b.grid.tobytes()
    assert not np.array_equal(a.grid, c.grid)
    assert a.grid.shape == (4 * 20 + 1, 3 * 20 + 1)
    assert [a.row_type(r) for r in range(4)] == list(TerrainType)


def test_stairs_are_whole_steps():
    cfg = _single_family(TerrainType.STAIRS, tile_cols=2, tile_side=4.0, cell_size=0.05)
    field = build_field(1, cfg.proportions, cfg)
    n = field.nodes_per_tile
    step = tile_params(TerrainType.STAIRS, 9).step_height
    top = field.grid[:, n:]
    assert np.allclose(top / step, np.round(top / step))
    assert top.max() > 0


def test_bad_proportions_rejected():
    with pytest.raises(TerrainError):
        build_field(0, (0.5, 0.5, 0.5, 0.0))
    with pytest.raises(TerrainError):
        build_field(0, (1.0, 0.0, 0.0))


def test_height_at_outside_field_raises():
    cfg = _single_family(TerrainType.SLOPE, tile_cols=1, tile_side=2.0, cell_size=0.1)
    field = build_field(0, cfg.proportions, cfg)
    with pytest.raises(TerrainError):
        height_at(field, -0.1, 1.0)
    with pytest.raises(TerrainError):
        height_at(field, 1.0, 2.5)


def _random_field(seed=0):
    rng = np.random.default_rng(seed)
    grid = rng.uniform(-1.0, 1.0, size=(11, 11))
    return HeightField(grid=grid, cell_size=0.1, tile_rows=1, tile_cols=1, tile_side=1.0,
                       tile_types=np.zeros((1, 1), dtype=np.int8), tile_levels=np.zeros((1, 1), dtype=np.int8))


def test_bilinear_matches_nodes_and_cell_centres():
    field = _random_field()
    g = field.grid
    assert height_at(field, 0.3, 0.4) == pytest.approx(g[3, 4])
    expected = (g[3, 4] + g[4, 4] + g[3, 5] + g[4, 5]) / 4
    assert height_at(field, 0.35, 0.45) == pytest.approx(expected)


@settings(max_examples=50, deadline=None)
@given(x=st.floats(0.0, 1.0), y=st.floats(0.0, 1.0))
def test_bilinear_stays_within_cell_corners(x, y):
    field = _random_field()
    i = min(int(x / 0.1), 9)
    j = min(int(y / 0.1), 9)
    corners = field.grid[i:i + 2, j:j + 2]
    h = height_at(field, x, y)
    assert corners.min() - 1e-9 <= h <= corners.max() + 1e-9


def test_flat_normals_point_up():
    field = replace(_random_field(), grid=np.zeros((11, 11)))
    normals = surface_normals(field, np.array([0.5, 0.2]), np.array([0.5, 0.7]))
    assert np.allclose(normals, [[0, 0, 1], [0, 0, 1]])


def test_scan_pattern_and_samples():
    pattern = scan_pattern(3, 1.0)
    assert pattern.shape == (9, 2)
    assert np.allclose(pattern[0], [-0.5, -0.5])
    field = replace(_random_field(), grid=np.full((11, 11), 0.2))
    samples = height_samples(field, np.array([[0.5, 0.5, 0.5]]), np.array([0.3]), 3, 0.4)
    assert samples.shape == (1, 9)
    assert np.allclose(samples, -0.3)


def test_tile_center():
    field = _random_field()
    x, y = tile_center(field, 0, 0)
    assert (float(x), float(y)) == (0.5, 0.5)


def test_dump_field_writes_matrix(tmp_path):
    field = _random_field()
    path = dump_field(field, tmp_path / "terrain.txt")
    loaded = np.loadtxt(path)
    assert loaded.shape == field.grid.shape
    assert np.allclose(loaded, field.grid, atol=1e-5)
