"""
Terrain Module

Builds the tiled training heightfield and answers elevation queries.

LAYOUT:
- tile_rows x tile_cols tiles, each tile_side x tile_side metres
- every row holds one terrain family; columns run from level 0 (left) to level 9
- level-0 stairs and obstacle tiles are flat; level-0 rough slopes carry only their noise
- families are assigned to rows in the configured proportions
  (slopes, rough slopes, stairs, discrete obstacles)

Grid node (i, j) sits at world (x, y) = (i * cell_size, j * cell_size); tile
(r, c) covers x in [r * side, (r + 1) * side] and y in [c * side, (c + 1) * side].
"""

import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from src.utils.config import TerrainConfig

logger = logging.getLogger(__name__)

MAX_LEVEL = 9


class TerrainError(ValueError):
    """Raised for invalid terrain parameters or out-of-field queries."""
    pass


class TerrainType(IntEnum):
    SLOPE = 0
    ROUGH_SLOPE = 1
    STAIRS = 2
    DISCRETE_OBSTACLES = 3

    @property
    def is_open(self) -> bool:
        """Slopes and rough slopes use the widened command ranges."""
        return self in (TerrainType.SLOPE, TerrainType.ROUGH_SLOPE)


@dataclass(frozen=True)
class TileParams:
    terrain_type: TerrainType
    level: int
    inclination_deg: float
    noise_amplitude: float
    step_height: float
    step_width_range: Tuple[float, float]
    obstacle_height: float


@dataclass(frozen=True)
class HeightField:
    grid: np.ndarray
    cell_size: float
    tile_rows: int
    tile_cols: int
    tile_side: float
    tile_types: np.ndarray
    tile_levels: np.ndarray

    @property
    def size_x(self) -> float:
        return self.tile_rows * self.tile_side

    @property
    def size_y(self) -> float:
        return self.tile_cols * self.tile_side

    @property
    def nodes_per_tile(self) -> int:
        return int(round(self.tile_side / self.cell_size))

    def row_type(self, row: int) -> TerrainType:
        return TerrainType(int(self.tile_types[row, 0]))

    def rows_of_type(self, terrain_type: TerrainType) -> List[int]:
        return [r for r in range(self.tile_rows) if self.tile_types[r, 0] == terrain_type]

    def column_for_level(self, level: int) -> int:
        if self.tile_cols == 1:
            return 0
        return int(round(level * (self.tile_cols - 1) / MAX_LEVEL))


def level_for_column(col: int, tile_cols: int) -> int:
    if tile_cols == 1:
        return 0
    return int(round(col * MAX_LEVEL / (tile_cols - 1)))


def tile_params(terrain_type: TerrainType, level: int,
                stair_width_range: Tuple[float, float] = (0.20, 0.40)) -> TileParams:
    """
    Geometric parameters of one tile.

    Slopes incline 40 * level/9 degrees; rough slopes add uniform noise of
    (1 + 7 * level/9) cm; stairs rise (5 + 18 * level/9) cm per step; discrete
    obstacles stand (5 + 10 * level/9) cm above or below ground.

    Raises:
        TerrainError: If level is outside 0..9
    """
    if isinstance(level, bool) or not isinstance(level, (int, np.integer)) or not 0 <= level <= MAX_LEVEL:
        raise TerrainError(f"terrain level must be an integer in 0..{MAX_LEVEL}, got {level}")
    terrain_type = TerrainType(terrain_type)
    frac = level / MAX_LEVEL
    inclination = 40.0 * frac if terrain_type.is_open else 0.0
    noise = (1.0 + 7.0 * frac) / 100.0 if terrain_type == TerrainType.ROUGH_SLOPE else 0.0
    step = (5.0 + 18.0 * frac) / 100.0 if terrain_type == TerrainType.STAIRS else 0.0
    obstacle = (5.0 + 10.0 * frac) / 100.0 if terrain_type == TerrainType.DISCRETE_OBSTACLES else 0.0
    return TileParams(
        terrain_type=terrain_type,
        level=int(level),
        inclination_deg=inclination,
        noise_amplitude=noise,
        step_height=step,
        step_width_range=tuple(stair_width_range),
        obstacle_height=obstacle,
    )


def rows_per_type(proportions: Sequence[float], tile_rows: int) -> List[int]:
    """Largest-remainder split of tile_rows among the four families."""
    quotas = [p * tile_rows for p in proportions]
    counts = [int(math.floor(q + 1e-9)) for q in quotas]
    remainders = sorted(range(len(quotas)), key=lambda i: counts[i] - quotas[i])
    for i in remainders[: tile_rows - sum(counts)]:
        counts[i] += 1
    return counts


def _pyramid_distance(n: int, cell: float, side: float, platform: float) -> np.ndarray:
    """Distance to the nearest tile edge, capped at the central platform rim."""
    coords = np.arange(n + 1) * cell
    edge = np.minimum(coords, side - coords)
    dist = np.minimum(edge[:, None], edge[None, :])
    return np.minimum(dist, max((side - platform) / 2.0, 0.0))


def _build_tile(params: TileParams, cfg: TerrainConfig, n: int,
                rng: np.random.Generator) -> np.ndarray:
    cell, side = cfg.cell_size, cfg.tile_side
    dist = _pyramid_distance(n, cell, side, cfg.platform_size)
    kind = params.terrain_type

    if kind.is_open:
        tile = math.tan(math.radians(params.inclination_deg)) * dist
        if kind == TerrainType.ROUGH_SLOPE:
            amp = params.noise_amplitude
            tile = tile + rng.uniform(-amp, amp, size=tile.shape)
        return tile

    # level-0 stairs and obstacle tiles are flat warm-up ground
    if params.level == 0:
        return np.zeros((n + 1, n + 1))

    if kind == TerrainType.STAIRS:
        width = rng.uniform(*params.step_width_range)
        steps = np.floor(dist / width + 1e-9)
        return steps * params.step_height

    tile = np.zeros((n + 1, n + 1))
    lo, hi = cfg.obstacle_size_range
    for _ in range(cfg.num_obstacles):
        sx, sy = rng.uniform(lo, hi, size=2)
        cx, cy = rng.uniform(0.0, side, size=2)
        height = params.obstacle_height * rng.choice((-1.0, 1.0))
        i0, i1 = (int(round(v / cell)) for v in (cx - sx / 2, cx + sx / 2))
        j0, j1 = (int(round(v / cell)) for v in (cy - sy / 2, cy + sy / 2))
        tile[max(i0, 0):max(i1, 0) + 1, max(j0, 0):max(j1, 0) + 1] = height
    coords = np.arange(n + 1) * cell
    inner = np.abs(coords - side / 2) < cfg.platform_size / 2
    tile[np.ix_(inner, inner)] = 0.0
    return tile


def build_field(seed: int, proportions: Sequence[float] = None,
                cfg: TerrainConfig = None) -> HeightField:
    """
    Generate the tiled heightfield.

    Args:
        seed: Generator seed; the same seed gives a bit-identical grid
        proportions: Share of rows per family (slope, rough, stairs, obstacles)
        cfg: Tile grid geometry; defaults to the 20 x 10 layout of 10 m tiles

    Returns:
        HeightField with per-tile family and level metadata

    Raises:
        TerrainError: If proportions are not four non-negative numbers summing to 1
    """
    cfg = cfg or TerrainConfig()
    proportions = tuple(cfg.proportions if proportions is None else proportions)
    if len(proportions) != 4 or any(p < 0 for p in proportions):
        raise TerrainError(f"proportions must be four non-negative numbers, got {proportions}")
    if abs(sum(proportions) - 1.0) > 1e-9:
        raise TerrainError(f"proportions must sum to 1, got {sum(proportions)!r}")

    n = int(round(cfg.tile_side / cfg.cell_size))
    rng = np.random.default_rng(seed)
    counts = rows_per_type(proportions, cfg.tile_rows)
    row_types = np.repeat(np.arange(4), counts)

    grid = np.zeros((cfg.tile_rows * n + 1, cfg.tile_cols * n + 1))
    tile_types = np.repeat(row_types[:, None], cfg.tile_cols, axis=1).astype(np.int8)
    tile_levels = np.zeros((cfg.tile_rows, cfg.tile_cols), dtype=np.int8)

    for r in range(cfg.tile_rows):
        for c in range(cfg.tile_cols):
            level = level_for_column(c, cfg.tile_cols)
            tile_levels[r, c] = level
            params = tile_params(TerrainType(int(row_types[r])), level, cfg.stair_width_range)
            grid[r * n:(r + 1) * n + 1, c * n:(c + 1) * n + 1] = _build_tile(params, cfg, n, rng)

    logger.info(f"Built {cfg.tile_rows}x{cfg.tile_cols} terrain (rows per family {counts})")
    return HeightField(
        grid=grid,
        cell_size=cfg.cell_size,
        tile_rows=cfg.tile_rows,
        tile_cols=cfg.tile_cols,
        tile_side=cfg.tile_side,
        tile_types=tile_types,
        tile_levels=tile_levels,
    )


def sample_heights(field: HeightField, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear elevation lookup; points outside the field clamp to the edge."""
    nx, ny = field.grid.shape
    fx = np.clip(np.asarray(x, dtype=np.float64) / field.cell_size, 0.0, nx - 1)
    fy = np.clip(np.asarray(y, dtype=np.float64) / field.cell_size, 0.0, ny - 1)
    i0 = np.minimum(np.floor(fx).astype(np.int64), nx - 2)
    j0 = np.minimum(np.floor(fy).astype(np.int64), ny - 2)
    tx = fx - i0
    ty = fy - j0
    g = field.grid
    return ((1 - tx) * (1 - ty) * g[i0, j0] + tx * (1 - ty) * g[i0 + 1, j0]
            + (1 - tx) * ty * g[i0, j0 + 1] + tx * ty * g[i0 + 1, j0 + 1])


def height_at(field: HeightField, x: float, y: float) -> float:
    """
    Elevation at (x, y) by bilinear interpolation of the four surrounding nodes.

    Raises:
        TerrainError: If (x, y) lies outside the field
    """
    if not (0.0 <= x <= field.size_x and 0.0 <= y <= field.size_y):
        raise TerrainError(f"query ({x}, {y}) outside field [0, {field.size_x}] x [0, {field.size_y}]")
    return float(sample_heights(field, np.array([x]), np.array([y]))[0])


def surface_normals(field: HeightField, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Unit upward normals from central differences of the interpolated surface."""
    h = field.cell_size / 2
    dhdx = (sample_heights(field, x + h, y) - sample_heights(field, x - h, y)) / (2 * h)
    dhdy = (sample_heights(field, x, y + h) - sample_heights(field, x, y - h)) / (2 * h)
    normals = np.stack([-dhdx, -dhdy, np.ones_like(dhdx)], axis=-1)
    return normals / np.linalg.norm(normals, axis=-1, keepdims=True)


def scan_pattern(points: int = 11, span: float = 1.0) -> np.ndarray:
    """Body-frame (x, y) offsets of the critic's height scan, shape (points**2, 2)."""
    ticks = np.linspace(-span / 2, span / 2, points) if points > 1 else np.zeros(1)
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def height_samples(field: HeightField, base_pos: np.ndarray, base_yaw: np.ndarray,
                   points: int = 11, span: float = 1.0) -> np.ndarray:
    """
    Terrain elevations around each robot relative to its base height.

    Args:
        base_pos: (N, 3) world base positions
        base_yaw: (N,) base yaw angles; the scan pattern turns with the body

    Returns:
        (N, points**2) array of terrain height minus base height
    """
    pattern = scan_pattern(points, span)
    cos, sin = np.cos(base_yaw)[:, None], np.sin(base_yaw)[:, None]
    wx = base_pos[:, 0:1] + cos * pattern[None, :, 0] - sin * pattern[None, :, 1]
    wy = base_pos[:, 1:2] + sin * pattern[None, :, 0] + cos * pattern[None, :, 1]
    return sample_heights(field, wx, wy) - base_pos[:, 2:3]


def tile_center(field: HeightField, row: Union[int, np.ndarray],
                col: Union[int, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    return ((np.asarray(row) + 0.5) * field.tile_side,
            (np.asarray(col) + 0.5) * field.tile_side)


def dump_field(field: HeightField, path: Union[str, Path]) -> Path:
    """Write the elevation grid as a plain-text matrix (one grid row per line)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (f"cell_size={field.cell_size} tile_rows={field.tile_rows} "
              f"tile_cols={field.tile_cols} tile_side={field.tile_side}")
    np.savetxt(path, field.grid, fmt="%.5f", header=header)
    logger.info(f"Wrote heightfield {field.grid.shape} to {path}")
    return path
