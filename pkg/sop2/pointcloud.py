"""Synthetic LiDAR-like scenes, pillar voxelization and the voxel feature encoder."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import DomainParams
from .errors import ConfigurationError, ContractError, DimensionError, GenerationError
from .layers import Linear, Module
from .numkernel import FloatArray, IntArray, Tensor, masked_max, relu

logger = logging.getLogger(__name__)

Extent = Tuple[float, float, float, float, float, float]
GridSize = Tuple[float, float, float]

# (length, width, height) in metres for car, pedestrian, cyclist
CLASS_SIZES = ((3.9, 1.6, 1.56), (0.8, 0.6, 1.73), (1.76, 0.6, 1.73))
NUM_POINT_FEATURES = 7


@dataclass(frozen=True)
class PointCloud:
    points: FloatArray  # (n, 4): x, y, z, intensity
    extent: Extent

    def __post_init__(self) -> None:
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise DimensionError(f"points must be (n, 4), got {self.points.shape}")
        lo, hi = np.asarray(self.extent[:3]), np.asarray(self.extent[3:])
        xyz = self.points[:, :3]
        if np.any(xyz < lo) or np.any(xyz > hi):
            raise ContractError("point cloud has points outside its extent")

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class SceneLabel:
    boxes: FloatArray  # (b, 6): cx, cy, length, width, yaw, class id

    def __post_init__(self) -> None:
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 6:
            raise DimensionError(f"boxes must be (b, 6), got {self.boxes.shape}")
        if np.any(self.boxes[:, 2:4] <= 0):
            raise ContractError("box length and width must be positive")
        if np.any(np.abs(self.boxes[:, 4]) > math.pi + 1e-9):
            raise ContractError("box yaw outside [-pi, pi]")
        if not np.all(np.isin(self.boxes[:, 5], (0, 1, 2))):
            raise ContractError("box class id must be 0, 1 or 2")

    @property
    def class_ids(self) -> IntArray:
        return self.boxes[:, 5].astype(np.int64)

    def __len__(self) -> int:
        return int(self.boxes.shape[0])


@dataclass(frozen=True)
class Scene:
    cloud: PointCloud
    label: SceneLabel


def gen_scene(seed: int, params: DomainParams, extent: Extent) -> Tuple[PointCloud, SceneLabel]:
    """Ground points everywhere plus denser point clusters inside labelled boxes.

    Each kind of draw has its own random stream, so a denser scene with the
    same seed contains every point of a sparser one.
    """
    xmin, ymin, zmin, xmax, ymax, zmax = extent
    if xmax <= xmin or ymax <= ymin or zmax <= zmin:
        raise GenerationError(f"empty extent {extent}")

    box_rng = np.random.default_rng([seed, 0])
    boxes = []
    for _ in range(params.boxes_per_scene):
        cls = int(box_rng.choice(3, p=np.asarray(params.class_mix)))
        length, width, height = (s * params.box_scale for s in CLASS_SIZES[cls])
        yaw = float(box_rng.uniform(-math.pi, math.pi))
        margin_x = min(0.5 * length, 0.5 * (xmax - xmin))
        margin_y = min(0.5 * length, 0.5 * (ymax - ymin))
        cx = float(box_rng.uniform(xmin + margin_x, xmax - margin_x))
        cy = float(box_rng.uniform(ymin + margin_y, ymax - margin_y))
        if params.density * params.box_density_boost * length * width < 1.0:
            raise GenerationError(
                f"density {params.density} too low to place a class-{cls} box"
            )
        boxes.append((cx, cy, length, width, yaw, cls, height))

    ground_rng = np.random.default_rng([seed, 1])
    area = (xmax - xmin) * (ymax - ymin)
    n_ground = int(round(params.density * area))
    u = ground_rng.random((n_ground, 4))
    ground = np.column_stack([
        xmin + u[:, 0] * (xmax - xmin),
        ymin + u[:, 1] * (ymax - ymin),
        (u[:, 2] - 0.5) * 0.1,
        0.1 + 0.2 * u[:, 3],
    ])

    chunks = [ground]
    for b, (cx, cy, length, width, yaw, _, height) in enumerate(boxes):
        rng = np.random.default_rng([seed, 2, b])
        k = int(round(params.density * params.box_density_boost * length * width))
        u = rng.random((k, 4))
        lx, ly = (u[:, 0] - 0.5) * length, (u[:, 1] - 0.5) * width
        c, s = math.cos(yaw), math.sin(yaw)
        chunks.append(np.column_stack([
            cx + c * lx - s * ly,
            cy + s * lx + c * ly,
            u[:, 2] * height,
            0.5 + 0.4 * u[:, 3],
        ]))

    points = np.concatenate(chunks, axis=0)
    points[:, 2] += params.sensor_height
    points[:, 3] = np.clip(points[:, 3] + params.intensity_bias, 0.0, 1.0)
    inside = (
        (points[:, 0] >= xmin) & (points[:, 0] < xmax)
        & (points[:, 1] >= ymin) & (points[:, 1] < ymax)
        & (points[:, 2] >= zmin) & (points[:, 2] <= zmax)
    )
    label = np.array([b[:6] for b in boxes], dtype=np.float64).reshape(-1, 6)
    return PointCloud(points[inside], tuple(extent)), SceneLabel(label)  # type: ignore[arg-type]


def generate_scenes(seed: int, params: DomainParams, extent: Extent, count: int,
                    offset: int = 0) -> List[Scene]:
    """``count`` scenes with per-scene seeds derived from ``seed``."""
    scenes = []
    for i in range(count):
        cloud, label = gen_scene(seed * 100_003 + offset + i, params, extent)
        scenes.append(Scene(cloud, label))
    logger.debug("generated %d scenes (seed=%d, offset=%d)", count, seed, offset)
    return scenes


@dataclass(frozen=True)
class VoxelGrid:
    grid_size: GridSize
    extent: Extent
    coords: IntArray  # (V, 2): ix, iy
    points: FloatArray  # (V, P, 4), zero padded
    num_points: IntArray  # (V,) points kept per voxel
    point_counts: IntArray  # (V,) points that fell in the voxel before truncation
    features: Optional[Tensor] = None

    @property
    def num_voxels(self) -> int:
        return int(self.coords.shape[0])

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return _grid_shape(self.extent, self.grid_size)

    @property
    def point_mask(self) -> np.ndarray:
        return np.arange(self.points.shape[1])[None, :] < self.num_points[:, None]

    def with_features(self, features: Tensor) -> "VoxelGrid":
        if features.shape[0] != self.num_voxels:
            raise DimensionError(f"{features.shape[0]} feature rows for {self.num_voxels} voxels")
        return replace(self, features=features)


def _grid_shape(extent: Extent, grid: GridSize) -> Tuple[int, int]:
    return (
        max(1, int(math.ceil((extent[3] - extent[0]) / grid[0] - 1e-9))),
        max(1, int(math.ceil((extent[4] - extent[1]) / grid[1] - 1e-9))),
    )


def voxelize(pc: PointCloud, grid: Sequence[float], max_points_per_voxel: int = 32) -> VoxelGrid:
    """Assign points to pillars; keep the first ``max_points_per_voxel`` of each in input order."""
    dx, dy, dz = (float(g) for g in grid)
    if min(dx, dy, dz) <= 0:
        raise ConfigurationError(f"grid size must be positive, got {tuple(grid)}")
    if max_points_per_voxel < 1:
        raise ConfigurationError("max_points_per_voxel must be >= 1")
    nx, ny = _grid_shape(pc.extent, (dx, dy, dz))
    pts = pc.points
    ix = np.clip(np.floor((pts[:, 0] - pc.extent[0]) / dx).astype(np.int64), 0, nx - 1)
    iy = np.clip(np.floor((pts[:, 1] - pc.extent[1]) / dy).astype(np.int64), 0, ny - 1)
    cell = ix * ny + iy

    order = np.argsort(cell, kind="stable")
    cells, first, counts = np.unique(cell[order], return_index=True, return_counts=True)
    rank = np.arange(order.size) - np.repeat(first, counts)
    voxel = np.repeat(np.arange(cells.size), counts)
    keep = rank < max_points_per_voxel

    buffer = np.zeros((cells.size, max_points_per_voxel, 4))
    buffer[voxel[keep], rank[keep]] = pts[order][keep]
    coords = np.column_stack([cells // ny, cells % ny]).astype(np.int64).reshape(-1, 2)
    return VoxelGrid(
        grid_size=(dx, dy, dz),
        extent=pc.extent,
        coords=coords,
        points=buffer,
        num_points=np.minimum(counts, max_points_per_voxel).astype(np.int64),
        point_counts=counts.astype(np.int64),
    )


def point_features(vg: VoxelGrid) -> FloatArray:
    """Per-point inputs: x, y, z, intensity, offsets to the pillar centre, height."""
    centers = np.column_stack([
        vg.extent[0] + (vg.coords[:, 0] + 0.5) * vg.grid_size[0],
        vg.extent[1] + (vg.coords[:, 1] + 0.5) * vg.grid_size[1],
    ])
    pts = vg.points
    feats = np.concatenate([
        pts,
        pts[:, :, :2] - centers[:, None, :],
        pts[:, :, 2:3],
    ], axis=-1)
    return feats * vg.point_mask[..., None]


class VoxelFeatureEncoder(Module):
    def __init__(self, channels: int, rng: np.random.Generator, layers: int = 1):
        widths = [NUM_POINT_FEATURES] + [channels] * layers
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def channels(self) -> int:
        return self.layers[-1].out_features

    def __call__(self, vg: VoxelGrid) -> Tensor:
        return vfe_forward(vg, self)


def vfe_forward(vg: VoxelGrid, weights: VoxelFeatureEncoder) -> Tensor:
    """Encode every point with linear+ReLU layers, then max-pool per voxel."""
    if vg.num_voxels == 0:
        return Tensor(np.zeros((0, weights.channels)))
    h = Tensor(point_features(vg))
    for layer in weights.layers:
        h = relu(layer(h))
    return masked_max(h, vg.point_mask)
