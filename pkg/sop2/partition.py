"""Window assignment and rotated X/Y set partitioning of nonzero voxels."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .config import ModelConfig
from .errors import ConfigurationError, ContractError, DimensionError
from .numkernel import BoolArray, FloatArray, IntArray, Tensor, gather_rows, scatter_rows
from .pointcloud import VoxelGrid

Window = Tuple[int, int]


class Axis(str, Enum):
    X = "x"
    Y = "y"


@dataclass(frozen=True)
class PartitionSchedule:
    """Which window and sort axis every 1-based partition uses.

    Partition j belongs to block (j - 1) // 2; odd j sorts along X, even j along Y.
    """

    window_sizes: Tuple[Window, ...]
    set_size: int = 36

    @classmethod
    def from_config(cls, config: ModelConfig) -> "PartitionSchedule":
        return cls(tuple(config.window_sizes), config.set_size)

    @property
    def blocks(self) -> int:
        return len(self.window_sizes)

    @property
    def num_partitions(self) -> int:
        return 2 * self.blocks

    def block_of(self, partition: int) -> int:
        if not 1 <= partition <= self.num_partitions:
            raise ConfigurationError(f"partition {partition} outside 1..{self.num_partitions}")
        return (partition - 1) // 2

    def axis_for(self, partition: int) -> Axis:
        self.block_of(partition)
        return Axis.X if partition % 2 == 1 else Axis.Y

    def window_for(self, partition: int) -> Window:
        return self.window_sizes[self.block_of(partition)]

    def partitions_of_block(self, block: int) -> Tuple[int, int]:
        return 2 * block + 1, 2 * block + 2

    def __iter__(self) -> Iterator[Tuple[int, Axis, Window]]:
        for j in range(1, self.num_partitions + 1):
            yield j, self.axis_for(j), self.window_for(j)


@dataclass(frozen=True)
class SetPartition:
    index: int  # 1-based partition number
    axis: Axis
    window: Window
    indices: IntArray  # (N, n_s) voxel rows, -1 for padding
    masks: BoolArray  # (N, n_s)
    window_ids: IntArray  # (N,)
    num_voxels: int
    sets: Optional[Tensor] = None  # (N, n_s, C)

    @property
    def num_sets(self) -> int:
        return int(self.indices.shape[0])

    @property
    def set_size(self) -> int:
        return int(self.indices.shape[1])

    @property
    def valid_counts(self) -> IntArray:
        return self.masks.sum(axis=1)

    def gather(self, features: Tensor) -> "SetPartition":
        """Attach the (N, n_s, C) set tensor gathered from voxel ``features``."""
        if features.ndim != 2 or features.shape[0] != self.num_voxels:
            raise DimensionError(f"features {features.shape} for {self.num_voxels} voxels")
        return replace(self, sets=gather_rows(features, self.indices))


def window_assign(coords: IntArray, window: Sequence[int],
                  grid_shape: Optional[Tuple[int, int]] = None) -> IntArray:
    """Row-major id of the window holding each voxel."""
    wx, wy = int(window[0]), int(window[1])
    if wx < 1 or wy < 1:
        raise ConfigurationError(f"window sizes must be >= 1, got {tuple(window)}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if grid_shape is None:
        ny = int(coords[:, 1].max()) + 1 if len(coords) else 1
    else:
        ny = int(grid_shape[1])
    windows_y = math.ceil(ny / wy)
    return (coords[:, 0] // wx) * windows_y + coords[:, 1] // wy


def plan_partition(coords: IntArray, window: Sequence[int], axis: Axis, set_size: int,
                   grid_shape: Optional[Tuple[int, int]] = None, index: int = 1) -> SetPartition:
    """Group voxels into sets: sort inside each window, then cut into chunks of ``set_size``."""
    if set_size < 1:
        raise ConfigurationError("set size must be >= 1")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    num_voxels = len(coords)
    window = (int(window[0]), int(window[1]))
    if num_voxels == 0:
        return SetPartition(
            index, Axis(axis), window,
            np.full((0, set_size), -1, dtype=np.int64),
            np.zeros((0, set_size), dtype=bool),
            np.zeros(0, dtype=np.int64),
            0,
        )

    window_id = window_assign(coords, window, grid_shape)
    primary, secondary = (coords[:, 0], coords[:, 1]) if Axis(axis) is Axis.X else (coords[:, 1], coords[:, 0])
    # np.lexsort sorts by the last key first.
    order = np.lexsort((np.arange(num_voxels), secondary, primary, window_id))

    windows, first, counts = np.unique(window_id[order], return_index=True, return_counts=True)
    rank = np.arange(num_voxels) - np.repeat(first, counts)
    chunks = -(-counts // set_size)
    offsets = np.concatenate([[0], np.cumsum(chunks)[:-1]])
    set_id = np.repeat(offsets, counts) + rank // set_size

    indices = np.full((int(chunks.sum()), set_size), -1, dtype=np.int64)
    indices[set_id, rank % set_size] = order
    return SetPartition(
        index=index,
        axis=Axis(axis),
        window=window,
        indices=indices,
        masks=indices >= 0,
        window_ids=np.repeat(windows, chunks).astype(np.int64),
        num_voxels=num_voxels,
    )


def set_partition(vg: VoxelGrid, window: Sequence[int], axis: Axis, set_size: int,
                  index: int = 1, features: Optional[Tensor] = None) -> SetPartition:
    features = features if features is not None else vg.features
    if features is None:
        raise ContractError("voxel grid carries no features; encode it first")
    plan = plan_partition(vg.coords, window, axis, set_size, vg.grid_shape, index)
    return plan.gather(features)


def scatter_back(sp: SetPartition, set_outputs: Tensor) -> Tensor:
    """Inverse of ``gather``: write every valid (set, slot) row back to its voxel row."""
    if set_outputs.ndim != 3 or set_outputs.shape[:2] != sp.indices.shape:
        raise DimensionError(f"set outputs {set_outputs.shape} for partition of shape {sp.indices.shape}")
    return scatter_rows(set_outputs, sp.indices, sp.masks, sp.num_voxels)


def set_means(sp: SetPartition) -> FloatArray:
    """Masked mean feature of every set, (N, C)."""
    if sp.sets is None:
        raise ContractError("partition has no gathered sets")
    counts = np.maximum(sp.valid_counts, 1)[:, None]
    return (sp.sets.data * sp.masks[..., None]).sum(axis=1) / counts
