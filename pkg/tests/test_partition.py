import numpy as np
import pytest

from sop2.config import ModelConfig
from sop2.errors import ConfigurationError, ContractError, DimensionError
from sop2.numkernel import Tensor
from sop2.partition import (
    Axis,
    PartitionSchedule,
    plan_partition,
    scatter_back,
    set_means,
    set_partition,
    window_assign,
)
from sop2.pointcloud import PointCloud, voxelize


def random_coords(rng, count, grid=(48, 48)):
    cells = rng.choice(grid[0] * grid[1], size=count, replace=False)
    return np.column_stack([cells // grid[1], cells % grid[1]])


def test_schedule_alternates_axes_and_follows_block_windows():
    schedule = PartitionSchedule.from_config(ModelConfig())
    assert schedule.num_partitions == 8
    assert [schedule.axis_for(j) for j in (1, 2, 7, 8)] == [Axis.X, Axis.Y, Axis.X, Axis.Y]
    assert schedule.window_for(3) == (24, 24)
    assert schedule.partitions_of_block(2) == (5, 6)
    with pytest.raises(ConfigurationError):
        schedule.block_of(9)


def test_window_assign_is_row_major():
    coords = np.array([[0, 0], [11, 11], [12, 0], [0, 12], [23, 23]])
    ids = window_assign(coords, (12, 12), grid_shape=(24, 24))
    np.testing.assert_array_equal(ids, [0, 0, 2, 1, 3])


def test_window_assign_rejects_empty_window():
    with pytest.raises(ConfigurationError):
        window_assign(np.zeros((1, 2), dtype=np.int64), (0, 12))


@pytest.mark.slow
def test_every_partition_covers_each_voxel_exactly_once(rng):
    for _ in range(500):
        count = int(rng.integers(1, 501))
        coords = random_coords(rng, count)
        for window in ((12, 12), (24, 24)):
            for axis in (Axis.X, Axis.Y):
                sp = plan_partition(coords, window, axis, 36, grid_shape=(48, 48))
                valid = sp.indices[sp.masks]
                assert sorted(valid.tolist()) == list(range(count))
                assert np.all(sp.indices[~sp.masks] == -1)


def test_sets_stay_inside_one_window(rng):
    coords = random_coords(rng, 300)
    sp = plan_partition(coords, (12, 12), Axis.X, 36, grid_shape=(48, 48))
    ids = window_assign(coords, (12, 12), (48, 48))
    for i in range(sp.num_sets):
        members = sp.indices[i][sp.masks[i]]
        assert set(ids[members].tolist()) == {sp.window_ids[i]}


def test_only_the_last_set_of_a_window_is_short(rng):
    coords = random_coords(rng, 200)
    sp = plan_partition(coords, (24, 24), Axis.Y, 10, grid_shape=(48, 48))
    counts = sp.valid_counts
    for window in np.unique(sp.window_ids):
        rows = np.flatnonzero(sp.window_ids == window)
        assert np.all(counts[rows[:-1]] == 10)
        assert 1 <= counts[rows[-1]] <= 10


@pytest.mark.parametrize("axis,primary", [(Axis.X, 0), (Axis.Y, 1)])
def test_voxels_are_sorted_along_the_partition_axis(rng, axis, primary):
    coords = random_coords(rng, 100, grid=(12, 12))
    sp = plan_partition(coords, (12, 12), axis, 100, grid_shape=(12, 12))
    ordered = coords[sp.indices[0][sp.masks[0]]]
    keys = list(zip(ordered[:, primary], ordered[:, 1 - primary]))
    assert keys == sorted(keys)


def test_empty_grid_gives_no_sets():
    sp = plan_partition(np.zeros((0, 2), dtype=np.int64), (12, 12), Axis.X, 36)
    assert sp.num_sets == 0 and sp.set_size == 36


def test_gather_then_scatter_restores_features(rng):
    coords = random_coords(rng, 50)
    features = Tensor(rng.normal(size=(50, 4)))
    sp = plan_partition(coords, (12, 12), Axis.Y, 7, grid_shape=(48, 48)).gather(features)
    assert sp.sets.shape == (sp.num_sets, 7, 4)
    np.testing.assert_array_equal(scatter_back(sp, sp.sets).data, features.data)


def test_gather_checks_row_count(rng):
    sp = plan_partition(random_coords(rng, 5), (12, 12), Axis.X, 4)
    with pytest.raises(DimensionError):
        sp.gather(Tensor(np.zeros((4, 2))))


def test_set_partition_needs_features():
    cloud = PointCloud(np.array([[0.1, 0.1, 0.0, 0.5]]), (0.0, 0.0, -2.0, 7.68, 7.68, 4.0))
    vg = voxelize(cloud, (0.32, 0.32, 6.0))
    with pytest.raises(ContractError):
        set_partition(vg, (12, 12), Axis.X, 36)
    sp = set_partition(vg, (12, 12), Axis.X, 36, index=3, features=Tensor(np.ones((1, 2))))
    assert sp.index == 3 and sp.num_sets == 1


def test_set_means_ignore_padding():
    coords = np.array([[0, 0], [0, 1], [0, 2]])
    features = Tensor(np.array([[1.0], [2.0], [6.0]]))
    sp = plan_partition(coords, (12, 12), Axis.X, 2, grid_shape=(12, 12)).gather(features)
    np.testing.assert_allclose(set_means(sp), [[1.5], [6.0]])
