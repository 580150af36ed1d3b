import math

import numpy as np
import pytest
from scipy import stats

from riconvnet.exceptions import (
    CoincidentPointsException,
    EmptyPointSetException,
    GeometryException,
    NonOrthogonalRotationException,
)
from riconvnet.geom import (
    PointCloud,
    RigidTransform,
    apply_rigid,
    centroid,
    normalize_unit_sphere,
    rotation_about_z,
    sample_rotation,
    sample_rotation_so3,
    sample_rotation_z,
)
from riconvnet.helpers import make_rng
from tests.conftest import SEED

# Rotation samplers are checked with p-values far below any plausible fluke
P_VALUE = 1e-4
N_ROTATIONS = 10_000

# =================================
#           Point clouds
# =================================


def test_point_cloud_coerces_points():
    cloud = PointCloud(points=[[0, 0, 0], [1, 2, 3]])
    assert cloud.points.dtype == np.float64
    assert len(cloud) == 2


@pytest.mark.parametrize(
    "points", [np.zeros((0, 3)), np.zeros((4, 2)), [[0.0, np.nan, 0.0]]]
)
def test_point_cloud_rejects_bad_points(points):
    with pytest.raises(GeometryException):
        PointCloud(points=points)


def test_point_cloud_empty_is_specific():
    with pytest.raises(EmptyPointSetException):
        PointCloud(points=np.zeros((0, 3)))


def test_point_cloud_label_count():
    with pytest.raises(GeometryException):
        PointCloud(points=np.zeros((3, 3)), part_labels=[0, 1])


def test_permuted_keeps_labels(rng):
    cloud = PointCloud(points=rng.standard_normal((5, 3)), part_labels=[0, 1, 2, 3, 4])
    permutation = np.array([4, 2, 0, 1, 3])
    permuted = cloud.permuted(permutation)
    assert np.array_equal(permuted.points, cloud.points[permutation])
    assert list(permuted.part_labels) == [4, 2, 0, 1, 3]


# =================================
#         Rigid transforms
# =================================


def test_apply_rigid_identity(small_cloud):
    moved = apply_rigid(small_cloud, RigidTransform.identity())
    assert np.array_equal(moved.points, small_cloud.points)


@pytest.mark.parametrize(
    "rotation",
    [
        np.diag([1.0, 1.0, -1.0]),
        np.diag([2.0, 1.0, 1.0]),
        np.ones((3, 3)),
        np.eye(2),
    ],
)
def test_rigid_transform_rejects_non_rotations(rotation):
    with pytest.raises(NonOrthogonalRotationException):
        RigidTransform(rotation=rotation)


def test_compose_and_inverse(small_cloud):
    rng = make_rng(SEED, "compose")
    first = RigidTransform(sample_rotation_so3(rng).rotation, rng.standard_normal(3))
    second = RigidTransform(sample_rotation_so3(rng).rotation, rng.standard_normal(3))
    composed = second.compose(first).apply(small_cloud.points)
    sequential = second.apply(first.apply(small_cloud.points))
    assert np.allclose(composed, sequential, atol=1e-12)
    back = first.inverse().apply(first.apply(small_cloud.points))
    assert np.allclose(back, small_cloud.points, atol=1e-12)


def test_rigid_transforms_preserve_distances(small_cloud):
    rng = make_rng(SEED, "distances")
    transform = RigidTransform(
        sample_rotation_so3(rng).rotation, 10 * rng.standard_normal(3)
    )
    before = np.linalg.norm(small_cloud.points[:, None] - small_cloud.points, axis=-1)
    moved = transform.apply(small_cloud.points)
    after = np.linalg.norm(moved[:, None] - moved, axis=-1)
    assert np.allclose(before, after, atol=1e-10)


# =================================
#        Rotation samplers
# =================================


@pytest.mark.parametrize("kind", ["z", "so3", "none"])
def test_sampled_rotations_are_proper(kind):
    rng = make_rng(SEED, kind)
    for _ in range(20):
        rotation = sample_rotation(kind, rng).rotation
        assert np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-12)
        assert math.isclose(np.linalg.det(rotation), 1.0, abs_tol=1e-12)


def test_z_rotation_keeps_gravity_axis():
    rng = make_rng(SEED, "gravity")
    for _ in range(10):
        rotation = sample_rotation("z", rng).rotation
        assert np.allclose(rotation[:, 2], [0.0, 0.0, 1.0])
        assert np.allclose(rotation[2, :], [0.0, 0.0, 1.0])


def test_unknown_rotation_kind():
    with pytest.raises(GeometryException):
        sample_rotation("xy", np.random.default_rng(0))


def test_rotation_about_z_quarter_turn():
    assert np.allclose(rotation_about_z(math.pi / 2) @ [1.0, 0.0, 0.0], [0, 1, 0])


def test_z_rotation_angles_are_uniform():
    rng = make_rng(SEED, "z-angles")
    rotations = [sample_rotation_z(rng).rotation for _ in range(N_ROTATIONS)]
    angles = np.array([math.atan2(r[1, 0], r[0, 0]) for r in rotations])
    turns = np.mod(angles, 2 * math.pi) / (2 * math.pi)
    assert stats.kstest(turns, "uniform").pvalue > P_VALUE


def test_so3_rotations_fill_octants():
    # R (1, 0, 0) is the first column. Fixed seed, the bound is per octant
    rng = make_rng(0, "octants")
    axes = np.array(
        [sample_rotation_so3(rng).rotation[:, 0] for _ in range(N_ROTATIONS)]
    )
    octants = (axes > 0) @ np.array([1, 2, 4])
    counts = np.bincount(octants, minlength=8)
    expected = N_ROTATIONS / 8
    sigma = math.sqrt(N_ROTATIONS * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - expected) <= 3 * sigma)


def test_so3_octants_chi_square():
    rng = make_rng(SEED, "octants")
    axes = np.array(
        [sample_rotation_so3(rng).rotation[:, 0] for _ in range(N_ROTATIONS)]
    )
    counts = np.bincount((axes > 0) @ np.array([1, 2, 4]), minlength=8)
    assert stats.chisquare(counts).pvalue > P_VALUE


@pytest.mark.parametrize("kind", ["z", "so3"])
def test_rotations_follow_the_seed(kind):
    first = sample_rotation(kind, make_rng(5, "rotation")).rotation
    again = sample_rotation(kind, make_rng(5, "rotation")).rotation
    other = sample_rotation(kind, make_rng(6, "rotation")).rotation
    assert np.array_equal(first, again)
    assert not np.allclose(first, other)


# =================================
#     Centroid and normalization
# =================================


def test_centroid_of_nothing():
    with pytest.raises(EmptyPointSetException):
        centroid(np.zeros((0, 3)))


def test_normalize_unit_sphere(small_cloud):
    normalized = normalize_unit_sphere(small_cloud).points
    assert np.allclose(normalized.mean(axis=0), 0.0, atol=1e-12)
    assert math.isclose(np.linalg.norm(normalized, axis=1).max(), 1.0, rel_tol=1e-12)


def test_normalize_is_idempotent(small_cloud):
    once = normalize_unit_sphere(small_cloud)
    twice = normalize_unit_sphere(once)
    assert np.allclose(once.points, twice.points, atol=1e-12)


def test_normalize_coincident_points():
    with pytest.raises(CoincidentPointsException):
        normalize_unit_sphere(PointCloud(points=np.ones((4, 3))))


def test_normalize_single_point():
    with pytest.raises(CoincidentPointsException):
        normalize_unit_sphere(PointCloud(points=np.zeros((1, 3))))
