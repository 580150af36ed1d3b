"""
Core 3D types, rigid transforms and the rotation samplers used by the
z/z, SO3/SO3 and z/SO3 regimes.

Points are float64 numpy arrays: a single point is shaped (3,), a cloud (N, 3).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from riconvnet.constants import ROTATION_TOLERANCE
from riconvnet.exceptions import (
    CoincidentPointsException,
    EmptyPointSetException,
    GeometryException,
    NonOrthogonalRotationException,
)

logger = logging.getLogger("riconvnet")

Point3 = NDArray[np.float64]
Points = NDArray[np.float64]


def as_points(points: Union[Points, Sequence[Sequence[float]]]) -> Points:
    array = np.asarray(points, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2 or array.shape[1] != 3:
        raise GeometryException(f"Expected points shaped (N, 3), got {array.shape}.")
    return array


# Point cloud
# \___________


@dataclass(frozen=True)
class PointCloud:
    points: Points
    part_labels: Optional[NDArray[np.int64]] = None
    class_label: Optional[int] = None

    def __post_init__(self):
        points = as_points(self.points)
        if len(points) == 0:
            raise EmptyPointSetException("A point cloud holds at least one point.")
        if not np.all(np.isfinite(points)):
            raise GeometryException("Point coordinates must be finite.")
        object.__setattr__(self, "points", points)
        if self.part_labels is not None:
            labels = np.asarray(self.part_labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(points):
                raise GeometryException(
                    f"Got {len(labels)} part labels for {len(points)} points."
                )
            object.__setattr__(self, "part_labels", labels)

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: Points) -> PointCloud:
        return PointCloud(
            points=points, part_labels=self.part_labels, class_label=self.class_label
        )

    def permuted(self, permutation: NDArray[np.int64]) -> PointCloud:
        labels = None if self.part_labels is None else self.part_labels[permutation]
        return PointCloud(
            points=self.points[permutation],
            part_labels=labels,
            class_label=self.class_label,
        )


# Rigid transforms
# \________________


def check_rotation(rotation: NDArray[np.float64]) -> None:
    if rotation.shape != (3, 3):
        raise NonOrthogonalRotationException(
            f"Rotation should be a 3x3 matrix, got {rotation.shape}."
        )
    orthogonality = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
    determinant = np.linalg.det(rotation)
    if orthogonality > ROTATION_TOLERANCE or abs(determinant - 1) > ROTATION_TOLERANCE:
        raise NonOrthogonalRotationException(
            f"Rotation is not in SO(3): max |R^T R - I| = {orthogonality:.3e},"
            f" det = {determinant:.12f}."
        )


@dataclass(frozen=True)
class RigidTransform:
    rotation: NDArray[np.float64] = field(default_factory=lambda: np.eye(3))
    translation: Point3 = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        check_rotation(rotation)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    def apply(self, points: Points) -> Points:
        return points @ self.rotation.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        # self after other
        return RigidTransform(
            rotation=self.rotation @ other.rotation,
            translation=self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> RigidTransform:
        return RigidTransform(
            rotation=self.rotation.T, translation=-self.rotation.T @ self.translation
        )


def apply_rigid(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    check_rotation(transform.rotation)
    return cloud.with_points(transform.apply(cloud.points))


# Rotation samplers
# \_________________


def rotation_about_z(angle: float) -> NDArray[np.float64]:
    cos, sin = math.cos(angle), math.sin(angle)
    return np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])


def quaternion_to_matrix(quaternion: NDArray[np.float64]) -> NDArray[np.float64]:
    w, x, y, z = quaternion / np.linalg.norm(quaternion)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def sample_rotation_z(rng: np.random.Generator) -> RigidTransform:
    angle = rng.uniform(0.0, 2 * math.pi)
    return RigidTransform(rotation=rotation_about_z(angle))


def sample_rotation_so3(rng: np.random.Generator) -> RigidTransform:
    # Shoemake's uniform unit quaternion
    u1, u2, u3 = rng.random(3)
    quaternion = np.array(
        [
            math.sqrt(u1) * math.cos(2 * math.pi * u3),
            math.sqrt(1 - u1) * math.sin(2 * math.pi * u2),
            math.sqrt(1 - u1) * math.cos(2 * math.pi * u2),
            math.sqrt(u1) * math.sin(2 * math.pi * u3),
        ]
    )
    return RigidTransform(rotation=quaternion_to_matrix(quaternion))


def sample_rotation(kind: str, rng: np.random.Generator) -> RigidTransform:
    if kind == "z":
        return sample_rotation_z(rng)
    if kind == "so3":
        return sample_rotation_so3(rng)
    if kind == "none":
        return RigidTransform.identity()
    raise GeometryException(f"No rotation sampler named '{kind}' (z, so3, none).")


# Centroid and normalization
# \__________________________


def centroid(points: Union[Points, Sequence[Point3]]) -> Point3:
    if len(points) == 0:
        raise EmptyPointSetException("Cannot compute the centroid of no points.")
    return as_points(points).mean(axis=0)


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    centered = cloud.points - centroid(cloud.points)
    radius = float(np.max(np.linalg.norm(centered, axis=1)))
    if radius == 0.0:
        raise CoincidentPointsException(
            f"All {len(cloud)} points coincide, the cloud has no scale."
        )
    return cloud.with_points(centered / radius)
