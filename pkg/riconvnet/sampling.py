"""
Farthest point sampling and k-nearest-neighbor queries.

Both are brute force and fully deterministic: distance ties always resolve to
the lowest original point index.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from riconvnet.exceptions import SampleSizeException
from riconvnet.geom import Point3, PointCloud, Points, as_points

logger = logging.getLogger("riconvnet")

# Bounds the (queries x points x 3) difference block of a kNN query
KNN_CHUNK: int = 256


@dataclass(frozen=True)
class SampleResult:
    indices: NDArray[np.int64]
    # FPS: distance to the nearest already selected point at selection time
    # (inf for the seed), kNN: distance to the query
    distances: Optional[NDArray[np.float64]] = None

    def __len__(self) -> int:
        return len(self.indices)


def points_of(cloud: Union[PointCloud, Points]) -> Points:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return as_points(cloud)


# Farthest point sampling
# \_______________________


def farthest_point_sampling(cloud: Union[PointCloud, Points], n: int) -> SampleResult:
    points = points_of(cloud)
    count = len(points)
    if not 1 <= n <= count:
        raise SampleSizeException(
            f"Cannot sample {n} representatives from {count} points."
        )
    # Seed: farthest point from the centroid, rotation and order independent
    seed = int(np.argmax(np.linalg.norm(points - points.mean(axis=0), axis=1)))
    indices = np.empty(n, dtype=np.int64)
    distances = np.empty(n, dtype=np.float64)
    indices[0] = seed
    distances[0] = np.inf
    nearest = np.linalg.norm(points - points[seed], axis=1)
    nearest[seed] = -1.0
    for i in range(1, n):
        selected = int(np.argmax(nearest))
        indices[i] = selected
        distances[i] = nearest[selected]
        nearest = np.minimum(nearest, np.linalg.norm(points - points[selected], axis=1))
        nearest[selected] = -1.0
    return SampleResult(indices=indices, distances=distances)


# Nearest neighbors
# \_________________


def knn_indices(
    points: Points, queries: Points, k: int
) -> Tuple[NDArray[np.int64], NDArray[np.float64]]:
    count = len(points)
    if not 1 <= k <= count:
        raise SampleSizeException(f"Cannot query {k} neighbors among {count} points.")
    indices = np.empty((len(queries), k), dtype=np.int64)
    distances = np.empty((len(queries), k), dtype=np.float64)
    for start in range(0, len(queries), KNN_CHUNK):
        chunk = queries[start : start + KNN_CHUNK]
        diff = chunk[:, None, :] - points[None, :, :]
        dist = np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))
        # Stable sort keeps the lowest index first among equal distances
        order = np.argsort(dist, axis=1, kind="stable")[:, :k]
        indices[start : start + KNN_CHUNK] = order
        distances[start : start + KNN_CHUNK] = np.take_along_axis(dist, order, axis=1)
    return indices, distances


def knn(cloud: Union[PointCloud, Points], query: Point3, k: int) -> SampleResult:
    points = points_of(cloud)
    indices, distances = knn_indices(points, as_points(query), k)
    return SampleResult(indices=indices[0], distances=distances[0])
