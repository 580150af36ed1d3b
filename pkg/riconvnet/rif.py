"""
Rotation invariant local features and reference axis binning.

For a reference point p with K nearest neighbors and their centroid m, the
vector pm orients the neighborhood. Each neighbor x is described by

    d0 = |x - p|, d1 = |x - m|, alpha0 = angle(x->p, pm), alpha1 = angle(x->m, pm)

which only depend on distances and dot products, hence are unchanged by any
rigid transform of the neighborhood. Neighbors are binned by their projection
on pm so that an ordered 1D kernel can be applied to an unordered set.

The single frame API (build_frame, rif_features, bin_assign) is backed by the
vectorized functions used by the convolution layers.
"""

import logging
from dataclasses import dataclass
from typing import List, Union

import numpy as np
from numpy.typing import NDArray

from riconvnet.constants import (
    BIN_SPAN_EPSILON,
    DEGENERATE_EPSILON,
    FEATURE_CHANNELS,
    FEATURE_MODES,
)
from riconvnet.exceptions import DegenerateNeighborhoodException, FeatureException
from riconvnet.geom import Point3, PointCloud, Points
from riconvnet.sampling import knn_indices, points_of

logger = logging.getLogger("riconvnet")


# Domain types
# \____________


@dataclass(frozen=True)
class NeighborFrame:
    p: Point3
    neighbor_indices: NDArray[np.int64]
    neighbor_points: Points
    m: Point3
    pm: NDArray[np.float64]
    degenerate_fallback_used: bool

    def __len__(self) -> int:
        return len(self.neighbor_indices)


@dataclass(frozen=True)
class RIFeature:
    d0: float
    d1: float
    alpha0: float
    alpha1: float

    def as_tuple(self):
        return (self.d0, self.d1, self.alpha0, self.alpha1)


@dataclass(frozen=True)
class BinAssignment:
    bin_of: NDArray[np.int64]
    n_bins: int


@dataclass(frozen=True)
class FrameBatch:
    """
    R frames of one cloud: p (R, 3), neighbor_indices (R, K),
    neighbors (R, K, 3), m (R, 3), fallback (R,), degenerate (R,).
    """

    p: NDArray[np.float64]
    neighbor_indices: NDArray[np.int64]
    neighbors: NDArray[np.float64]
    m: NDArray[np.float64]
    fallback: NDArray[np.bool_]
    degenerate: NDArray[np.bool_]

    def __len__(self) -> int:
        return len(self.p)


# Frames
# \______


def frames_from_neighbors(
    p: NDArray[np.float64],
    neighbor_indices: NDArray[np.int64],
    neighbors: NDArray[np.float64],
    strict: bool = True,
) -> FrameBatch:
    """
    Frames from explicit neighbor sets: p (R, 3), neighbors (R, K, 3). Among
    equidistant farthest neighbors the fallback keeps the first one.
    """
    distances = np.linalg.norm(neighbors - p[:, None, :], axis=-1)
    m = neighbors.mean(axis=1)
    radius = distances.max(axis=1)

    degenerate = radius == 0.0
    if degenerate.any():
        if strict:
            first = int(np.argmax(degenerate))
            raise DegenerateNeighborhoodException(
                f"All {neighbors.shape[1]} neighbors of frame {first} coincide with"
                " its reference point."
            )
        logger.warning(
            f"⚠️ {int(degenerate.sum())} neighborhood(s) collapse onto their"
            " reference point, using zero features."
        )

    # p and m become a single point: use the farthest neighbor from p as m
    fallback = (np.linalg.norm(m - p, axis=1) < DEGENERATE_EPSILON * radius) & (
        ~degenerate
    )
    if fallback.any():
        farthest = np.argmax(distances, axis=1)
        rows = np.flatnonzero(fallback)
        m[rows] = neighbors[rows, farthest[rows]]
        logger.debug(f"🪂 Centroid fallback used for {len(rows)} frame(s).")

    return FrameBatch(
        p=p,
        neighbor_indices=neighbor_indices,
        neighbors=neighbors,
        m=m,
        fallback=fallback,
        degenerate=degenerate,
    )


def build_frames(
    points: Points,
    reference_indices: NDArray[np.int64],
    k: int,
    strict: bool = True,
) -> FrameBatch:
    p = points[reference_indices]
    # Sorted by distance then index, so the first farthest is the lowest index
    neighbor_indices, _ = knn_indices(points, p, k)
    return frames_from_neighbors(p, neighbor_indices, points[neighbor_indices], strict)


def build_frame(cloud: Union[PointCloud, Points], p_index: int, k: int) -> NeighborFrame:
    frames = build_frames(points_of(cloud), np.array([p_index]), k, strict=True)
    return first_frame(frames)


def frame_around(p: Point3, neighbor_points: Points) -> NeighborFrame:
    neighbor_points = np.asarray(neighbor_points, dtype=np.float64)
    frames = frames_from_neighbors(
        np.asarray(p, dtype=np.float64).reshape(1, 3),
        np.arange(len(neighbor_points))[None, :],
        neighbor_points[None, :, :],
        strict=True,
    )
    return first_frame(frames)


def first_frame(frames: FrameBatch) -> NeighborFrame:
    return NeighborFrame(
        p=frames.p[0],
        neighbor_indices=frames.neighbor_indices[0],
        neighbor_points=frames.neighbors[0],
        m=frames.m[0],
        pm=frames.m[0] - frames.p[0],
        degenerate_fallback_used=bool(frames.fallback[0]),
    )


# Features
# \________


def vector_angle(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    # atan2 form: stable near 0 and pi, and a zero vector yields 0
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.einsum("...d,...d->...", a, b)
    return np.arctan2(cross, dot)


def rif_feature_array(
    p: NDArray[np.float64], m: NDArray[np.float64], neighbors: NDArray[np.float64]
) -> NDArray[np.float64]:
    """
    p (..., 3), m (..., 3), neighbors (..., K, 3) -> (..., K, 4)
    rows [d0, d1, alpha0, alpha1].
    """
    to_p = p[..., None, :] - neighbors
    to_m = m[..., None, :] - neighbors
    pm = np.broadcast_to((m - p)[..., None, :], to_p.shape)
    return np.stack(
        [
            np.linalg.norm(to_p, axis=-1),
            np.linalg.norm(to_m, axis=-1),
            vector_angle(to_p, pm),
            vector_angle(to_m, pm),
        ],
        axis=-1,
    )


def local_features(frames: FrameBatch, feature_mode: str) -> NDArray[np.float64]:
    if feature_mode not in FEATURE_MODES:
        raise FeatureException(
            f"Unknown feature mode '{feature_mode}', expected one of {FEATURE_MODES}."
        )
    if feature_mode == "raw_xyz":
        features = frames.neighbors - frames.p[:, None, :]
    else:
        features = rif_feature_array(frames.p, frames.m, frames.neighbors)
        if feature_mode == "distances_only":
            features = features[..., :2]
        elif feature_mode == "angles_only":
            features = features[..., 2:]
    assert features.shape[-1] == FEATURE_CHANNELS[feature_mode]
    return features


def rif_features(frame: NeighborFrame) -> List[RIFeature]:
    rows = rif_feature_array(frame.p, frame.m, frame.neighbor_points)
    return [RIFeature(*map(float, row)) for row in rows]


# Binning
# \_______


def bin_indices(
    p: NDArray[np.float64],
    m: NDArray[np.float64],
    neighbors: NDArray[np.float64],
    n_bins: int,
) -> NDArray[np.int64]:
    """
    p (..., 3), m (..., 3), neighbors (..., K, 3) -> bin of each neighbor (..., K).
    """
    if n_bins < 1:
        raise FeatureException(f"Need at least one bin, got {n_bins}.")
    offsets = neighbors - p[..., None, :]
    pm = m - p
    length = np.linalg.norm(pm, axis=-1, keepdims=True)
    axis = np.divide(pm, length, out=np.zeros_like(pm), where=length > 0)
    t = np.einsum("...kd,...d->...k", offsets, axis)
    t_min = t.min(axis=-1, keepdims=True)
    span = t.max(axis=-1, keepdims=True) - t_min
    radius = np.linalg.norm(offsets, axis=-1).max(axis=-1, keepdims=True)
    flat = span <= BIN_SPAN_EPSILON * radius
    scaled = np.divide(
        n_bins * (t - t_min), span, out=np.zeros_like(t), where=~flat & (span > 0)
    )
    return np.clip(np.floor(scaled), 0, n_bins - 1).astype(np.int64)


def bin_assign(frame: NeighborFrame, n_bins: int) -> BinAssignment:
    bins = bin_indices(frame.p, frame.m, frame.neighbor_points, n_bins)
    return BinAssignment(bin_of=bins, n_bins=n_bins)
