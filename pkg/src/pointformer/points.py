"""Geometric point-set primitives.

Farthest point sampling and ball query produce integer index structures
(not differentiated); grouping and feature propagation are built from
tensor ops so gradients flow back into coordinates and features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import DimensionError
from .tensor import FeedForward, Tensor, concat, gather, matmul, reshape

__all__ = [
    "PointCloud",
    "NeighborhoodIndex",
    "farthest_point_sample",
    "ball_query",
    "group_features",
    "feature_propagation",
]


@dataclass
class PointCloud:
    """N points: [N, 3] coordinates plus [N, C] per-point features (C >= 0)."""

    coords: Tensor
    feats: Tensor

    def __post_init__(self):
        if not isinstance(self.coords, Tensor):
            self.coords = Tensor(self.coords)
        if not isinstance(self.feats, Tensor):
            self.feats = Tensor(self.feats)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise DimensionError(f"coords must be [N, 3], got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise DimensionError("point cloud needs at least one point")
        if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
            raise DimensionError(
                f"feats must share leading extent with coords: {self.feats.shape} vs {self.coords.shape}"
            )
        if not np.isfinite(self.coords.data).all():
            raise ValueError("coords contain non-finite values")

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    @property
    def n_channels(self) -> int:
        return self.feats.shape[1]


@dataclass
class NeighborhoodIndex:
    """Ball-query result: per-centroid fixed-size neighbor index lists.

    Invariants: ``neighbor_ids[t][0] == centroid_ids[t]`` (the centroid is
    token 0 of its own group), every listed neighbor lies within ``radius``
    of its centroid, and ``1 <= valid_counts[t] <= K``.
    """

    centroid_ids: np.ndarray
    neighbor_ids: np.ndarray
    radius: float
    valid_counts: np.ndarray

    @property
    def n_centroids(self) -> int:
        return len(self.centroid_ids)

    @property
    def k(self) -> int:
        return self.neighbor_ids.shape[1]


def farthest_point_sample(cloud: PointCloud, n_out: int, start: str = "lexicographic") -> np.ndarray:
    """Choose ``n_out`` centroids by farthest point sampling.

    The first centroid is the lexicographically smallest coordinate (or the
    first point when ``start="first_index"``); each subsequent pick
    maximizes the minimum distance to the chosen set, ties broken by
    lexicographically smaller coordinate, then smaller original index.

    Raises:
        ValueError: if ``n_out`` is not in [1, N].
    """
    n = cloud.n_points
    if not 1 <= n_out <= n:
        raise ValueError(f"n_out must be in [1, {n}], got {n_out}")
    coords = cloud.coords.data
    if start == "lexicographic":
        start_idx = kernels.lexicographic_start(coords)
    elif start == "first_index":
        start_idx = 0
    else:
        raise ValueError(f"unknown fps start rule: {start}")
    return kernels.fps(coords, n_out, start_idx)


def ball_query(cloud: PointCloud, centroid_ids: np.ndarray, radius: float, k: int) -> NeighborhoodIndex:
    """Gather up to ``k`` points within ``radius`` of each centroid.

    Slot 0 is the centroid itself; the remaining slots hold the nearest
    in-radius points in ascending original-index order, padded by repeating
    the centroid when fewer than ``k - 1`` exist.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    neighbor_ids, valid_counts = kernels.ball_query(cloud.coords.data, centroid_ids, radius, k)
    return NeighborhoodIndex(
        centroid_ids=np.asarray(centroid_ids, dtype=np.int64),
        neighbor_ids=neighbor_ids,
        radius=float(radius),
        valid_counts=valid_counts,
    )


def group_features(cloud: PointCloud, nbr: NeighborhoodIndex):
    """Gather grouped coordinates, features and centroid-relative coordinates.

    Returns:
        (coords [N', K, 3], feats [N', K, C], rel_coords [N', K, 3]) as
        tensors; gathers are differentiable so gradients reach the parent
        cloud. Token 0's relative coordinate is exactly (0, 0, 0).
    """
    if nbr.neighbor_ids.max() >= cloud.n_points or nbr.neighbor_ids.min() < 0:
        raise IndexError("neighborhood index references points outside the cloud")
    grouped_coords = gather(cloud.coords, nbr.neighbor_ids)
    grouped_feats = gather(cloud.feats, nbr.neighbor_ids)
    centroid_coords = gather(cloud.coords, nbr.centroid_ids.reshape(-1, 1))
    rel_coords = grouped_coords - centroid_coords
    return grouped_coords, grouped_feats, rel_coords


def feature_propagation(
    low: PointCloud,
    high_coords: Tensor,
    skip_feats: Tensor,
    ffn: FeedForward,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Upsample low-resolution features onto high-resolution points.

    Each high-resolution point takes an inverse-squared-distance weighted
    average of its (up to) 3 nearest low-resolution features — an exact
    coordinate match copies that feature — then the skip features are
    concatenated and the feed-forward net applied.

    Args:
        low: source cloud carrying the features to interpolate.
        high_coords: [N_h, 3] target coordinates.
        skip_feats: [N_h, C_s] features concatenated after interpolation.
        ffn: maps (C_low + C_s) -> output width.

    Returns:
        [N_h, ffn.d_out] tensor.
    """
    if not isinstance(high_coords, Tensor):
        high_coords = Tensor(high_coords)
    if not isinstance(skip_feats, Tensor):
        skip_feats = Tensor(skip_feats)
    idx, d2_np = kernels.three_nn(high_coords.data, low.coords.data)
    n_h, kk = idx.shape

    gathered_coords = gather(low.coords, idx)               # [N_h, kk, 3]
    gathered_feats = gather(low.feats, idx)                 # [N_h, kk, C]
    diff = gathered_coords - reshape(high_coords, (n_h, 1, 3))
    d2 = (diff * diff).sum(axis=2)                          # [N_h, kk]

    # Rows with an exact match copy the nearest feature: constant one-hot
    # weights (nearest slot is 0 by construction). Others use smooth
    # inverse-d2 weights; the +shift on exact rows only avoids 1/0 there.
    exact = d2_np[:, 0] == 0.0
    shift = np.zeros((n_h, kk), dtype=low.coords.dtype)
    shift[exact] = 1.0
    inv = 1.0 / (d2 + Tensor(shift))
    weights = inv / inv.sum(axis=1, keepdims=True)
    if exact.any():
        onehot = np.zeros((n_h, kk), dtype=low.coords.dtype)
        onehot[exact, 0] = 1.0
        keep = np.where(exact, 0.0, 1.0).astype(low.coords.dtype)[:, None]
        weights = weights * Tensor(keep) + Tensor(onehot)
    interpolated = reshape(matmul(reshape(weights, (n_h, 1, kk)), gathered_feats), (n_h, -1))
    return ffn(concat([interpolated, skip_feats], axis=1), training=training, rng=rng)
