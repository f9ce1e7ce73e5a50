"""Point cloud value helpers and exact geometric kernels.

Clouds are plain ``(N, 3)`` arrays. Everything here is exact brute force
(chunked so memory stays bounded), deterministic, and free of shared state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, InvalidArgument

_CHUNK = 256


def as_cloud(points, name="cloud") -> np.ndarray:
    """Validate and return ``points`` as a float64 ``(N, 3)`` array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgument(f"{name}: expected shape (N, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidArgument(f"{name}: empty point cloud")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name}: non-finite coordinates")
    return arr


@dataclass(frozen=True)
class OcclusionSeries:
    """Nested partial clouds: ``small`` ⊂ ``mid`` ⊂ ``base``."""

    base: np.ndarray
    mid: np.ndarray
    small: np.ndarray
    removal_count: int
    seed_point_index: int
    # indices into ``base`` that survive in mid / small, ascending
    mid_index: np.ndarray
    small_index: np.ndarray


def squared_distances(query, reference) -> np.ndarray:
    """Full ``(Q, R)`` matrix of squared Euclidean distances (difference form)."""
    q = np.asarray(query, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    diff = q[:, None, :] - r[None, :, :]
    return np.einsum("qrc,qrc->qr", diff, diff)


def knn(query, reference, k: int):
    """Exact k nearest neighbours of every query point among ``reference``.

    Returns ``(indices, sq_dists)``, both ``(Q, k)``, ascending by distance;
    equal distances resolve to the lower reference index.
    """
    q = as_cloud(query, "query")
    r = as_cloud(reference, "reference")
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise InvalidArgument(f"k must be a positive integer, got {k!r}")
    if k > r.shape[0]:
        raise InvalidArgument(f"k={k} exceeds reference size {r.shape[0]}")
    idx = np.empty((q.shape[0], k), dtype=np.int64)
    dist = np.empty((q.shape[0], k), dtype=np.float64)
    for start in range(0, q.shape[0], _CHUNK):
        d2 = squared_distances(q[start:start + _CHUNK], r)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx[start:start + _CHUNK] = order
        dist[start:start + _CHUNK] = np.take_along_axis(d2, order, axis=1)
    return idx, dist


def nearest_sq_dists(query, reference) -> np.ndarray:
    """Squared distance from each query point to its nearest reference point."""
    q = as_cloud(query, "query")
    r = as_cloud(reference, "reference")
    out = np.empty(q.shape[0], dtype=np.float64)
    for start in range(0, q.shape[0], _CHUNK):
        out[start:start + _CHUNK] = squared_distances(q[start:start + _CHUNK], r).min(axis=1)
    return out


def normalize(cloud):
    """Center on the centroid and scale so the largest absolute coordinate is 1.

    Returns ``(points, centroid, scale)``; ``denormalize`` inverts it.
    """
    pts = as_cloud(cloud)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.abs(centered).max())
    if scale == 0.0:
        raise DegenerateInput("all points coincide; cannot normalize")
    return centered / scale, centroid, scale


def denormalize(points, centroid, scale) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) * scale + np.asarray(centroid, dtype=np.float64)


def make_occlusion_series(base, K: int, rng_seed: int) -> OcclusionSeries:
    """Remove the K, then 2K, points nearest a uniformly drawn seed point.

    Surviving points keep their original order.
    """
    pts = as_cloud(base, "base")
    n = pts.shape[0]
    if K < 1:
        raise InvalidArgument(f"K must be positive, got {K}")
    if n <= 2 * K:
        raise InvalidArgument(f"base has {n} points; need more than 2K = {2 * K}")
    rng = np.random.default_rng(rng_seed)
    seed_idx = int(rng.integers(n))
    nearest, _ = knn(pts[seed_idx:seed_idx + 1], pts, 2 * K)
    nearest = nearest[0]
    keep_mid = np.ones(n, dtype=bool)
    keep_mid[nearest[:K]] = False
    keep_small = keep_mid.copy()
    keep_small[nearest[K:]] = False
    mid_index = np.flatnonzero(keep_mid)
    small_index = np.flatnonzero(keep_small)
    return OcclusionSeries(
        base=pts,
        mid=pts[mid_index],
        small=pts[small_index],
        removal_count=K,
        seed_point_index=seed_idx,
        mid_index=mid_index,
        small_index=small_index,
    )


def degrade_indices(predicted, partial, k: int) -> np.ndarray:
    """Sorted union over partial points of their k nearest predicted indices."""
    idx, _ = knn(partial, predicted, k)
    return np.unique(idx)


def degrade(predicted, partial, k: int):
    """Keep only the predicted points that are among some partial point's k nearest.

    Works on numpy arrays or torch tensors. For tensors the selection is made on
    detached values and applied by indexing, so gradients reach the selected
    predicted coordinates.
    """
    if hasattr(predicted, "detach"):
        pred_np = predicted.detach().cpu().numpy()
        part_np = partial.detach().cpu().numpy() if hasattr(partial, "detach") else partial
        sel = degrade_indices(pred_np, part_np, k)
        import torch

        return predicted[torch.as_tensor(sel, device=predicted.device)]
    pred = as_cloud(predicted, "predicted")
    return pred[degrade_indices(pred, partial, k)]


def resample(cloud, M: int, rng_seed: int) -> np.ndarray:
    """Return exactly ``M`` points drawn from ``cloud``.

    Larger clouds are subsampled without replacement; smaller ones keep every
    point and are padded with draws made with replacement.
    """
    pts = as_cloud(cloud)
    if M < 1:
        raise InvalidArgument(f"M must be positive, got {M}")
    rng = np.random.default_rng(rng_seed)
    n = pts.shape[0]
    if n >= M:
        sel = np.sort(rng.choice(n, size=M, replace=False))
    else:
        sel = np.concatenate([np.arange(n), rng.integers(0, n, size=M - n)])
    return pts[sel]
