"""Rotation-invariant point descriptors and the Cartesian ablation input."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom3d import NeighborhoodIndex, as_points, knn

# channel order of the descriptor tensor
RI_CHANNELS = ("a_xmp", "a_xpm", "d_xm", "d_xp", "a_xOp", "a_xOm", "d_xO")
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class RIDescriptorTensor:
    values: np.ndarray  # (N, k, C)
    index: NeighborhoodIndex

    @property
    def channels(self) -> int:
        return self.values.shape[-1]


def angle_between(u, v) -> np.ndarray:
    """Angle in [0, pi] between vectors along the last axis.

    Returns 0 where either vector has norm below 1e-12. Evaluated as
    ``atan2(|u x v|, u . v)``, equal to the arccos of the normalised dot
    product but well conditioned near 0 and pi.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    ok = (nu >= DEGENERATE_NORM) & (nv >= DEGENERATE_NORM)
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    dot = (u * v).sum(axis=-1)
    return np.where(ok, np.arctan2(cross, dot), 0.0)


def ri_features(cloud, k: int, index: NeighborhoodIndex | None = None) -> RIDescriptorTensor:
    """Seven angle/distance channels for every neighbour x of every source point p.

    m is the mean of the k neighbours (p itself excluded) and O the cloud
    centroid.
    """
    pts = as_points(cloud)
    if index is None:
        index = knn(pts, k)
    nbr = index.neighbors
    O = pts.mean(axis=0)
    p = pts[:, None, :]  # (N, 1, 3)
    x = pts[nbr]  # (N, k, 3)
    m = x.mean(axis=1, keepdims=True)
    feats = np.empty(x.shape[:2] + (7,))
    feats[..., 0] = angle_between(x - m, p - m)
    feats[..., 1] = angle_between(x - p, m - p)
    feats[..., 2] = np.linalg.norm(x - m, axis=-1)
    feats[..., 3] = np.linalg.norm(x - p, axis=-1)
    feats[..., 4] = angle_between(x - O, p - O)
    feats[..., 5] = angle_between(x - O, m - O)
    feats[..., 6] = np.linalg.norm(x - O, axis=-1)
    return RIDescriptorTensor(feats, index)


def cartesian_features(cloud, k: int, index: NeighborhoodIndex | None = None) -> RIDescriptorTensor:
    """Edge features ``[x - p, p]`` per neighbour (6 channels, not rotation invariant)."""
    pts = as_points(cloud)
    if index is None:
        index = knn(pts, k)
    x = pts[index.neighbors]
    p = np.broadcast_to(pts[:, None, :], x.shape)
    return RIDescriptorTensor(np.concatenate([x - p, p], axis=-1), index)


def descriptors(cloud, k: int, use_ri: bool = True) -> RIDescriptorTensor:
    return ri_features(cloud, k) if use_ri else cartesian_features(cloud, k)
