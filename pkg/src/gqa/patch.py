"""Anchor-based patch generation.

Anchors come from farthest point sampling on the *reference* and are reused
as coordinates for every degraded version, so patches of one list always
cover the same regions.  Each patch is a ball of radius ``r`` around its
anchor, randomly thinned to ``n`` points or padded with copies of the anchor,
then translated so the anchor sits at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import NeighborIndex, PointCloud, fps
from .errors import DataError
from .rng import generator

DEFAULT_N = 64
DEFAULT_RADIUS = 0.2
DEFAULT_POINTS = 512


@dataclass(frozen=True, eq=False)
class AnchorSet:
    points: np.ndarray  # (N, 3)
    seed: int

    @property
    def N(self) -> int:
        return len(self.points)


@dataclass(eq=False)
class PatchSet:
    patches: np.ndarray  # (N, n, 3), anchor-centred
    anchors: np.ndarray  # (N, 3)
    pad_counts: np.ndarray  # (N,)

    def __len__(self):
        return len(self.patches)

    @property
    def empty(self) -> np.ndarray:
        return self.pad_counts == self.patches.shape[1]


def generate_anchors(reference: PointCloud, N: int = DEFAULT_N, seed: int = 0) -> AnchorSet:
    idx = fps(reference, N, seed)
    return AnchorSet(reference.points[idx].copy(), seed)


def extract_patches(cloud: PointCloud, anchors: AnchorSet, r: float = DEFAULT_RADIUS,
                    n: int = DEFAULT_POINTS, seed: int = 0,
                    index: NeighborIndex | None = None) -> PatchSet:
    if r <= 0:
        raise DataError("patch radius must be positive")
    if n < 1:
        raise DataError("patch size must be >= 1")
    index = index or NeighborIndex(cloud)
    N = anchors.N
    patches = np.empty((N, n, 3))
    pads = np.zeros(N, dtype=np.int64)
    for i, anchor in enumerate(anchors.points):
        ball = index.ball_query(anchor, r)
        if len(ball) > n:
            rng = generator(seed, "patch", i)
            ball = np.sort(rng.choice(ball, size=n, replace=False))
        pts = cloud.points[ball]
        pad = n - len(pts)
        if pad:
            pts = np.vstack([pts, np.repeat(anchor[None, :], pad, axis=0)])
        patches[i] = pts - anchor
        pads[i] = pad
    return PatchSet(patches, anchors.points.copy(), pads)


def whole_cloud_patch(cloud: PointCloud, n: int = DEFAULT_POINTS, seed: int = 0) -> PatchSet:
    """Patch-generation bypass: one ``n``-point sample of the whole cloud,
    centred at its centroid (padded with centroid copies if too small)."""
    centroid = cloud.points.mean(axis=0)
    pts = cloud.points
    if len(pts) > n:
        idx = np.sort(generator(seed, "whole").choice(len(pts), size=n, replace=False))
        pts = pts[idx]
    pad = n - len(pts)
    if pad:
        pts = np.vstack([pts, np.repeat(centroid[None, :], pad, axis=0)])
    return PatchSet((pts - centroid)[None], centroid[None], np.array([pad]))


def patches_for_list(clouds, reference: PointCloud, N: int, r: float, n: int, seed: int,
                     no_patching: bool = False):
    """Patch sets for every cloud of one ranked list, sharing the reference's
    anchors."""
    if no_patching:
        return [whole_cloud_patch(c, n, seed) for c in clouds]
    anchors = generate_anchors(reference, min(N, len(reference)), seed)
    return [extract_patches(c, anchors, r, n, seed) for c in clouds]


def self_anchored_patches(cloud: PointCloud, N: int = DEFAULT_N, r: float = DEFAULT_RADIUS,
                          n: int = DEFAULT_POINTS, seed: int = 0) -> PatchSet:
    """Patches for a cloud scored on its own, without a known reference:
    anchors come from FPS on the cloud itself."""
    anchors = generate_anchors(cloud, min(N, len(cloud)), seed)
    return extract_patches(cloud, anchors, r, n, seed)
