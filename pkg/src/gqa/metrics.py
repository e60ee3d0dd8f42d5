"""Full-reference geometry metrics.

Point-to-point and point-to-plane errors, plane-to-plane angular similarity,
MSE / Hausdorff / PSNR pooling, and the pseudo-MOS built on angular
similarity.  Directional values are computed A->B (for each point of A, its
nearest neighbour in B) and combined symmetrically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import NeighborIndex, PointCloud, estimate_normals
from .errors import DataError

LOWER = "lower-is-better"
HIGHER = "higher-is-better"

FAMILIES = ("po2po", "po2pl", "pl2pl")
POOLINGS = ("mse", "hd", "psnr")
METRIC_IDS = tuple(f"{f}_{p}" for f in FAMILIES for p in POOLINGS)


@dataclass
class MetricResult:
    metric: str
    ab: float
    ba: float
    symmetric: float
    orientation: str


def _check(a: PointCloud, b: PointCloud):
    if a is None or b is None or len(a) == 0 or len(b) == 0:
        raise DataError("metric inputs must be non-empty clouds")


def po2po_errors(a: PointCloud, b: PointCloud, index: NeighborIndex | None = None) -> np.ndarray:
    _check(a, b)
    index = index or NeighborIndex(b)
    dist, _ = index.nearest(a.points)
    return dist


def po2pl_errors(a: PointCloud, b: PointCloud, index: NeighborIndex | None = None) -> np.ndarray:
    """|(a_i - b_nn) . n_nn| using the normals carried by ``b``."""
    _check(a, b)
    if not b.has_normals:
        raise DataError("point-to-plane needs normals on the target cloud")
    index = index or NeighborIndex(b)
    _, nn = index.nearest(a.points)
    diff = a.points - b.points[nn]
    return np.abs((diff * b.normals[nn]).sum(axis=1))


def angular_similarity(n1: np.ndarray, n2: np.ndarray) -> np.ndarray:
    """1 - 2*theta/pi for unoriented normals (theta in [0, pi/2])."""
    # atan2 form: arccos is ill-conditioned near 1, identical normals must give exactly 1
    cos = np.abs((n1 * n2).sum(axis=-1))
    sin = np.linalg.norm(np.cross(n1, n2), axis=-1)
    return 1.0 - 2.0 * np.arctan2(sin, cos) / np.pi


def pl2pl_similarity(a: PointCloud, b: PointCloud, index: NeighborIndex | None = None) -> np.ndarray:
    _check(a, b)
    if not (a.has_normals and b.has_normals):
        raise DataError("plane-to-plane needs normals on both clouds")
    index = index or NeighborIndex(b)
    _, nn = index.nearest(a.points)
    return angular_similarity(a.normals, b.normals[nn])


def pool(errors, mode: str) -> float:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise DataError("cannot pool an empty error vector")
    mode = mode.lower()
    if mode == "mse":
        return float(np.mean(errors**2))
    if mode == "hd":
        return float(np.max(errors))
    raise DataError(f"unknown pooling {mode!r}")


def psnr(mse: float, peak: float) -> float:
    """10 log10(peak^2 / mse); ``inf`` when mse is 0."""
    if peak <= 0:
        raise DataError("PSNR peak must be positive")
    if mse < 0:
        raise DataError("mse must be non-negative")
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / mse))


def symmetric(ab: float, ba: float, orientation: str = LOWER) -> float:
    """Worst direction: max for errors, min for similarities."""
    if orientation == LOWER:
        return max(ab, ba)
    if orientation == HIGHER:
        return min(ab, ba)
    raise DataError(f"unknown orientation {orientation!r}")


def orientation_of(metric: str) -> str:
    family, pooling = _split(metric)
    if pooling == "psnr":
        return HIGHER
    # pl2pl pools angular *error* (1 - similarity) for MSE/HD
    return LOWER


def _split(metric: str):
    try:
        family, pooling = metric.lower().split("_")
    except ValueError:
        raise DataError(f"unknown metric {metric!r}") from None
    if family not in FAMILIES or pooling not in POOLINGS:
        raise DataError(f"unknown metric {metric!r}")
    return family, pooling


class MetricContext:
    """Caches normals and neighbour indices for one reference/degraded pair."""

    def __init__(self, reference: PointCloud, degraded: PointCloud, normal_k: int = 16, peak: float | None = None):
        _check(reference, degraded)
        self.reference = reference
        self.degraded = degraded
        self.normal_k = normal_k
        self.peak = reference.bbox_diagonal() if peak is None else peak
        self._idx = {}
        self._normals = {}

    def index(self, which):
        if which not in self._idx:
            self._idx[which] = NeighborIndex(self.reference if which == "ref" else self.degraded)
        return self._idx[which]

    def with_normals(self, which):
        if which not in self._normals:
            cloud = self.reference if which == "ref" else self.degraded
            if not cloud.has_normals:
                cloud = _normals_or_fallback(cloud, self.normal_k)
            self._normals[which] = cloud
        return self._normals[which]

    def directional_errors(self, family):
        """Per-point errors (ref->deg, deg->ref) for ``family``."""
        r, d = "ref", "deg"
        if family == "po2po":
            return (po2po_errors(self.reference, self.degraded, self.index(d)),
                    po2po_errors(self.degraded, self.reference, self.index(r)))
        if family == "po2pl":
            return (po2pl_errors(self.reference, self.with_normals(d), self.index(d)),
                    po2pl_errors(self.degraded, self.with_normals(r), self.index(r)))
        if family == "pl2pl":
            ab = pl2pl_similarity(self.with_normals(r), self.with_normals(d), self.index(d))
            ba = pl2pl_similarity(self.with_normals(d), self.with_normals(r), self.index(r))
            return 1.0 - ab, 1.0 - ba
        raise DataError(f"unknown metric family {family!r}")

    def metric(self, metric: str) -> MetricResult:
        family, pooling = _split(metric)
        eab, eba = self.directional_errors(family)
        if pooling == "psnr":
            peak = 1.0 if family == "pl2pl" else self.peak
            ab, ba = psnr(pool(eab, "mse"), peak), psnr(pool(eba, "mse"), peak)
        else:
            ab, ba = pool(eab, pooling), pool(eba, pooling)
        orient = orientation_of(metric)
        return MetricResult(metric, ab, ba, symmetric(ab, ba, orient), orient)


def _normals_or_fallback(cloud: PointCloud, k: int) -> PointCloud:
    # heavily downsampled clouds can have fewer than k+1 points
    k_eff = min(k, len(cloud) - 1)
    if k_eff < 3:
        return cloud.with_normals(np.tile([0.0, 0.0, 1.0], (len(cloud), 1)))
    return estimate_normals(cloud, k_eff)


def compute_metric(reference: PointCloud, degraded: PointCloud, metric: str, normal_k: int = 16,
                   peak: float | None = None) -> MetricResult:
    return MetricContext(reference, degraded, normal_k, peak).metric(metric)


def pseudo_mos(reference: PointCloud, degraded: PointCloud, normal_k: int = 16) -> float:
    """Symmetric mean angular similarity in [0, 1].

    Reference normals are used if present, else estimated; the degraded
    cloud's normals are always estimated from its own points unless it
    already carries normals.
    """
    ctx = MetricContext(reference, degraded, normal_k)
    r, d = ctx.with_normals("ref"), ctx.with_normals("deg")
    ab = pl2pl_similarity(r, d, ctx.index("deg")).mean()
    ba = pl2pl_similarity(d, r, ctx.index("ref")).mean()
    return float(np.clip(0.5 * (ab + ba), 0.0, 1.0))


def rank_by_scores(values, orientation: str):
    """Item order best-to-worst; ties keep ascending item index."""
    values = np.asarray(values, dtype=np.float64)
    key = values if orientation == LOWER else -values
    return [int(i) for i in np.lexsort((np.arange(len(values)), key))]


def rank_by_metric(ranked_list, metric: str, normal_k: int = 16):
    """Predicted ranking (item indices, best first) of a
    :class:`~gqa.distort.RankedList` under the symmetric value of ``metric``."""
    ref = ranked_list.reference
    values = [compute_metric(ref, cloud, metric, normal_k).symmetric for cloud in ranked_list.clouds]
    return rank_by_scores(values, orientation_of(metric)), values
