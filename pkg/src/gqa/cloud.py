"""Point clouds and the geometric primitives every other module builds on.

Coordinates are kept as float64 ``(n, 3)`` arrays.  Neighbour queries go
through :class:`NeighborIndex`, a KD-tree wrapper whose results are
tie-broken by ascending point index so they agree exactly with a brute-force
scan.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .rng import generator

NORMAL_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    # per-point flag set by estimate_normals for rank-deficient neighbourhoods
    degenerate: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        if len(pts) == 0:
            raise DataError("point cloud is empty")
        if not np.isfinite(pts).all():
            raise DataError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.ascontiguousarray(np.asarray(self.normals, dtype=np.float64).reshape(-1, 3))
            if len(nrm) != len(pts):
                raise DataError(f"normals length {len(nrm)} != points length {len(pts)}")
            if not np.isfinite(nrm).all():
                raise DataError("normals contain non-finite values")
            if np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max() > NORMAL_TOL:
                raise DataError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def with_normals(self, normals, degenerate=None) -> "PointCloud":
        return PointCloud(self.points, normals, degenerate)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


# --------------------------------------------------------------------------
# file formats


def _fmt_row(values) -> str:
    return " ".join(f"{v:.9g}" for v in values)


def _parse_floats(tokens, lineno, path):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise DataError(f"{path}:{lineno}: non-numeric token in {' '.join(tokens)!r}") from None


def _build_cloud(rows, has_normals, path):
    if not rows:
        raise DataError(f"{path}: empty cloud")
    arr = np.asarray(rows, dtype=np.float64)
    normals = None
    if has_normals:
        normals = arr[:, 3:6]
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        if (norms == 0).any():
            raise DataError(f"{path}: zero-length normal")
        normals = normals / norms
    return PointCloud(arr[:, :3], normals)


def _load_xyz(path):
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) not in (3, 6):
                raise DataError(f"{path}:{lineno}: expected 3 or 6 values, got {len(tokens)}")
            if width is None:
                width = len(tokens)
            elif width != len(tokens):
                raise DataError(f"{path}:{lineno}: inconsistent column count")
            rows.append(_parse_floats(tokens, lineno, path))
    return _build_cloud(rows, width == 6, path)


def _load_ply(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DataError(f"{path}:1: missing 'ply' magic")
    count = None
    props = []
    in_vertex = False
    body_start = None
    for lineno, raw in enumerate(lines[1:], 2):
        tokens = raw.split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "format":
            if tokens[1:2] != ["ascii"]:
                raise DataError(f"{path}:{lineno}: only ascii ply is supported")
        elif key in ("comment", "obj_info"):
            continue
        elif key == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    count = int(tokens[2])
                except (IndexError, ValueError):
                    raise DataError(f"{path}:{lineno}: bad vertex count") from None
        elif key == "property":
            if in_vertex:
                if len(tokens) != 3 or tokens[1] == "list":
                    raise DataError(f"{path}:{lineno}: unsupported vertex property")
                props.append(tokens[2])
        elif key == "end_header":
            body_start = lineno
            break
        else:
            raise DataError(f"{path}:{lineno}: unexpected header line {raw!r}")
    if body_start is None or count is None:
        raise DataError(f"{path}: incomplete ply header")
    try:
        cols = [props.index(name) for name in ("x", "y", "z")]
    except ValueError:
        raise DataError(f"{path}: ply header lacks x/y/z properties") from None
    has_normals = all(name in props for name in ("nx", "ny", "nz"))
    if has_normals:
        cols += [props.index(name) for name in ("nx", "ny", "nz")]
    rows = []
    lineno = body_start
    for raw in lines[body_start:]:
        lineno += 1
        if len(rows) == count:
            break
        tokens = raw.split()
        if not tokens:
            continue
        if len(tokens) != len(props):
            raise DataError(f"{path}:{lineno}: expected {len(props)} values, got {len(tokens)}")
        vals = _parse_floats(tokens, lineno, path)
        rows.append([vals[c] for c in cols])
    if len(rows) != count:
        raise DataError(f"{path}: expected {count} vertices, found {len(rows)}")
    return _build_cloud(rows, has_normals, path)


def _infer_format(path, fmt):
    if fmt is not None:
        return fmt
    return "ply-ascii" if str(path).lower().endswith(".ply") else "xyz"


def load_cloud(path, fmt: str | None = None) -> PointCloud:
    """Read a cloud from ``ply-ascii`` or ``xyz`` (inferred from the suffix if
    ``fmt`` is None).  Point order is preserved."""
    fmt = _infer_format(path, fmt)
    if not os.path.exists(path):
        raise DataError(f"{path}: no such file")
    if fmt == "xyz":
        return _load_xyz(path)
    if fmt == "ply-ascii":
        return _load_ply(path)
    raise DataError(f"unknown cloud format {fmt!r}")


def save_cloud(cloud: PointCloud, path, fmt: str | None = None) -> None:
    fmt = _infer_format(path, fmt)
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    body = "\n".join(_fmt_row(row) for row in data) + "\n"
    if fmt == "xyz":
        text = body
    elif fmt == "ply-ascii":
        header = [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(cloud)}",
            "property float x",
            "property float y",
            "property float z",
        ]
        if cloud.normals is not None:
            header += ["property float nx", "property float ny", "property float nz"]
        header.append("end_header")
        text = "\n".join(header) + "\n" + body
    else:
        raise DataError(f"unknown cloud format {fmt!r}")
    with open(path, "w") as fh:
        fh.write(text)


# --------------------------------------------------------------------------
# normalisation and scale


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Centre at the centroid and scale so the farthest point has radius 1."""
    centered = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    scale = 1.0 / radius if radius > 0 else 1.0
    return PointCloud(centered * scale, cloud.normals)


def avg_nn_edge_length(cloud: PointCloud) -> float:
    """Mean distance from each point to its nearest distinct neighbour (l_r)."""
    if len(cloud) < 2:
        raise DataError("need at least 2 points for an edge length")
    dist, _ = NeighborIndex(cloud).nearest_other()
    return float(dist.mean())


# --------------------------------------------------------------------------
# neighbour search


def _dist(points, q):
    d = points - q
    return np.sqrt((d * d).sum(axis=-1))


class NeighborIndex:
    """Immutable KD-tree over a cloud with brute-force-exact results.

    Distances are recomputed with numpy for every candidate and ordered by
    ``(distance, index)``.  The tree is only used to prune candidates.
    """

    def __init__(self, cloud):
        points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        self.points = points
        self.n = len(points)
        self._tree = cKDTree(points)

    def knn(self, query, k: int) -> np.ndarray:
        return self.knn_batch(np.asarray(query, dtype=np.float64).reshape(1, 3), k)[1][0]

    def knn_batch(self, queries, k: int):
        """Return ``(dist, idx)`` arrays of shape ``(m, k)`` sorted by
        ``(distance, index)``."""
        if k > self.n:
            raise DataError(f"k={k} exceeds cloud size {self.n}")
        if k < 1:
            raise DataError("k must be >= 1")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        m = len(queries)
        kq = min(k + 1, self.n)
        _, idx = self._tree.query(queries, k=kq)
        idx = idx.reshape(m, kq)
        dist = np.sqrt(((self.points[idx] - queries[:, None, :]) ** 2).sum(axis=-1))
        order = np.lexsort((idx, dist), axis=-1)
        idx = np.take_along_axis(idx, order, axis=1)
        dist = np.take_along_axis(dist, order, axis=1)
        if kq == k:
            return dist, idx
        # rows where the (k+1)-th candidate is (nearly) tied with the k-th may
        # hide further equal-distance points the tree did not return
        kth = dist[:, k - 1]
        risky = np.nonzero(dist[:, k] <= kth * (1 + 1e-9) + 1e-300)[0]
        for row in risky:
            dist[row, :k], idx[row, :k] = self._exact_row(queries[row], k, kth[row])
        return dist[:, :k], idx[:, :k]

    def _exact_row(self, q, k, radius):
        cand = np.asarray(self._tree.query_ball_point(q, radius * (1 + 1e-6) + 1e-12), dtype=np.int64)
        d = _dist(self.points[cand], q)
        order = np.lexsort((cand, d))[:k]
        return d[order], cand[order]

    def nearest(self, queries):
        """Nearest point in this index for each query (ties to lowest index)."""
        dist, idx = self.knn_batch(queries, 1)
        return dist[:, 0], idx[:, 0]

    def nearest_other(self):
        """For every indexed point, its nearest neighbour other than itself."""
        if self.n < 2:
            raise DataError("need at least 2 points")
        dist, idx = self.knn_batch(self.points, 2)
        own = np.arange(self.n)
        # a duplicate point with lower index can take slot 0 instead of self
        pick = np.where(idx[:, 0] == own, 1, 0)
        rows = np.arange(self.n)
        return dist[rows, pick], idx[rows, pick]

    def ball_query(self, center, r: float) -> np.ndarray:
        """Indices ``j`` with ``|p_j - center| < r`` in ascending order."""
        if r <= 0:
            raise DataError("ball radius must be positive")
        center = np.asarray(center, dtype=np.float64).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(center, r), dtype=np.int64)
        if len(cand) == 0:
            return cand
        keep = _dist(self.points[cand], center) < r
        return np.sort(cand[keep])


def knn(index: NeighborIndex, query, k: int) -> np.ndarray:
    return index.knn(query, k)


def ball_query(index: NeighborIndex, center, r: float) -> np.ndarray:
    return index.ball_query(center, r)


# --------------------------------------------------------------------------
# normals


def estimate_normals(cloud: PointCloud, k: int = 16) -> PointCloud:
    """PCA normals from each point plus its ``k`` nearest neighbours.

    Rank-deficient neighbourhoods (collinear or coincident points) get the
    fallback normal ``(0, 0, 1)`` and are marked in ``.degenerate``.
    """
    if k < 3:
        raise DataError("normal estimation needs k >= 3")
    if len(cloud) < k + 1:
        raise DataError(f"normal estimation with k={k} needs at least {k + 1} points")
    index = NeighborIndex(cloud)
    _, idx = index.knn_batch(cloud.points, k + 1)
    nbrs = cloud.points[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 0.0)
    degenerate = (scale <= 0) | (evals[:, 1] <= 1e-12 * scale)
    normals[degenerate] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(cloud.points, normals, degenerate)


# --------------------------------------------------------------------------
# sampling and filtering


def fps(cloud: PointCloud, n_samples: int, seed: int, first: int | None = None) -> np.ndarray:
    """Farthest point sampling.

    The first anchor is drawn uniformly from the seeded stream unless
    ``first`` is given.  Each later anchor maximises the distance to the
    chosen set; ``argmax`` takes the lowest index on ties.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if n_samples > n:
        raise DataError(f"cannot sample {n_samples} anchors from {n} points")
    if n_samples < 1:
        raise DataError("need at least one anchor")
    if first is None:
        first = int(generator(seed, "fps").integers(n))
    chosen = np.empty(n_samples, dtype=np.int64)
    chosen[0] = first
    mind = _dist(pts, pts[first])
    for i in range(1, n_samples):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.minimum(mind, _dist(pts, pts[nxt]), out=mind)
    return chosen


def voxel_keys(points: np.ndarray, size: float, origin=None) -> np.ndarray:
    """Integer voxel coordinates of each point on a grid anchored at ``origin``
    (default: the points' min corner)."""
    if size <= 0:
        raise DataError("voxel size must be positive")
    if origin is None:
        origin = points.min(axis=0)
    return np.floor((points - origin) / size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel, placed at the centroid of its members."""
    keys = voxel_keys(cloud.points, voxel)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    return PointCloud(sums / counts[:, None])
