"""Geometric distortion synthesis.

Twenty-five generatable distortion types: seven base types (four noises,
three compression/downsampling operators), six noise pairs, and twelve
compression+noise pairs.  Every magnitude is expressed in units of the
reference's average nearest-neighbour edge length ``l_r``.  All operators
are pure functions of ``(cloud, params, seed)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cloud import PointCloud, avg_nn_edge_length, save_cloud, voxel_keys
from .errors import DataError, UnsupportedDistortionError
from .rng import derive_seed, generator

BASE_TYPES = ("GN", "UN", "IN", "EN", "OC", "RD", "GD")
NOISE_PAIRS = {
    "GU": ("GN", "UN"),
    "GI": ("GN", "IN"),
    "GE": ("GN", "EN"),
    "UI": ("UN", "IN"),
    "UE": ("UN", "EN"),
    "IE": ("IN", "EN"),
}
_NOISE_LETTER = {"G": "GN", "U": "UN", "I": "IN", "E": "EN"}
COMPRESSION_COMBOS = {
    comp + letter: (comp, noise)
    for comp in ("OC", "RD", "GD")
    for letter, noise in _NOISE_LETTER.items()
}
COMBOS = {**NOISE_PAIRS, **COMPRESSION_COMBOS}
GENERATABLE = BASE_TYPES + tuple(NOISE_PAIRS) + tuple(COMPRESSION_COMBOS)
EXTERNAL_ONLY = ("SD",)
ALL_TYPES = GENERATABLE + EXTERNAL_ONLY

# parameter name and the values (multiples of l_r, RD as a fraction) at L=10
PARAM_NAMES = {
    "GN": "sigma",
    "UN": "half_range",
    "IN": "intensity",
    "EN": "mean",
    "OC": "resolution",
    "RD": "fraction_removed",
    "GD": "grid_res",
}
_GN = (0.1, 0.167, 0.233, 0.3, 0.367, 0.433, 0.5, 0.567, 0.633, 0.7)
_UN = (0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 1.7, 1.9, 2.1)
PAPER_SCHEDULE = {
    "GN": _GN,
    "UN": _UN,
    "IN": _UN,
    "EN": _GN,
    "OC": (0.01, 0.0117, 0.0133, 0.015, 0.0167, 0.0183, 0.02, 0.0217, 0.0233, 0.025),
    "RD": (0.15, 0.211, 0.272, 0.333, 0.394, 0.456, 0.517, 0.578, 0.639, 0.70),
    "GD": (1.2, 1.34, 1.49, 1.63, 1.78, 1.92, 2.06, 2.21, 2.36, 2.5),
}
DEFAULT_LEVELS = 10


@dataclass(frozen=True)
class DistortionSpec:
    dtype: str
    level: int
    params: dict = field(compare=True)
    seed: int


@dataclass
class RankedList:
    reference: PointCloud
    items: list  # [(cloud, level, spec or None for the pristine item)]
    dtype: str = ""

    @property
    def ranks(self):
        return list(range(len(self.items)))

    @property
    def clouds(self):
        return [c for c, _, _ in self.items]


def check_type(dtype: str) -> None:
    if dtype in EXTERNAL_ONLY:
        raise UnsupportedDistortionError(
            f"{dtype} is an external-only distortion; supply its clouds through the manifest")
    if dtype not in GENERATABLE:
        raise DataError(f"unknown distortion type {dtype!r}")


def _base_value(base: str, level: int, L: int) -> float:
    table = PAPER_SCHEDULE[base]
    if L == len(table):
        return table[level - 1]
    if L == 1:
        return table[0]
    # other level counts interpolate linearly between the same endpoints
    return table[0] + (table[-1] - table[0]) * (level - 1) / (L - 1)


def level_param(dtype: str, level: int, l_r: float, L: int = DEFAULT_LEVELS) -> dict:
    """Resolved parameters for ``dtype`` at ``level`` (1-based) of ``L``.

    Returns ``{base_type: {param_name: value}}`` with one entry per
    constituent, in application order.  Magnitudes are absolute (scaled by
    ``l_r``) except the RD removal fraction.
    """
    check_type(dtype)
    if not 1 <= level <= L:
        raise DataError(f"level {level} outside 1..{L}")
    if l_r <= 0:
        raise DataError("l_r must be positive")
    out = {}
    for base in COMBOS.get(dtype, (dtype,)):
        value = _base_value(base, level, L)
        if base != "RD":
            value *= l_r
        out[base] = {PARAM_NAMES[base]: value}
    return out


# --------------------------------------------------------------------------
# base operators


def apply_gaussian(cloud: PointCloud, sigma: float, seed: int) -> PointCloud:
    if sigma < 0:
        raise DataError("sigma must be >= 0")
    if sigma == 0:
        return PointCloud(cloud.points)
    rng = generator(seed, "GN")
    return PointCloud(cloud.points + rng.normal(0.0, sigma, size=cloud.points.shape))


def apply_uniform(cloud: PointCloud, half_range: float, seed: int) -> PointCloud:
    if half_range < 0:
        raise DataError("half_range must be >= 0")
    if half_range == 0:
        return PointCloud(cloud.points)
    rng = generator(seed, "UN")
    return PointCloud(cloud.points + rng.uniform(-half_range, half_range, size=cloud.points.shape))


def impulse_subsets(n: int, seed: int):
    """Disjoint (positive, negative) index sets of floor(0.1 n) points each."""
    m = n // 10
    if m < 1:
        raise DataError(f"impulse noise needs at least 10 points, got {n}")
    perm = generator(seed, "IN").permutation(n)
    return np.sort(perm[:m]), np.sort(perm[m:2 * m])


def apply_impulse(cloud: PointCloud, intensity: float, seed: int) -> PointCloud:
    pos, neg = impulse_subsets(len(cloud), seed)
    pts = cloud.points.copy()
    pts[pos] += intensity
    pts[neg] -= intensity
    return PointCloud(pts)


def apply_exponential(cloud: PointCloud, mean: float, seed: int) -> PointCloud:
    if mean <= 0:
        raise DataError("exponential mean must be > 0")
    rng = generator(seed, "EN")
    return PointCloud(cloud.points + rng.exponential(mean, size=cloud.points.shape))


def apply_octree_compress(cloud: PointCloud, resolution: float) -> PointCloud:
    """Quantise to cell centres of a cubic grid anchored at the min corner and
    merge coincident results."""
    origin = cloud.points.min(axis=0)
    keys = np.unique(voxel_keys(cloud.points, resolution, origin), axis=0)
    return PointCloud(origin + (keys + 0.5) * resolution)


def survivor_count(n: int, fraction_removed: float) -> int:
    # guard against (1 - 0.7) * 1000 = 300.00000000000006
    return int(math.ceil((1.0 - fraction_removed) * n - 1e-9))


def apply_random_downsample(cloud: PointCloud, fraction_removed: float, seed: int) -> PointCloud:
    if not 0 <= fraction_removed < 1:
        raise DataError("fraction_removed must be in [0, 1)")
    n = len(cloud)
    keep = survivor_count(n, fraction_removed)
    if keep >= n:
        return PointCloud(cloud.points)
    idx = np.sort(generator(seed, "RD").choice(n, size=keep, replace=False))
    return PointCloud(cloud.points[idx])


def apply_grid_downsample(cloud: PointCloud, grid_res: float) -> PointCloud:
    """Keep, per occupied grid cell, the input point nearest the cell's
    centroid (lowest index on ties)."""
    keys = voxel_keys(cloud.points, grid_res)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]
    d = np.sqrt(((cloud.points - centroids[inverse]) ** 2).sum(axis=1))
    idx = np.arange(len(cloud))
    order = np.lexsort((idx, d, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order][1:] != inverse[order][:-1]
    return PointCloud(cloud.points[np.sort(order[first])])


def _apply_base(cloud, base, params, seed):
    p = params[PARAM_NAMES[base]]
    if base == "GN":
        return apply_gaussian(cloud, p, seed)
    if base == "UN":
        return apply_uniform(cloud, p, seed)
    if base == "IN":
        return apply_impulse(cloud, p, seed)
    if base == "EN":
        return apply_exponential(cloud, p, seed)
    if base == "OC":
        return apply_octree_compress(cloud, p)
    if base == "RD":
        return apply_random_downsample(cloud, p, seed)
    if base == "GD":
        return apply_grid_downsample(cloud, p)
    raise DataError(f"unknown base distortion {base!r}")


def sub_seeds(seed: int):
    return derive_seed(seed, "first"), derive_seed(seed, "second")


def split_combo(spec: DistortionSpec):
    """The two constituent specs of a combo, carrying their derived seeds."""
    first, second = COMBOS[spec.dtype]
    s1, s2 = sub_seeds(spec.seed)
    return (DistortionSpec(first, spec.level, {first: spec.params[first]}, s1),
            DistortionSpec(second, spec.level, {second: spec.params[second]}, s2))


def apply_combo(cloud: PointCloud, first: DistortionSpec, second: DistortionSpec, seed: int) -> PointCloud:
    """Apply ``first`` then ``second``; each gets a sub-seed derived from
    ``seed`` (the constituents' own seed fields are not used)."""
    if first.level != second.level:
        raise DataError("combo constituents must share a level")
    s1, s2 = sub_seeds(seed)
    out = apply_spec(cloud, replace(first, seed=s1))
    return apply_spec(out, replace(second, seed=s2))


def apply_spec(cloud: PointCloud, spec: DistortionSpec) -> PointCloud:
    if spec.dtype in COMBOS:
        first, second = split_combo(spec)
        return apply_combo(cloud, first, second, spec.seed)
    check_type(spec.dtype)
    return _apply_base(cloud, spec.dtype, spec.params[spec.dtype], spec.seed)


# --------------------------------------------------------------------------
# lists and datasets


def make_spec(dtype: str, level: int, l_r: float, seed: int, L: int = DEFAULT_LEVELS) -> DistortionSpec:
    return DistortionSpec(dtype, level, level_param(dtype, level, l_r, L), derive_seed(seed, dtype, level))


def generate_list(reference: PointCloud, dtype: str, L: int = DEFAULT_LEVELS, seed: int = 0,
                  l_r: float | None = None) -> RankedList:
    """Pristine reference followed by its ``L`` degraded versions."""
    check_type(dtype)
    if l_r is None:
        l_r = avg_nn_edge_length(reference)
    items = [(reference, 0, None)]
    for level in range(1, L + 1):
        spec = make_spec(dtype, level, l_r, seed, L)
        items.append((apply_spec(reference, spec), level, spec))
    return RankedList(reference, items, dtype)


def generate_dataset(references, dtypes, L: int, out_dir, seed: int, name: str = "lrl"):
    """Write every distorted cloud plus one pristine copy per reference under
    ``out_dir`` and return the :class:`~gqa.manifest.Manifest`.

    ``references`` is a sequence of ``(ref_id, PointCloud)``.  Clouds are
    stored as ascii ply; the manifest is not written here.
    """
    from .manifest import LevelEntry, ListEntry, Manifest, ReferenceEntry

    for dtype in dtypes:
        check_type(dtype)
    out_dir = Path(out_dir)
    ref_entries, list_entries = [], []
    for ref_id, cloud in references:
        ref_rel = f"refs/{ref_id}.ply"
        (out_dir / "refs").mkdir(parents=True, exist_ok=True)
        save_cloud(cloud, out_dir / ref_rel)
        l_r = avg_nn_edge_length(cloud)
        ref_entries.append(ReferenceEntry(ref_id, ref_rel, l_r, len(cloud)))
        ref_seed = derive_seed(seed, "ref", ref_id)
        for dtype in dtypes:
            ranked = generate_list(cloud, dtype, L, ref_seed, l_r)
            levels = [LevelEntry(0, ref_rel, {}, len(cloud))]
            cloud_dir = out_dir / "clouds" / ref_id
            cloud_dir.mkdir(parents=True, exist_ok=True)
            for degraded, level, spec in ranked.items[1:]:
                rel = f"clouds/{ref_id}/{dtype}_{level:02d}.ply"
                save_cloud(degraded, out_dir / rel)
                levels.append(LevelEntry(level, rel, spec.params, len(degraded)))
            list_entries.append(ListEntry(f"{ref_id}/{dtype}", ref_id, dtype, ref_seed, levels))
    return Manifest(name=name, seed=seed, levels=L, references=ref_entries, lists=list_entries,
                    root=out_dir)
