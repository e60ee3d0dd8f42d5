"""Synthetic reference surfaces.

Stand-ins for scanned or mesh-sampled reference models: each generator draws
points approximately uniformly by area from a closed-form surface, then the
cloud is randomly rotated and normalised into the unit sphere.
"""

import numpy as np

from .cloud import PointCloud, normalize_unit_sphere
from .rng import generator


def _rejection(rng, n, draw, weight, wmax):
    out = []
    have = 0
    while have < n:
        cand = draw(2 * n)
        keep = rng.random(len(cand)) * wmax < weight(cand)
        out.append(cand[keep])
        have += int(keep.sum())
    return np.concatenate(out)[:n]


def sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def ellipsoid(rng, n, axes=(1.0, 0.7, 0.45)):
    a = np.asarray(axes)

    def draw(m):
        return sphere(rng, m)

    def weight(u):
        # area element of x = a*u relative to the unit sphere
        return np.sqrt(((u / a) ** 2).sum(axis=1)) * np.prod(a)

    u = _rejection(rng, n, draw, weight, np.prod(a) / a.min())
    return u * a


def torus(rng, n, major=1.0, minor=0.35):
    def draw(m):
        return rng.random((m, 2)) * 2 * np.pi

    def weight(uv):
        return major + minor * np.cos(uv[:, 1])

    uv = _rejection(rng, n, draw, weight, major + minor)
    u, v = uv[:, 0], uv[:, 1]
    r = major + minor * np.cos(v)
    return np.column_stack([r * np.cos(u), r * np.sin(u), minor * np.sin(v)])


def box(rng, n, size=(1.0, 0.8, 0.5)):
    s = np.asarray(size)
    areas = np.array([s[1] * s[2], s[0] * s[2], s[0] * s[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = (rng.random((n, 3)) - 0.5) * s
    axis = face % 3
    sign = np.where(face < 3, 0.5, -0.5)
    pts[np.arange(n), axis] = sign * s[axis]
    return pts


def cylinder(rng, n, radius=0.5, height=1.4):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.random(n) * 2 * np.pi
    pts = np.empty((n, 3))
    s = which == 0
    pts[s] = np.column_stack([radius * np.cos(theta[s]), radius * np.sin(theta[s]),
                              (rng.random(s.sum()) - 0.5) * height])
    c = ~s
    rr = radius * np.sqrt(rng.random(c.sum()))
    pts[c] = np.column_stack([rr * np.cos(theta[c]), rr * np.sin(theta[c]),
                              np.where(which[c] == 1, 0.5, -0.5) * height])
    return pts


def wave(rng, n, amp=0.15, freq=3.0):
    """Height field z = amp*sin(freq*x)*cos(freq*y) over [-1, 1]^2."""

    def draw(m):
        return rng.uniform(-1, 1, size=(m, 2))

    def weight(xy):
        gx = amp * freq * np.cos(freq * xy[:, 0]) * np.cos(freq * xy[:, 1])
        gy = -amp * freq * np.sin(freq * xy[:, 0]) * np.sin(freq * xy[:, 1])
        return np.sqrt(1 + gx**2 + gy**2)

    xy = _rejection(rng, n, draw, weight, np.sqrt(1 + 2 * (amp * freq) ** 2))
    z = amp * np.sin(freq * xy[:, 0]) * np.cos(freq * xy[:, 1])
    return np.column_stack([xy, z])


def bumpy_sphere(rng, n, amp=0.12, lobes=4):
    u = sphere(rng, 4 * n)
    theta = np.arccos(np.clip(u[:, 2], -1, 1))
    phi = np.arctan2(u[:, 1], u[:, 0])
    r = 1 + amp * np.sin(lobes * theta) * np.cos(lobes * phi)
    pts = u * r[:, None]
    # crude area correction: density on the unit sphere maps through r^2
    keep = rng.random(len(pts)) * (1 + amp) ** 2 < r**2
    return pts[keep][:n]


def cone(rng, n, radius=0.6, height=1.2):
    slant = np.hypot(radius, height)
    side = np.pi * radius * slant
    base = np.pi * radius**2
    on_side = rng.random(n) < side / (side + base)
    theta = rng.random(n) * 2 * np.pi
    t = np.sqrt(rng.random(n))  # area grows linearly with distance from apex
    rr = np.where(on_side, radius * t, radius * np.sqrt(rng.random(n)))
    z = np.where(on_side, height * (1 - t), 0.0) - height / 3
    return np.column_stack([rr * np.cos(theta), rr * np.sin(theta), z])


SHAPES = {
    "sphere": sphere,
    "ellipsoid": ellipsoid,
    "torus": torus,
    "box": box,
    "cylinder": cylinder,
    "wave": wave,
    "bumpy_sphere": bumpy_sphere,
    "cone": cone,
}


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def make_reference(shape: str, n_points: int, seed: int) -> PointCloud:
    rng = generator(seed, "shape", shape)
    pts = SHAPES[shape](rng, n_points)
    pts = pts @ random_rotation(rng).T
    return normalize_unit_sphere(PointCloud(pts))


def make_references(count: int, n_points: int, seed: int):
    """``count`` references cycling through the shape catalogue; returns a
    list of ``(name, cloud)``."""
    names = list(SHAPES)
    refs = []
    for i in range(count):
        shape = names[i % len(names)]
        refs.append((f"{shape}_{i:02d}", make_reference(shape, n_points, seed + i)))
    return refs
