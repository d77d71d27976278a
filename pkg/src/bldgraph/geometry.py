"""Planar geometry: envelopes, centroids and Delaunay triangulation.

Coordinates are metric (projected, e.g. one UTM zone). The triangulation is
an incremental Bowyer-Watson variant that uses a symbolic vertex at infinity
("ghost" triangles) instead of a finite super-triangle, so the convex hull is
always complete.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "DegenerateGeometryError",
    "Point",
    "Polygon",
    "Envelope",
    "Triangulation",
    "buffered_envelope",
    "centroid",
    "delaunay",
    "triangulation_edges",
    "incircle",
    "orient2d",
]

# determinant tolerance for predicates, applied to coordinates rescaled to the unit box
PREDICATE_TOL = 1e-12

_GHOST = -1


class DegenerateGeometryError(ValueError):
    """Raised when input points cannot be triangulated (too few, collinear, duplicate)."""


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")


@dataclass(frozen=True)
class Polygon:
    """Simple polygon given by its (implicitly closed) vertex ring."""

    ring: tuple[Point, ...]

    def __post_init__(self):
        ring = tuple(p if isinstance(p, Point) else Point(*map(float, p)) for p in self.ring)
        # an explicitly closed ring (GeoJSON style) is accepted and trimmed
        if len(ring) > 1 and ring[0] == ring[-1]:
            ring = ring[:-1]
        if len(ring) < 3:
            raise ValueError(f"polygon needs at least 3 vertices, got {len(ring)}")
        for a, b in zip(ring, ring[1:] + ring[:1]):
            if a == b:
                raise ValueError(f"consecutive duplicate vertex {a}")
        object.__setattr__(self, "ring", ring)

    @classmethod
    def from_coords(cls, coords) -> "Polygon":
        return cls(tuple(Point(float(x), float(y)) for x, y in coords))

    def as_array(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self.ring], dtype=np.float64)

    def area(self) -> float:
        xy = self.as_array()
        x, y = xy[:, 0], xy[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def perimeter(self) -> float:
        xy = self.as_array()
        return float(np.linalg.norm(xy - np.roll(xy, -1, axis=0), axis=1).sum())


@dataclass(frozen=True)
class Envelope:
    min: Point
    max: Point

    def __post_init__(self):
        if self.min.x > self.max.x or self.min.y > self.max.y:
            raise ValueError(f"inverted envelope {self.min} / {self.max}")

    @property
    def width(self) -> float:
        return self.max.x - self.min.x

    @property
    def height(self) -> float:
        return self.max.y - self.min.y

    def contains(self, other: "Envelope") -> bool:
        return (self.min.x <= other.min.x and self.min.y <= other.min.y
                and self.max.x >= other.max.x and self.max.y >= other.max.y)


@dataclass(frozen=True)
class Triangulation:
    points: np.ndarray  # (n, 2) float64
    triangles: np.ndarray  # (t, 3) int, counter-clockwise


def buffered_envelope(polygon: Polygon, buffer: float) -> Envelope:
    """Axis-aligned bounding box of the polygon vertices grown by ``buffer`` on every side."""
    if buffer < 0:
        raise ValueError(f"buffer must be non-negative, got {buffer}")
    if not isinstance(polygon, Polygon):
        polygon = Polygon(tuple(polygon))
    xy = polygon.as_array()
    lo = xy.min(axis=0) - buffer
    hi = xy.max(axis=0) + buffer
    return Envelope(Point(float(lo[0]), float(lo[1])), Point(float(hi[0]), float(hi[1])))


def centroid(envelope: Envelope) -> Point:
    return Point((envelope.min.x + envelope.max.x) / 2.0, (envelope.min.y + envelope.max.y) / 2.0)


def orient2d(a, b, c):
    """Twice the signed area of (a, b, c); positive when counter-clockwise.

    Works element-wise on arrays of shape (..., 2).
    """
    a, b, c = np.asarray(a), np.asarray(b), np.asarray(c)
    return ((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
            - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))


def incircle(a, b, c, d):
    """In-circle determinant: positive when d lies inside the circumcircle of CCW (a, b, c)."""
    a, b, c, d = (np.asarray(v) for v in (a, b, c, d))
    adx, ady = a[..., 0] - d[..., 0], a[..., 1] - d[..., 1]
    bdx, bdy = b[..., 0] - d[..., 0], b[..., 1] - d[..., 1]
    cdx, cdy = c[..., 0] - d[..., 0], c[..., 1] - d[..., 1]
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    return (alift * (bdx * cdy - cdx * bdy)
            - blift * (adx * cdy - cdx * ady)
            + clift * (adx * bdy - bdx * ady))


def _as_xy(points) -> np.ndarray:
    if len(points) and isinstance(points[0], Point):
        xy = np.array([(p.x, p.y) for p in points], dtype=np.float64)
    else:
        xy = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(xy)):
        raise ValueError("points must be finite")
    return xy


class _TriangleStore:
    """Growable struct-of-arrays triangle pool with an alive mask."""

    def __init__(self, capacity: int):
        self.tri = np.empty((capacity, 3), dtype=np.int64)
        self.alive = np.zeros(capacity, dtype=bool)
        self.size = 0

    def add(self, a: int, b: int, c: int) -> None:
        if self.size == len(self.tri):
            self._compact_or_grow()
        self.tri[self.size] = (a, b, c)
        self.alive[self.size] = True
        self.size += 1

    def _compact_or_grow(self) -> None:
        keep = self.tri[: self.size][self.alive[: self.size]]
        cap = len(self.tri)
        if len(keep) > cap // 2:
            cap *= 2
        self.tri = np.empty((cap, 3), dtype=np.int64)
        self.alive = np.zeros(cap, dtype=bool)
        self.tri[: len(keep)] = keep
        self.alive[: len(keep)] = True
        self.size = len(keep)


def delaunay(points: Sequence[Point] | np.ndarray) -> Triangulation:
    """Delaunay triangulation of a planar point set.

    Points are inserted in input order. Cocircular configurations are
    resolved by that order (a point exactly on a circumcircle does not
    invalidate the triangle), so either diagonal of a cocircular quad may
    appear. Raises :class:`DegenerateGeometryError` for fewer than three
    points, all-collinear input or duplicate points.
    """
    xy = _as_xy(points)
    n = len(xy)
    if n < 3:
        raise DegenerateGeometryError(f"need at least 3 points, got {n}")

    # rescale to the unit box so the fixed predicate tolerance is meaningful
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    scale = float(max(hi - lo))
    if scale == 0.0:
        raise DegenerateGeometryError("all points coincide")
    p = (xy - (lo + hi) / 2.0) / scale

    seed = _initial_triangle(p)
    if seed is None:
        raise DegenerateGeometryError("all points are collinear")
    i, j, k = seed

    store = _TriangleStore(max(16, 4 * n))
    store.add(i, j, k)
    for u, v in ((i, j), (j, k), (k, i)):
        store.add(v, u, _GHOST)

    used = {i, j, k}
    for q in range(n):
        if q in used:
            continue
        _insert(store, p, q)

    tri = store.tri[: store.size][store.alive[: store.size]]
    tri = tri[(tri != _GHOST).all(axis=1)]
    # stable order: sort each triangle's rotation to start at its smallest index, then lexicographically
    rot = np.argmin(tri, axis=1)
    tri = np.stack([tri[np.arange(len(tri)), (rot + s) % 3] for s in range(3)], axis=1)
    tri = tri[np.lexsort((tri[:, 2], tri[:, 1], tri[:, 0]))]
    return Triangulation(points=xy, triangles=tri)


def _initial_triangle(p: np.ndarray):
    n = len(p)
    i = 0
    # first point distinct from p[0]
    d = np.abs(p - p[0]).max(axis=1)
    distinct = np.flatnonzero(d > 0)
    if len(distinct) == 0:
        return None
    j = int(distinct[0])
    o = orient2d(p[i], p[j], p)
    cand = np.flatnonzero(np.abs(o) > PREDICATE_TOL)
    if len(cand) == 0:
        return None
    k = int(cand[0])
    if o[k] < 0:
        j, k = k, j
    return i, j, k


def _insert(store: _TriangleStore, p: np.ndarray, q: int) -> None:
    tri = store.tri[: store.size]
    live = np.flatnonzero(store.alive[: store.size])
    t = tri[live]
    pt = p[q]

    ghost = t[:, 2] == _GHOST
    bad = np.zeros(len(t), dtype=bool)

    real = ~ghost
    if real.any():
        tr = t[real]
        det = incircle(p[tr[:, 0]], p[tr[:, 1]], p[tr[:, 2]], pt)
        bad[real] = det > PREDICATE_TOL

    if ghost.any():
        tg = t[ghost]
        a, b = p[tg[:, 0]], p[tg[:, 1]]
        o = orient2d(a, b, pt)
        # outside the hull edge, or on its supporting line strictly between the endpoints
        on_line = np.abs(o) <= PREDICATE_TOL
        proj = np.einsum("ij,ij->i", pt - a, b - a)
        seg = np.einsum("ij,ij->i", b - a, b - a)
        between = (proj > 0) & (proj < seg)
        bad[ghost] = (o > PREDICATE_TOL) | (on_line & between)

    if not bad.any():
        raise DegenerateGeometryError(f"point {q} duplicates an existing vertex")

    bad_idx = live[bad]
    directed = set()
    for a, b, c in tri[bad_idx]:
        directed.update(((a, b), (b, c), (c, a)))
    boundary = [e for e in directed if (e[1], e[0]) not in directed]
    if any(q in e for e in boundary):
        raise DegenerateGeometryError(f"point {q} duplicates an existing vertex")

    store.alive[bad_idx] = False
    for a, b in sorted(boundary):
        if a == _GHOST:
            store.add(b, q, _GHOST)
        elif b == _GHOST:
            store.add(q, a, _GHOST)
        else:
            store.add(a, b, q)


def triangulation_edges(t: Triangulation) -> list[tuple[int, int]]:
    """Unique undirected edges ``(i, j)`` with ``i < j``, sorted."""
    tri = np.asarray(t.triangles, dtype=np.int64).reshape(-1, 3)
    if len(tri) == 0:
        return []
    e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    e = np.unique(e, axis=0)
    return [(int(i), int(j)) for i, j in e]
