"""Boundary-fitted triangulations of the hold-all domain and the exterior ball.

Meshes are produced by Shewchuk's Triangle (constrained Delaunay with quality
bounds) and graded towards the fitted inclusion boundaries by repeated local
refinement against a sizing function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import triangle

from .errors import ArgumentError, GeometryError, LookupError_

# region tags (per triangle)
MATRIX = 0
INCLUSION = 1
HOLE = 2

# boundary markers (per edge)
OUTER = 1
INTERFACE = 2
HOLE_BOUNDARY = 3

REGION_NAMES = {MATRIX: "MATRIX", INCLUSION: "INCLUSION", HOLE: "HOLE"}
MARKER_NAMES = {OUTER: "OUTER", INTERFACE: "INTERFACE", HOLE_BOUNDARY: "HOLE_BOUNDARY"}


@dataclass(frozen=True)
class InclusionShape:
    """Reference inclusion ``omega`` (origin-centred) placed as ``z + eps*omega``.

    ``params`` holds the radius for a disk, the semi-axes ``(a, b)`` for an
    ellipse and a tuple of vertex pairs for a polygon.  Curved shapes are
    polygonized with ``n_seg`` segments; that polygon *is* the inclusion for
    every solver in the package.
    """

    kind: str
    params: tuple
    center: tuple = (0.0, 0.0)
    scale: float = 1.0
    n_seg: int = 64

    def __post_init__(self):
        if self.kind not in ("disk", "ellipse", "polygon"):
            raise ArgumentError(f"unknown inclusion kind {self.kind!r}")
        if not self.scale > 0:
            raise ArgumentError("inclusion scale must be positive")
        if self.n_seg < 3:
            raise ArgumentError("n_seg must be >= 3")
        ref = self.reference_polygon()
        if not _point_in_polygon(np.zeros((1, 2)), ref)[0]:
            raise GeometryError("origin must lie strictly inside the reference shape")
        if self.kind == "polygon" and not _is_simple(ref):
            raise GeometryError("polygon is self-intersecting")

    @classmethod
    def disk(cls, radius=1.0, **kw):
        return cls("disk", (float(radius),), **kw)

    @classmethod
    def ellipse(cls, a, b, **kw):
        return cls("ellipse", (float(a), float(b)), **kw)

    @classmethod
    def polygon(cls, vertices, **kw):
        return cls("polygon", tuple((float(x), float(y)) for x, y in vertices), **kw)

    def placed(self, center, scale):
        return InclusionShape(self.kind, self.params, (float(center[0]), float(center[1])),
                              float(scale), self.n_seg)

    def reference_polygon(self) -> np.ndarray:
        """Counter-clockwise vertices of the unscaled, origin-centred polygon."""
        if self.kind == "polygon":
            p = np.asarray(self.params, dtype=float)
            if _signed_area(p) < 0:
                p = p[::-1].copy()
            return p
        t = 2.0 * np.pi * np.arange(self.n_seg) / self.n_seg
        if self.kind == "disk":
            a = b = self.params[0]
        else:
            a, b = self.params
        return np.column_stack([a * np.cos(t), b * np.sin(t)])

    def polygon_vertices(self) -> np.ndarray:
        return np.asarray(self.center) + self.scale * self.reference_polygon()

    def area(self) -> float:
        return self.scale**2 * _signed_area(self.reference_polygon())

    def diameter(self) -> float:
        p = self.polygon_vertices()
        d = p[:, None, :] - p[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())

    def contains(self, points) -> np.ndarray:
        return _point_in_polygon(np.atleast_2d(points), self.polygon_vertices())

    def boundary_distance(self, points) -> np.ndarray:
        p = self.polygon_vertices()
        return _segments_distance(np.atleast_2d(points), p, np.roll(p, -1, axis=0))

    def key(self):
        return (self.kind, self.params, self.n_seg)


@dataclass(eq=False)
class Mesh2D:
    """Conforming triangulation with per-triangle region tags.

    ``shape_id`` records which fitted shape (index into the list passed to the
    builder) contains each triangle, -1 for the background.  Boundary and
    interface edges are derived from the connectivity and the region tags.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    region: np.ndarray
    shape_id: np.ndarray
    domain: tuple = ("rect", (0.0, 1.0, 0.0, 1.0))
    shapes: tuple = ()

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.region = np.ascontiguousarray(self.region, dtype=np.int8)
        self.shape_id = np.ascontiguousarray(self.shape_id, dtype=np.int64)
        for a in (self.vertices, self.triangles, self.region, self.shape_id):
            a.flags.writeable = False

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Constant gradients of the three hat functions, shape (M, 3, 2)."""
        p = self.vertices[self.triangles]
        x, y = p[..., 0], p[..., 1]
        two_a = 2.0 * self.signed_areas
        g = np.empty((self.n_triangles, 3, 2))
        g[:, 0, 0] = y[:, 1] - y[:, 2]
        g[:, 1, 0] = y[:, 2] - y[:, 0]
        g[:, 2, 0] = y[:, 0] - y[:, 1]
        g[:, 0, 1] = x[:, 2] - x[:, 1]
        g[:, 1, 1] = x[:, 0] - x[:, 2]
        g[:, 2, 1] = x[:, 1] - x[:, 0]
        return g / two_a[:, None, None]

    @cached_property
    def _edge_data(self):
        t = self.triangles
        e = np.concatenate([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]])
        e.sort(axis=1)
        edges, inv, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
        inv = inv.reshape(3, -1).T  # (M, 3): local edge k is opposite vertex k
        owner = np.full((len(edges), 2), -1, dtype=np.int64)
        tri_ids = np.tile(np.arange(len(t)), 3)
        flat = inv.T.ravel()
        order = np.argsort(flat, kind="stable")
        fs, ts = flat[order], tri_ids[order]
        first = np.ones(len(fs), dtype=bool)
        first[1:] = fs[1:] != fs[:-1]
        owner[fs[first], 0] = ts[first]
        owner[fs[~first], 1] = ts[~first]
        return edges, inv, counts, owner

    @property
    def edges(self) -> np.ndarray:
        return self._edge_data[0]

    @property
    def edge_triangles(self) -> np.ndarray:
        """(E, 2) adjacent triangle ids, second column -1 on the boundary."""
        return self._edge_data[3]

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)

    @cached_property
    def h_max(self) -> float:
        return float(self.edge_lengths.max())

    @cached_property
    def triangle_hmax(self) -> np.ndarray:
        return self.edge_lengths[self._edge_data[1]].max(axis=1)

    @cached_property
    def boundary_edges(self):
        """Marked edges as ``(edges (B, 2), markers (B,))``."""
        edges, _, counts, owner = self._edge_data
        outer = counts == 1
        two = owner[:, 1] >= 0
        ra = self.region[owner[:, 0]]
        rb = np.where(two, self.region[np.maximum(owner[:, 1], 0)], ra)
        sa = self.shape_id[owner[:, 0]]
        sb = np.where(two, self.shape_id[np.maximum(owner[:, 1], 0)], sa)
        iface = two & ((ra != rb) | (sa != sb))
        hole = iface & ((ra == HOLE) | (rb == HOLE))
        markers = np.zeros(len(edges), dtype=np.int8)
        markers[outer] = OUTER
        markers[iface] = INTERFACE
        markers[hole] = HOLE_BOUNDARY
        keep = markers > 0
        return edges[keep], markers[keep]

    def marked_vertices(self, marker: int) -> np.ndarray:
        edges, markers = self.boundary_edges
        if marker not in MARKER_NAMES:
            raise ArgumentError(f"unknown boundary marker {marker!r}")
        return np.unique(edges[markers == marker])

    def interface_edges(self) -> np.ndarray:
        edges, markers = self.boundary_edges
        return edges[(markers == INTERFACE) | (markers == HOLE_BOUNDARY)]

    def with_regions(self, region) -> "Mesh2D":
        """Same vertices and triangles, new region tags."""
        return Mesh2D(self.vertices, self.triangles, np.asarray(region), self.shape_id,
                      self.domain, self.shapes)

    def toggle_shape(self, sid: int, tag: int) -> "Mesh2D":
        region = np.array(self.region)
        region[self.shape_id == sid] = tag
        return self.with_regions(region)

    def region_area(self, tags) -> float:
        tags = np.atleast_1d(tags)
        return float(self.areas[np.isin(self.region, tags)].sum())

    def check(self, tol: float = 1e-12) -> None:
        """Raise GeometryError unless areas are positive and the mesh is conforming."""
        if np.any(self.signed_areas <= 0):
            raise GeometryError("triangle with non-positive signed area")
        edges, _, counts, _ = self._edge_data
        if np.any(counts > 2):
            raise GeometryError("edge shared by more than two triangles")
        bnd = edges[counts == 1].ravel()
        if not np.all(self.on_outer_boundary(self.vertices[bnd], tol=1e-9)):
            raise GeometryError("boundary edge away from the domain boundary (hanging node)")
        # every interface edge lies on some fitted polygon
        ie = self.interface_edges()
        if len(ie) and self.shapes:
            pts = self.vertices[ie.ravel()]
            d = np.min([s.boundary_distance(pts) for s in self.shapes], axis=0)
            if d.max() > tol * max(1.0, float(np.abs(self.vertices).max())):
                raise GeometryError("interface edge not on a polygonized inclusion boundary")

    def on_outer_boundary(self, pts, tol=1e-9) -> np.ndarray:
        kind, data = self.domain
        pts = np.atleast_2d(pts)
        if kind == "rect":
            x0, x1, y0, y1 = data
            s = tol * max(x1 - x0, y1 - y0)
            return ((np.abs(pts[:, 0] - x0) < s) | (np.abs(pts[:, 0] - x1) < s)
                    | (np.abs(pts[:, 1] - y0) < s) | (np.abs(pts[:, 1] - y1) < s))
        R, n_out = data
        # points lie on the inscribed polygon of the outer circle
        r = np.linalg.norm(pts, axis=1)
        return r >= R * math.cos(math.pi / n_out) * (1 - tol)

    def local_h(self, tri: int) -> float:
        return float(self.triangle_hmax[tri])


# ---------------------------------------------------------------------------
# geometry helpers


def _signed_area(p) -> float:
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _point_in_polygon(pts, poly) -> np.ndarray:
    x, y = pts[:, 0:1], pts[:, 1:2]
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    cond = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    return (np.count_nonzero(cond & (x < xint), axis=1) % 2) == 1


def _segments_distance(pts, a, b) -> np.ndarray:
    """Distance from each point to the closest of the segments ``a[k]b[k]``."""
    out = np.full(len(pts), np.inf)
    d = b - a
    dd = (d**2).sum(1)
    for start in range(0, len(pts), 4096):
        p = pts[start:start + 4096, None, :]
        t = np.clip(((p - a) * d).sum(-1) / dd, 0.0, 1.0)
        c = a + t[..., None] * d
        out[start:start + 4096] = np.sqrt(((p - c) ** 2).sum(-1)).min(axis=1)
    return out


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def _is_simple(poly) -> bool:
    n = len(poly)
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]):
                return False
    return True


def _subdivide(poly, hmax):
    """Split each polygon edge into equal collinear pieces no longer than hmax."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        k = max(1, int(math.ceil(np.linalg.norm(b - a) / hmax - 1e-9)))
        for j in range(k):
            out.append(a + (b - a) * (j / k))
    return np.array(out)


def _shapes_overlap(s1: InclusionShape, s2: InclusionShape) -> bool:
    p1, p2 = s1.polygon_vertices(), s2.polygon_vertices()
    if s1.contains(p2[:1])[0] or s2.contains(p1[:1])[0]:
        return True
    d = _segments_distance(p1, p2, np.roll(p2, -1, axis=0))
    return bool(d.min() <= 0.0)


# ---------------------------------------------------------------------------
# mesh generation

_QUALITY = "pq30Q"


@dataclass
class Sizing:
    """Target edge length: ``min(h, h_i + (grading-1) * dist_i)`` over features."""

    h: float
    grading: float = 1.25
    features: list = field(default_factory=list)  # (distance callable, local h)

    def __call__(self, pts) -> np.ndarray:
        out = np.full(len(pts), self.h)
        for dist, hloc in self.features:
            out = np.minimum(out, hloc + (self.grading - 1.0) * dist(pts))
        return out


def _triangulate(vertices, segments, sizing: Sizing, max_iter=40):
    h0 = sizing.h
    t = triangle.triangulate(dict(vertices=vertices, segments=segments),
                             f"{_QUALITY}a{0.43 * h0 * h0:.17g}")
    for _ in range(max_iter):
        v, tri = t["vertices"], t["triangles"]
        p = v[tri]
        lens = np.stack([np.linalg.norm(p[:, 1] - p[:, 2], axis=1),
                         np.linalg.norm(p[:, 2] - p[:, 0], axis=1),
                         np.linalg.norm(p[:, 0] - p[:, 1], axis=1)], axis=1).max(axis=1)
        target = sizing(v)[tri].min(axis=1)
        bad = lens > target * (1 + 1e-9)
        if not bad.any():
            break
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        max_area = np.where(bad, area * (target / lens) ** 2 * 0.8, -1.0)
        t = triangle.triangulate(dict(vertices=v, triangles=tri, segments=t["segments"],
                                      triangle_max_area=max_area), "r" + _QUALITY + "a")
    return t["vertices"], t["triangles"]


def _classify(vertices, triangles, shapes, tag):
    c = vertices[triangles].mean(axis=1)
    sid = np.full(len(triangles), -1, dtype=np.int64)
    for k, s in enumerate(shapes):
        sid[s.contains(c)] = k
    region = np.where(sid >= 0, tag, MATRIX).astype(np.int8)
    return region, sid


def build_rect_mesh(bounds: Sequence[float], h: float, fitted: Sequence[InclusionShape] = (),
                    interface_ratio: float = 16.0, grading: float = 1.25,
                    refine_points: Sequence = (), check_clearance: bool = True) -> Mesh2D:
    """Triangulate the rectangle ``(x0, x1, y0, y1)`` fitted to ``fitted`` shapes.

    Interface edges are no longer than ``min(h, diam/interface_ratio)``; for a
    unit disk scaled by eps and the default ratio this is eps/8.
    ``refine_points`` is a list of ``(point, local_h)`` pairs that get the
    same graded treatment (used to resolve gradient-recovery patches).
    """
    if not h > 0:
        raise ArgumentError("h must be positive")
    x0, x1, y0, y1 = map(float, bounds)
    if not (x1 > x0 and y1 > y0):
        raise ArgumentError("degenerate bounds")
    shapes = list(fitted)
    rect = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    for i, s in enumerate(shapes):
        p = s.polygon_vertices()
        clear = min(p[:, 0].min() - x0, x1 - p[:, 0].max(), p[:, 1].min() - y0, y1 - p[:, 1].max())
        need = 2 * h if check_clearance else 0.0
        if clear <= need:
            raise GeometryError(f"shape {i} not inside bounds with clearance {need:g}")
        for j in range(i):
            if _shapes_overlap(s, shapes[j]):
                raise GeometryError(f"shapes {j} and {i} overlap")

    sizing = Sizing(h, grading)
    pieces = [_subdivide(rect, h)]
    for s in shapes:
        hi = min(h, s.diameter() / interface_ratio)
        pieces.append(_subdivide(s.polygon_vertices(), hi))
        sizing.features.append((s.boundary_distance, hi))
    for pt, hloc in refine_points:
        c = np.asarray(pt, dtype=float)
        sizing.features.append((lambda q, c=c: np.linalg.norm(q - c, axis=1), float(hloc)))
    verts, segs, off = [], [], 0
    for piece in pieces:
        n = len(piece)
        verts.append(piece)
        segs.append(np.column_stack([np.arange(n), (np.arange(n) + 1) % n]) + off)
        off += n
    v, t = _triangulate(np.vstack(verts), np.vstack(segs), sizing)
    region, sid = _classify(v, t, shapes, INCLUSION)
    return Mesh2D(v, t, region, sid, ("rect", (x0, x1, y0, y1)), tuple(shapes))


def build_ball_mesh(R: float, shape: InclusionShape, grading: float = 1.2,
                    h_interface: float = 0.05, h_cap: float | None = None) -> Mesh2D:
    """Mesh of B_R(0) fitted to ``shape`` (placed at the origin with unit scale).

    Edge length grows geometrically by ``grading`` per layer away from the
    inclusion boundary, so the vertex count grows only logarithmically in R.
    """
    if shape.center != (0.0, 0.0) or shape.scale != 1.0:
        shape = shape.placed((0.0, 0.0), 1.0)
    diam = shape.diameter()
    if R < 5 * diam:
        raise ArgumentError(f"truncation radius {R} below 5*diam(omega) = {5 * diam:g}")
    if grading < 1:
        raise ArgumentError("grading must be >= 1")
    sizing = Sizing(h_cap if h_cap is not None else R / 4.0, grading,
                    [(shape.boundary_distance, h_interface)])
    rmax = np.linalg.norm(shape.polygon_vertices(), axis=1).max()
    h_out = float(sizing(np.array([[R, 0.0]]))[0])
    h_out = min(h_out, h_interface + (grading - 1) * (R - rmax))
    n_out = max(64, int(math.ceil(2 * math.pi * R / h_out)))
    a = 2 * math.pi * np.arange(n_out) / n_out
    outer = R * np.column_stack([np.cos(a), np.sin(a)])
    inner = _subdivide(shape.polygon_vertices(), h_interface)
    n_in = len(inner)
    segs = np.vstack([
        np.column_stack([np.arange(n_out), (np.arange(n_out) + 1) % n_out]),
        np.column_stack([np.arange(n_in), (np.arange(n_in) + 1) % n_in]) + n_out,
    ])
    v, t = _triangulate(np.vstack([outer, inner]), segs, sizing)
    region, sid = _classify(v, t, [shape], INCLUSION)
    return Mesh2D(v, t, region, sid, ("ball", (float(R), n_out)), (shape,))


def refine_uniform(mesh: Mesh2D) -> Mesh2D:
    """Split every triangle into four similar children (edge midpoints)."""
    edges, inv, _, _ = mesh._edge_data
    nv = mesh.n_vertices
    mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    v = np.vstack([mesh.vertices, mid])
    t = mesh.triangles
    m0, m1, m2 = (inv[:, 0] + nv, inv[:, 1] + nv, inv[:, 2] + nv)  # opposite v0, v1, v2
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    children = np.concatenate([
        np.column_stack([a, m2, m1]),
        np.column_stack([m2, b, m0]),
        np.column_stack([m1, m0, c]),
        np.column_stack([m0, m1, m2]),
    ])
    rep = lambda x: np.concatenate([x, x, x, x])  # noqa: E731
    return Mesh2D(v, children, rep(mesh.region), rep(mesh.shape_id), mesh.domain, mesh.shapes)


def locate_point(mesh: Mesh2D, x, tol: float = 1e-12):
    """Return ``(triangle id, barycentric coordinates)`` of point ``x``.

    On shared edges and vertices the lowest triangle id wins.
    """
    x = np.asarray(x, dtype=float)
    p = mesh.vertices[mesh.triangles]
    g = mesh.basis_gradients
    lam = ((x - p[:, 0])[:, None, :] * g).sum(-1)
    lam[:, 0] = 1.0 - lam[:, 1] - lam[:, 2]
    ok = np.flatnonzero((lam >= -tol).all(axis=1))
    if len(ok) == 0:
        raise LookupError_(f"point {x.tolist()} outside the mesh")
    k = int(ok[0])
    b = np.clip(lam[k], 0.0, 1.0)
    return k, b / b.sum()
