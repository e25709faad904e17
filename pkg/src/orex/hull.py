"""Bounding convex hull of the input contours.

The training volume is bounded by the convex hull of all contour vertices,
scaled up about its centroid; everything on that surface is known to be
outside the shape. Degenerate (coplanar) inputs fall back to an extruded
oriented bounding box.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .slices import CrossSectionSet, SliceError


class CoplanarPointsError(SliceError):
    """All contour vertices lie in one plane; a convex hull has no volume."""


@dataclass(frozen=True, eq=False)
class ConvexPolyhedron:
    """Closed convex triangle mesh with outward face normals."""

    vertices: np.ndarray  # (n, 3)
    faces: np.ndarray  # (m, 3) int, outward winding

    @cached_property
    def face_normals(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def face_offsets(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.face_normals, self.vertices[self.faces[:, 0]])

    @cached_property
    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
        )

    @cached_property
    def volume(self) -> float:
        tri = self.vertices[self.faces]
        return float(np.sum(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])))) / 6.0

    @cached_property
    def centroid(self) -> np.ndarray:
        """Volume centroid (tetrahedra against the origin)."""
        tri = self.vertices[self.faces]
        vols = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])) / 6.0
        centers = tri.sum(axis=1) / 4.0
        return (vols[:, None] * centers).sum(axis=0) / vols.sum()

    @property
    def bbox(self) -> tuple:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Half-space membership; ``tol > 0`` shrinks toward strict interior."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d = points @ self.face_normals.T - self.face_offsets
        return np.all(d <= -tol, axis=1)

    def scaled(self, factor: float) -> "ConvexPolyhedron":
        c = self.centroid
        return ConvexPolyhedron((self.vertices - c) * factor + c, self.faces)


def _oriented_faces(points: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    center = points.mean(axis=0)
    tri = points[simplices]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    inward = np.einsum("ij,ij->i", normals, tri[:, 0] - center) < 0
    fixed = simplices.copy()
    fixed[inward] = fixed[inward][:, [0, 2, 1]]
    return fixed


def convex_hull_scaled(cs_set: CrossSectionSet, factor: float) -> ConvexPolyhedron:
    """Convex hull of all normalized contour vertices, scaled about its centroid.

    Raises CoplanarPointsError when the vertices span no volume; callers
    should then use :func:`obb_extruded_hull` instead.
    """
    points = cs_set.all_vertices_normalized()
    if len(points) < 4 or _spans_no_volume(points):
        raise CoplanarPointsError(
            "contour vertices are coplanar; fall back to obb_extruded_hull()"
        )
    try:
        qh = ConvexHull(points)
    except QhullError as exc:
        raise CoplanarPointsError(
            f"convex hull failed ({exc}); fall back to obb_extruded_hull()"
        ) from exc
    used = np.unique(qh.simplices)
    remap = np.full(len(points), -1, dtype=np.intp)
    remap[used] = np.arange(len(used))
    hull = ConvexPolyhedron(points[used], remap[_oriented_faces(points, qh.simplices)])
    return hull.scaled(factor)


def obb_extruded_hull(cs_set: CrossSectionSet, factor: float) -> ConvexPolyhedron:
    """Oriented bounding box of the contour vertices, with any flat axis
    extruded to 5% of the largest extent, then scaled like the hull."""
    points = cs_set.all_vertices_normalized()
    center = points.mean(axis=0)
    _, _, axes = np.linalg.svd(points - center, full_matrices=False)
    local = (points - center) @ axes.T
    lo, hi = local.min(axis=0), local.max(axis=0)
    half = (hi - lo) / 2.0
    mid = (hi + lo) / 2.0
    half = np.maximum(half, 0.05 * half.max())
    corners_local = mid + half * _CUBE_SIGNS
    corners = corners_local @ axes + center
    box = ConvexPolyhedron(corners, _CUBE_FACES.copy())
    return box.scaled(factor)


def _spans_no_volume(points: np.ndarray, rel_tol: float = 1e-12) -> bool:
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    return sv[-1] <= rel_tol * max(sv[0], 1.0)


_CUBE_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64
)
# 12 outward-wound triangles over the corner ordering above
_CUBE_FACES = np.array(
    [
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ],
    dtype=np.intp,
)
