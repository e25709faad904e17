"""Planar cross-section data model, file ingestion, and in/out labeling.

A cross-section input is a set of planes, each carrying closed oriented
contours that partition the plane into inside and outside regions. All
geometry is kept in a normalized frame: a uniform scale plus translation
places every contour vertex inside the canonical cube ``[-0.9, 0.9]^3``,
leaving headroom inside the positional-encoding period and below the
scaled bounding hull used by the sampler.

Labeling uses the even-odd rule: a point is inside when a rightward ray
crosses the section's contour edges an odd number of times. Outermost
contours wind counter-clockwise and nested contours alternate. Reversing
every contour turns the section inside out (the unbounded region becomes
the shape), so labels are interpreted relative to the orientation of the
outermost contours.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from pathlib import Path

import numpy as np

DOMAIN_HALF_WIDTH = 0.9
FRAME_TOL = 1e-9
UNIT_FIX_TOL = 1e-6

LABEL_INSIDE = 0
LABEL_OUTSIDE = 1

_EPS = np.finfo(np.float64).eps


class SliceError(ValueError):
    """Invalid cross-section geometry."""


class SliceParseError(SliceError):
    """Malformed cross-section file."""


def _as_vec3(value, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3,):
        raise SliceError(f"{what} must be a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SliceError(f"{what} contains non-finite values")
    return arr


def _frozen_array(obj, name: str, value: np.ndarray) -> None:
    value = np.ascontiguousarray(value)
    value.setflags(write=False)
    object.__setattr__(obj, name, value)


@dataclass(frozen=True, eq=False)
class Plane:
    """An oriented plane with an orthonormal right-handed (u, v, normal) frame."""

    origin: np.ndarray
    normal: np.ndarray
    basis_u: np.ndarray
    basis_v: np.ndarray

    def __post_init__(self):
        _frozen_array(self, "origin", _as_vec3(self.origin, "plane origin"))
        _frozen_array(self, "normal", _as_vec3(self.normal, "plane normal"))
        _frozen_array(self, "basis_u", _as_vec3(self.basis_u, "plane basis_u"))
        _frozen_array(self, "basis_v", _as_vec3(self.basis_v, "plane basis_v"))

    @classmethod
    def from_normal_and_u(cls, origin, normal, basis_u) -> "Plane":
        """Build a plane frame, renormalizing near-unit inputs (within 1e-6)."""
        origin = _as_vec3(origin, "plane origin")
        normal = _unitize(_as_vec3(normal, "plane normal"), "plane normal")
        basis_u = _unitize(_as_vec3(basis_u, "plane basis_u"), "plane basis_u")
        tilt = float(np.dot(normal, basis_u))
        if abs(tilt) > UNIT_FIX_TOL:
            raise SliceError(f"basis_u is not orthogonal to normal (dot={tilt:.3e})")
        if tilt != 0.0:
            basis_u = basis_u - tilt * normal
            basis_u = basis_u / np.linalg.norm(basis_u)
        basis_v = np.cross(normal, basis_u)
        return cls(origin, normal, basis_u, basis_v)

    def validate(self) -> None:
        for name in ("normal", "basis_u", "basis_v"):
            if abs(np.linalg.norm(getattr(self, name)) - 1.0) > FRAME_TOL:
                raise SliceError(f"plane {name} is not unit length")
        for a, b in (("normal", "basis_u"), ("normal", "basis_v"), ("basis_u", "basis_v")):
            if abs(np.dot(getattr(self, a), getattr(self, b))) > FRAME_TOL:
                raise SliceError(f"plane {a} and {b} are not orthogonal")
        if np.max(np.abs(np.cross(self.basis_u, self.basis_v) - self.normal)) > FRAME_TOL:
            raise SliceError("plane frame is not right-handed (u x v != normal)")

    def to_world(self, uv: np.ndarray) -> np.ndarray:
        """Lift (n, 2) plane coordinates to (n, 3) world points."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        return self.origin + uv[:, :1] * self.basis_u + uv[:, 1:2] * self.basis_v

    def to_plane(self, points: np.ndarray) -> np.ndarray:
        """Project (n, 3) world points to (n, 2) plane coordinates."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        rel = points - self.origin
        return np.stack([rel @ self.basis_u, rel @ self.basis_v], axis=1)


def _unitize(vec: np.ndarray, what: str) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > UNIT_FIX_TOL:
        raise SliceError(f"{what} is not unit length (|v|={norm:.9f}); fix the input")
    return vec / norm


@dataclass(frozen=True, eq=False)
class Contour:
    """A closed polygon in plane (u, v) coordinates; the last vertex connects
    back to the first implicitly. Vertex order encodes orientation."""

    vertices: np.ndarray

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise SliceError(f"contour vertices must be (n, 2), got {verts.shape}")
        _frozen_array(self, "vertices", verts)

    def __len__(self) -> int:
        return len(self.vertices)

    @cached_property
    def edges(self) -> np.ndarray:
        """(n, 2, 2) array of edge segments, edge i running v[i] -> v[i+1]."""
        return np.stack([self.vertices, np.roll(self.vertices, -1, axis=0)], axis=1)

    @cached_property
    def signed_area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        return 0.5 * float(np.sum(x * yn - xn * y))

    @property
    def is_ccw(self) -> bool:
        return self.signed_area > 0.0

    def reversed(self) -> "Contour":
        return Contour(self.vertices[::-1].copy())

    def validate(self) -> None:
        verts = self.vertices
        if len(verts) < 3:
            raise SliceError(f"contour needs >= 3 vertices, got {len(verts)}")
        if not np.all(np.isfinite(verts)):
            raise SliceError("contour has non-finite vertices")
        dup = np.all(verts == np.roll(verts, -1, axis=0), axis=1)
        if np.any(dup):
            raise SliceError(f"repeated consecutive vertex at index {int(np.argmax(dup))}")
        if self.signed_area == 0.0:
            raise SliceError("contour has zero signed area")
        hit = _first_edge_conflict(self.edges, self.edges, same_ring=True)
        if hit is not None:
            raise SliceError(f"contour self-intersects (edges {hit[0]} and {hit[1]})")


@dataclass(frozen=True, eq=False)
class CrossSection:
    """One plane together with the contours that partition it."""

    plane: Plane
    contours: tuple

    def __post_init__(self):
        object.__setattr__(self, "contours", tuple(self.contours))

    @cached_property
    def edge_array(self) -> np.ndarray:
        """All contour edges concatenated, shape (E, 2, 2)."""
        if not self.contours:
            return np.zeros((0, 2, 2))
        return np.concatenate([c.edges for c in self.contours], axis=0)

    @cached_property
    def edge_contour_index(self) -> np.ndarray:
        if not self.contours:
            return np.zeros(0, dtype=np.intp)
        return np.repeat(np.arange(len(self.contours)), [len(c) for c in self.contours])

    @cached_property
    def contour_depths(self) -> np.ndarray:
        """Nesting depth of each contour (number of other contours enclosing it)."""
        n = len(self.contours)
        depths = np.zeros(n, dtype=np.intp)
        for i, inner in enumerate(self.contours):
            probe = inner.vertices[0]
            for j, outer in enumerate(self.contours):
                if i != j and _crossings(outer.edges, probe[None, :])[0] % 2 == 1:
                    depths[i] += 1
        return depths

    @cached_property
    def background_is_inside(self) -> bool:
        """True when the outermost contours wind clockwise, i.e. the section
        describes the complement and the unbounded region counts as inside."""
        outer = [c for c, d in zip(self.contours, self.contour_depths) if d == 0]
        if not outer:
            return False
        return not outer[0].is_ccw

    def validate(self, *, where: str = "section") -> None:
        self.plane.validate()
        if not self.contours:
            raise SliceError(f"{where}: no contours")
        for ci, contour in enumerate(self.contours):
            try:
                contour.validate()
            except SliceError as exc:
                raise SliceError(f"{where}, contour {ci}: {exc}") from exc
        for ci, depth in enumerate(self.contour_depths):
            contour = self.contours[ci]
            if depth % 2 == 0 and not contour.is_ccw:
                raise SliceError(
                    f"{where}, contour {ci}: outermost contour must be counter-clockwise"
                )
            if depth % 2 == 1 and contour.is_ccw:
                raise SliceError(
                    f"{where}, contour {ci}: hole at nesting depth {depth} must be clockwise"
                )
        for i in range(len(self.contours)):
            for j in range(i + 1, len(self.contours)):
                hit = _first_edge_conflict(
                    self.contours[i].edges, self.contours[j].edges, same_ring=False
                )
                if hit is not None:
                    raise SliceError(f"{where}: contours {i} and {j} cross each other")


@dataclass(frozen=True, eq=False)
class Normalization:
    """Uniform scale + translation taking raw model units to the canonical cube."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        _frozen_array(self, "center", _as_vec3(self.center, "normalization center"))
        if not (self.scale > 0.0 and math.isfinite(self.scale)):
            raise SliceError(f"normalization scale must be positive, got {self.scale}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center


@dataclass(frozen=True, eq=False)
class CrossSectionSet:
    """A validated, normalized collection of cross-sections.

    ``sections`` hold normalized coordinates; ``normalization`` maps raw model
    units into the canonical cube and ``diag`` records the raw bounding-box
    diagonal of all contour vertices, so sampling distances can be expressed
    relative to the input's physical size.
    """

    sections: tuple
    normalization: Normalization
    diag: float

    def __post_init__(self):
        object.__setattr__(self, "sections", tuple(self.sections))

    @property
    def diag_normalized(self) -> float:
        return self.diag * self.normalization.scale

    @classmethod
    def from_raw(cls, planes, contours_per_plane, *, validate: bool = True) -> "CrossSectionSet":
        """Build a set from planes and per-plane contour vertex arrays in raw units."""
        if len(planes) != len(contours_per_plane):
            raise SliceError("planes and contour lists differ in length")
        if len(planes) == 0:
            raise SliceError("need at least one cross-section plane")

        all_world = []
        for plane, loops in zip(planes, contours_per_plane):
            for loop in loops:
                all_world.append(plane.to_world(np.asarray(loop, dtype=np.float64)))
        if not all_world:
            raise SliceError("no contour vertices in input")
        world = np.concatenate(all_world, axis=0)
        lo, hi = world.min(axis=0), world.max(axis=0)
        half = float(np.max(hi - lo)) / 2.0
        if half <= 0.0:
            raise SliceError("contour vertices are all coincident; cannot normalize")
        norm = Normalization(center=(lo + hi) / 2.0, scale=DOMAIN_HALF_WIDTH / half)
        diag = float(np.linalg.norm(hi - lo))

        sections = []
        for plane, loops in zip(planes, contours_per_plane):
            origin_n = norm.apply(plane.origin[None, :])[0]
            plane_n = Plane(origin_n, plane.normal, plane.basis_u, plane.basis_v)
            contours = tuple(
                Contour(np.asarray(loop, dtype=np.float64) * norm.scale) for loop in loops
            )
            sections.append(CrossSection(plane_n, contours))

        built = cls(tuple(sections), norm, diag)
        if validate:
            built.validate()
        return built

    def validate(self) -> None:
        if not self.sections:
            raise SliceError("cross-section set is empty")
        for si, section in enumerate(self.sections):
            section.validate(where=f"plane {si}")
            for ci, contour in enumerate(section.contours):
                world = section.plane.to_world(contour.vertices)
                if np.any(np.abs(world) > DOMAIN_HALF_WIDTH + 1e-9):
                    raise SliceError(
                        f"plane {si}, contour {ci}: normalized vertex outside "
                        f"[-{DOMAIN_HALF_WIDTH}, {DOMAIN_HALF_WIDTH}]^3"
                    )

    def all_vertices_normalized(self) -> np.ndarray:
        """All contour vertices lifted to normalized 3D coordinates, (n, 3)."""
        chunks = [
            s.plane.to_world(c.vertices) for s in self.sections for c in s.contours
        ]
        return np.concatenate(chunks, axis=0)

    def to_json_dict(self) -> dict:
        """Serialize back to the on-disk schema (raw model units)."""
        inv = self.normalization
        planes = []
        for section in self.sections:
            plane = section.plane
            planes.append(
                {
                    "origin": inv.invert(plane.origin[None, :])[0].tolist(),
                    "normal": plane.normal.tolist(),
                    "basis_u": plane.basis_u.tolist(),
                    "contours": [
                        {"vertices": (c.vertices / inv.scale).tolist()}
                        for c in section.contours
                    ],
                }
            )
        return {"version": 1, "planes": planes}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()) + "\n", encoding="utf-8")


def parse_cross_sections(path) -> CrossSectionSet:
    """Load and validate a cross-section JSON file.

    The file holds raw model units; the returned set is normalized into the
    canonical cube. See docs/cross_section_format.md for the schema.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SliceParseError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SliceParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc

    if not isinstance(doc, dict):
        raise SliceParseError(f"{path}: top level must be an object")
    version = doc.get("version")
    if version != 1:
        raise SliceParseError(f"{path}: unsupported version {version!r} (expected 1)")
    raw_planes = doc.get("planes")
    if not isinstance(raw_planes, list) or not raw_planes:
        raise SliceParseError(f"{path}: 'planes' must be a non-empty list")

    planes, loops_per_plane = [], []
    for pi, entry in enumerate(raw_planes):
        where = f"{path}: plane {pi}"
        if not isinstance(entry, dict):
            raise SliceParseError(f"{where}: must be an object")
        for key in ("origin", "normal", "basis_u", "contours"):
            if key not in entry:
                raise SliceParseError(f"{where}: missing field '{key}'")
        try:
            plane = Plane.from_normal_and_u(entry["origin"], entry["normal"], entry["basis_u"])
        except SliceError as exc:
            raise SliceParseError(f"{where}: {exc}") from exc
        raw_contours = entry["contours"]
        if not isinstance(raw_contours, list) or not raw_contours:
            raise SliceParseError(f"{where}: 'contours' must be a non-empty list")
        loops = []
        for ci, centry in enumerate(raw_contours):
            if not isinstance(centry, dict) or "vertices" not in centry:
                raise SliceParseError(f"{where}, contour {ci}: missing 'vertices'")
            verts = np.asarray(centry["vertices"], dtype=np.float64)
            if verts.ndim != 2 or verts.shape[1] != 2:
                raise SliceParseError(
                    f"{where}, contour {ci}: vertices must be a list of [u, v] pairs"
                )
            loops.append(verts)
        planes.append(plane)
        loops_per_plane.append(loops)

    try:
        return CrossSectionSet.from_raw(planes, loops_per_plane)
    except SliceError as exc:
        raise SliceParseError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Point labeling


def _crossings(edges: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Rightward ray crossing counts for each point against a set of edges.

    Uses the half-open rule (an edge counts when its endpoints straddle the
    query's v-coordinate with strict > on one side), so points aligned with
    vertices or lying on edges get a deterministic answer.
    """
    a, b = edges[:, 0], edges[:, 1]
    counts = np.zeros(len(pts), dtype=np.int64)
    # chunk over points to bound the (points x edges) temporaries
    step = max(1, 8_000_000 // max(1, len(edges)))
    for s in range(0, len(pts), step):
        p = pts[s : s + step]
        px, py = p[:, 0:1], p[:, 1:2]
        ay, by = a[:, 1][None, :], b[:, 1][None, :]
        straddle = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (py - ay) / (by - ay)
            xint = a[:, 0][None, :] + t * (b[:, 0] - a[:, 0])[None, :]
        hit = straddle & (px < xint)
        counts[s : s + step] = np.sum(hit, axis=1)
    return counts


def label_points(section: CrossSection, pts: np.ndarray) -> np.ndarray:
    """Label (n, 2) plane points: 0 inside the shape, 1 outside.

    Even-odd parity against all contours of the section, flipped when the
    outermost contours are clockwise (section describes the complement).
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    parity = _crossings(section.edge_array, pts) % 2
    labels = np.where(parity == 1, LABEL_INSIDE, LABEL_OUTSIDE).astype(np.uint8)
    if section.background_is_inside:
        labels = (1 - labels).astype(np.uint8)
    return labels


def label_point(section: CrossSection, p2) -> int:
    return int(label_points(section, np.asarray(p2, dtype=np.float64)[None, :])[0])


def distances_to_edges(section: CrossSection, pts: np.ndarray) -> np.ndarray:
    """(n, E) Euclidean distances from points to every contour edge segment."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    edges = section.edge_array
    a, b = edges[:, 0], edges[:, 1]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom = np.where(denom == 0.0, 1.0, denom)
    rel = pts[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pej,ej->pe", rel, ab) / denom[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    return np.linalg.norm(pts[:, None, :] - closest, axis=2)


def signed_plane_distance_field(section: CrossSection, p2):
    """Distance from a plane point to the nearest contour polyline.

    Returns ``(distance, (contour_index, edge_index))``; ties break toward
    the lowest (contour, edge) pair.
    """
    d = distances_to_edges(section, np.asarray(p2, dtype=np.float64)[None, :])[0]
    flat = int(np.argmin(d))
    ci = int(section.edge_contour_index[flat])
    offset = sum(len(c) for c in section.contours[:ci])
    return float(d[flat]), (ci, flat - offset)


# ---------------------------------------------------------------------------
# Exact segment-intersection predicates (validation only)


def _orient_sign(ax, ay, bx, by, cx, cy) -> int:
    """Sign of the cross product (b-a) x (c-a); exact via rational fallback."""
    detl = (bx - ax) * (cy - ay)
    detr = (by - ay) * (cx - ax)
    det = detl - detr
    bound = 8.0 * _EPS * (abs(detl) + abs(detr))
    if abs(det) > bound:
        return 1 if det > 0 else -1
    det = (Fraction(bx) - Fraction(ax)) * (Fraction(cy) - Fraction(ay)) - (
        Fraction(by) - Fraction(ay)
    ) * (Fraction(cx) - Fraction(ax))
    if det > 0:
        return 1
    if det < 0:
        return -1
    return 0


def _within(lo, hi, x) -> bool:
    return min(lo, hi) <= x <= max(lo, hi)


def _segments_conflict(p, q, r, s) -> bool:
    """True when segments (p, q) and (r, s) touch anywhere except at a
    shared endpoint. Collinear overlap beyond a single point conflicts."""
    d1 = _orient_sign(r[0], r[1], s[0], s[1], p[0], p[1])
    d2 = _orient_sign(r[0], r[1], s[0], s[1], q[0], q[1])
    d3 = _orient_sign(p[0], p[1], q[0], q[1], r[0], r[1])
    d4 = _orient_sign(p[0], p[1], q[0], q[1], s[0], s[1])
    if d1 * d2 < 0 and d3 * d4 < 0:
        return True

    def on_segment(a, b, c) -> bool:
        # assumes c collinear with (a, b)
        return _within(a[0], b[0], c[0]) and _within(a[1], b[1], c[1])

    if len({tuple(p), tuple(q)} & {tuple(r), tuple(s)}) == 2:
        return True  # same segment traversed twice
    for d, pt in ((d1, p), (d2, q)):
        if d == 0 and on_segment(r, s, pt) and tuple(pt) not in {tuple(r), tuple(s)}:
            return True
    for d, pt in ((d3, r), (d4, s)):
        if d == 0 and on_segment(p, q, pt) and tuple(pt) not in {tuple(p), tuple(q)}:
            return True
    return False


def _first_edge_conflict(edges_a: np.ndarray, edges_b: np.ndarray, *, same_ring: bool):
    """First conflicting edge pair between two edge sets, or None.

    With ``same_ring`` the sets are identical and only pairs i < j are tested.
    Bounding-box prefiltering keeps the exact predicate off most pairs.
    """
    lo_a = edges_a.min(axis=1)
    hi_a = edges_a.max(axis=1)
    lo_b = edges_b.min(axis=1)
    hi_b = edges_b.max(axis=1)
    overlap = (
        (lo_a[:, None, 0] <= hi_b[None, :, 0])
        & (lo_b[None, :, 0] <= hi_a[:, None, 0])
        & (lo_a[:, None, 1] <= hi_b[None, :, 1])
        & (lo_b[None, :, 1] <= hi_a[:, None, 1])
    )
    ii, jj = np.nonzero(overlap)
    if same_ring:
        keep = ii < jj
        ii, jj = ii[keep], jj[keep]
    for i, j in zip(ii.tolist(), jj.tolist()):
        if _segments_conflict(edges_a[i, 0], edges_a[i, 1], edges_b[j, 0], edges_b[j, 1]):
            return (i, j)
    return None
