"""Training sample generation from cross-sections.

Three sample populations feed training: points on the scaled bounding hull
(always outside), uniform points in each plane's contour bounding box, and
a dense population hugging the contours at a ladder of standoff distances.
The ladder is the curriculum: early epochs train only on the widest bands,
later epochs slide a fixed-width window toward the finest bands so the
network settles low frequencies before being asked for sharp ones.

All generation is pure given (geometry, seed), so sample streams are
reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .hull import ConvexPolyhedron
from .slices import CrossSection, CrossSectionSet, label_points


class SamplerError(ValueError):
    pass


class SampleClass(IntEnum):
    HULL = 0
    PLANE_BBOX = 1
    BOUNDARY = 2


BBOX_INFLATE = 0.05  # per-side fraction added to each plane's contour bbox
HULL_SCALE = 1.05


@dataclass(frozen=True)
class LabeledSample:
    """Single-sample view; bulk storage lives in :class:`SampleSet`."""

    x: np.ndarray
    y: int
    sample_class: SampleClass
    band: int


@dataclass(eq=False)
class SampleSet:
    """Column storage for labeled samples (normalized coordinates)."""

    positions: np.ndarray  # (n, 3) float64
    labels: np.ndarray  # (n,) uint8, 0 inside / 1 outside
    classes: np.ndarray  # (n,) uint8 SampleClass values
    bands: np.ndarray  # (n,) int16, -1 for non-boundary samples

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(
            self.positions[i],
            int(self.labels[i]),
            SampleClass(int(self.classes[i])),
            int(self.bands[i]),
        )

    @classmethod
    def empty(cls) -> "SampleSet":
        return cls(
            np.zeros((0, 3)),
            np.zeros(0, dtype=np.uint8),
            np.zeros(0, dtype=np.uint8),
            np.zeros(0, dtype=np.int16),
        )

    @classmethod
    def build(cls, positions, labels, sample_class: SampleClass, bands=None) -> "SampleSet":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        if bands is None:
            bands = np.full(n, -1, dtype=np.int16)
        return cls(
            positions,
            np.asarray(labels, dtype=np.uint8).reshape(n),
            np.full(n, int(sample_class), dtype=np.uint8),
            np.asarray(bands, dtype=np.int16).reshape(n),
        )

    @classmethod
    def concatenate(cls, parts) -> "SampleSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.classes for p in parts]),
            np.concatenate([p.bands for p in parts]),
        )

    def select(self, mask_or_index) -> "SampleSet":
        return SampleSet(
            self.positions[mask_or_index],
            self.labels[mask_or_index],
            self.classes[mask_or_index],
            self.bands[mask_or_index],
        )

    def dump_csv(self, path) -> None:
        """Debug dump: one `x,y,z,label,class,band` line per sample."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("x,y,z,label,class,band\n")
            for p, y, c, b in zip(self.positions, self.labels, self.classes, self.bands):
                fh.write(f"{p[0]:.9g},{p[1]:.9g},{p[2]:.9g},{y},{c},{b}\n")


@dataclass(frozen=True)
class SampleBudget:
    n_hull: int = 4096
    n_bbox_per_plane: int = 2048
    n_per_edge: int = 8
    n_ring: int = 8

    def __post_init__(self):
        if min(self.n_hull, self.n_bbox_per_plane, self.n_per_edge, self.n_ring) < 0:
            raise SamplerError(f"negative sample budget: {self}")

    def validate_for(self, cs_set: CrossSectionSet, n_bands: int) -> None:
        """The boundary population must dominate the coarse populations 4:1."""
        n_edges = sum(len(c) for s in cs_set.sections for c in s.contours)
        n_boundary = n_edges * n_bands * (2 * self.n_per_edge + self.n_ring)
        n_coarse = self.n_hull + self.n_bbox_per_plane * len(cs_set.sections)
        if n_boundary + n_coarse <= 0:
            raise SamplerError("sample budget is empty")
        if n_boundary < 4 * n_coarse:
            raise SamplerError(
                f"boundary samples must dominate: {n_boundary} boundary vs "
                f"{n_coarse} hull+bbox (need >= 4x)"
            )


@dataclass(frozen=True, eq=False)
class CurriculumSchedule:
    """Standoff distance ladder plus the per-epoch active window of bands."""

    band_distances: np.ndarray  # (B,) strictly decreasing, normalized units
    window_starts: np.ndarray  # (epochs,) first active band per epoch
    window: int = 3

    def __post_init__(self):
        d = np.asarray(self.band_distances, dtype=np.float64)
        object.__setattr__(self, "band_distances", d)
        object.__setattr__(self, "window_starts", np.asarray(self.window_starts, dtype=np.intp))
        if len(d) < self.window:
            raise SamplerError(f"need at least {self.window} distance bands, got {len(d)}")
        if not np.all(np.diff(d) < 0):
            raise SamplerError("band distances must be strictly decreasing")
        ws = self.window_starts
        if len(ws) == 0 or np.any(np.diff(ws) < 0):
            raise SamplerError("window starts must be non-decreasing over epochs")
        if ws[-1] != len(d) - self.window:
            raise SamplerError("curriculum never reaches the finest band window")

    @property
    def n_bands(self) -> int:
        return len(self.band_distances)

    @property
    def epochs(self) -> int:
        return len(self.window_starts)

    def active_bands(self, epoch: int) -> range:
        if not 0 <= epoch < self.epochs:
            raise SamplerError(f"epoch {epoch} outside schedule of {self.epochs}")
        start = int(self.window_starts[epoch])
        return range(start, start + self.window)

    @classmethod
    def build(
        cls,
        diag_normalized: float,
        epochs: int,
        n_bands: int = 10,
        window: int = 3,
        coarse_fraction: float = 0.001,
        decades: float = 3.0,
        ramp_fraction: float = 0.7,
    ) -> "CurriculumSchedule":
        """Log-spaced ladder from ``coarse_fraction`` of the input diagonal
        down ``decades`` orders of magnitude; the window start advances
        linearly and parks on the finest window after ``ramp_fraction`` of
        the epochs."""
        if epochs < 1:
            raise SamplerError("need at least one epoch")
        d0 = coarse_fraction * diag_normalized
        dists = np.geomspace(d0, d0 * 10.0 ** (-decades), n_bands)
        last = n_bands - window
        ramp = max(1, int(round(ramp_fraction * epochs)))
        if ramp == 1:
            starts = np.full(epochs, last, dtype=np.intp)
            if epochs > 1:
                starts[0] = 0
                starts[1:] = last
        else:
            e = np.arange(epochs, dtype=np.float64)
            starts = np.minimum(last, np.floor(last * e / (ramp - 1)).astype(np.intp))
        return cls(dists, starts, window)


# ---------------------------------------------------------------------------
# Generators


def sample_hull(hull: ConvexPolyhedron, n: int, rng: np.random.Generator) -> SampleSet:
    """Area-weighted uniform samples on the hull surface, all labeled outside."""
    if n == 0:
        return SampleSet.empty()
    areas = hull.face_areas
    total = float(areas.sum())
    if total <= 0.0:
        raise SamplerError("hull has zero surface area")
    counts = rng.multinomial(n, areas / total)
    tri = hull.vertices[hull.faces]
    pts = np.empty((n, 3))
    at = 0
    for f, k in enumerate(counts):
        if k == 0:
            continue
        r1 = np.sqrt(rng.random(k))
        r2 = rng.random(k)
        a, b, c = tri[f]
        pts[at : at + k] = (
            (1.0 - r1)[:, None] * a
            + (r1 * (1.0 - r2))[:, None] * b
            + (r1 * r2)[:, None] * c
        )
        at += k
    return SampleSet.build(pts, np.ones(n, dtype=np.uint8), SampleClass.HULL)


def sample_plane_bbox(section: CrossSection, n: int, rng: np.random.Generator) -> SampleSet:
    """Uniform samples over the section's inflated contour bounding box,
    labeled by the contour parity rule."""
    if not section.contours:
        raise SamplerError("section has no contours")
    if n == 0:
        return SampleSet.empty()
    verts = np.concatenate([c.vertices for c in section.contours])
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    pad = BBOX_INFLATE * (hi - lo)
    lo, hi = lo - pad, hi + pad
    uv = lo + rng.random((n, 2)) * (hi - lo)
    labels = label_points(section, uv)
    return SampleSet.build(section.plane.to_world(uv), labels, SampleClass.PLANE_BBOX)


def sample_boundary(
    section: CrossSection,
    budget: SampleBudget,
    schedule: CurriculumSchedule,
    rng: np.random.Generator,
    jitter: bool = True,
) -> SampleSet:
    """Contour-hugging samples for every distance band.

    Each edge gets ``n_per_edge`` anchors spread by arclength (stratified
    jitter when ``jitter``), and each anchor emits one point on either side
    of the edge at every band distance. Each vertex gets an in-plane ring of
    ``n_ring`` points per band, covering the tangent-discontinuous corners.
    Labels always come from the parity test, never from the construction
    side, so bands wider than a thin feature still get correct labels.
    """
    dists = schedule.band_distances
    n_bands = len(dists)
    all_uv, all_bands = [], []

    for contour in section.contours:
        a = contour.vertices
        b = np.roll(a, -1, axis=0)
        n_edges = len(a)
        npe = budget.n_per_edge
        if npe > 0:
            off = rng.random((n_edges, npe)) if jitter else np.full((n_edges, npe), 0.5)
            t = (np.arange(npe)[None, :] + off) / npe
            anchors = a[:, None, :] + t[:, :, None] * (b - a)[:, None, :]
            edge_dir = b - a
            edge_dir /= np.linalg.norm(edge_dir, axis=1, keepdims=True)
            perp = np.stack([edge_dir[:, 1], -edge_dir[:, 0]], axis=1)
            # (edge, anchor, band, side, 2)
            offs = dists[None, None, :, None, None] * perp[:, None, None, None, :]
            sides = np.array([1.0, -1.0])[None, None, None, :, None]
            pts = anchors[:, :, None, None, :] + sides * offs
            all_uv.append(pts.reshape(-1, 2))
            all_bands.append(
                np.broadcast_to(
                    np.arange(n_bands, dtype=np.int16)[None, None, :, None],
                    (n_edges, npe, n_bands, 2),
                ).reshape(-1)
            )
        nr = budget.n_ring
        if nr > 0:
            phase = rng.random((n_edges, n_bands)) if jitter else np.zeros((n_edges, n_bands))
            ang = 2.0 * np.pi * (np.arange(nr)[None, None, :] + phase[:, :, None]) / nr
            ring = np.stack([np.cos(ang), np.sin(ang)], axis=-1)  # (vert, band, k, 2)
            pts = a[:, None, None, :] + dists[None, :, None, None] * ring
            all_uv.append(pts.reshape(-1, 2))
            all_bands.append(
                np.broadcast_to(
                    np.arange(n_bands, dtype=np.int16)[None, :, None], (n_edges, n_bands, nr)
                ).reshape(-1)
            )

    if not all_uv:
        return SampleSet.empty()
    uv = np.concatenate(all_uv)
    bands = np.concatenate(all_bands)
    labels = label_points(section, uv)
    return SampleSet.build(section.plane.to_world(uv), labels, SampleClass.BOUNDARY, bands)


def generate_samples(
    cs_set: CrossSectionSet,
    hull: ConvexPolyhedron,
    budget: SampleBudget,
    schedule: CurriculumSchedule,
    rng: np.random.Generator,
    jitter: bool = True,
    include_static: bool = True,
) -> SampleSet:
    """Full sample pool in the documented merge order: hull samples, then
    per plane (in input order) bbox samples, then per plane boundary samples."""
    parts = []
    if include_static:
        parts.append(sample_hull(hull, budget.n_hull, rng))
        for section in cs_set.sections:
            parts.append(sample_plane_bbox(section, budget.n_bbox_per_plane, rng))
    for section in cs_set.sections:
        parts.append(sample_boundary(section, budget, schedule, rng, jitter=jitter))
    return SampleSet.concatenate(parts)


def epoch_batch(
    samples: SampleSet,
    schedule: CurriculumSchedule,
    epoch: int,
    rng: np.random.Generator,
    curriculum: bool = True,
) -> SampleSet:
    """Samples visible to one epoch: every hull and plane-bbox sample plus
    the boundary samples whose band falls in the epoch's active window,
    shuffled with the epoch's generator. ``curriculum=False`` keeps all
    bands active (ablation mode)."""
    if curriculum:
        active = schedule.active_bands(epoch)
        keep = (samples.classes != SampleClass.BOUNDARY) | (
            (samples.bands >= active.start) & (samples.bands < active.stop)
        )
        picked = samples.select(keep)
    else:
        if not 0 <= epoch < schedule.epochs:
            raise SamplerError(f"epoch {epoch} outside schedule of {schedule.epochs}")
        picked = samples
    return picked.select(rng.permutation(len(picked)))
