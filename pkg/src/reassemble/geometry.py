"""Contour and polygon computations on fragment boundaries.

Coordinates are ``(x, y)`` with ``x`` the image column and ``y`` the image
row.  Orientation is measured with the ordinary shoelace sign in that
frame, so "counter-clockwise" means a positive signed area.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    DegeneratePolygon,
    EmptyContour,
    EmptyMask,
    KTooLarge,
    MultipleComponents,
    NonUnitRotation,
    TooFewPoints,
)

MIN_MASK_PIXELS = 9

HARRIS_SIGMA = 1.0
HARRIS_K = 0.04
HARRIS_REL_THRESHOLD = 0.01
# Floor for unit-contrast images: a right-angle corner scores ~5e-3, the
# discretisation ripple along a smooth digital disk stays below ~2e-4.
HARRIS_ABS_THRESHOLD = 1e-3
HARRIS_NMS_RADIUS = 3
CONTOUR_SNAP_PX = 2.0
CURVATURE_WINDOW = 4


@dataclass
class Contour:
    points: np.ndarray
    closed: bool = True

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) < 3:
            raise TooFewPoints(f"contour needs >= 3 points, got {len(self.points)}")

    def __len__(self) -> int:
        return len(self.points)

    def to_json(self) -> str:
        return json.dumps(self.points.tolist())

    @classmethod
    def from_json(cls, text: str) -> "Contour":
        return cls(np.array(json.loads(text), dtype=np.float64))


@dataclass
class Keypoint:
    position: np.ndarray
    curvature: float
    edge_angle: float
    contour_index: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)


@dataclass
class RigidTransform2D:
    """``p' = R p + translation`` with ``R`` built from ``(cos, sin)``."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)

    @classmethod
    def from_angle(cls, degrees: float, translation=(0.0, 0.0)) -> "RigidTransform2D":
        rad = np.deg2rad(degrees)
        return cls(np.asarray(translation, dtype=np.float64), np.array([np.cos(rad), np.sin(rad)]))

    @property
    def angle_deg(self) -> float:
        return float(np.rad2deg(np.arctan2(self.rotation[1], self.rotation[0])) % 360.0)

    @property
    def matrix(self) -> np.ndarray:
        c, s = self.rotation
        return np.array([[c, -s], [s, c]])

    def check(self) -> None:
        norm = float(np.hypot(*self.rotation))
        if abs(norm - 1.0) > 1e-9:
            raise NonUnitRotation(f"rotation vector has norm {norm}")

    def compose(self, other: "RigidTransform2D") -> "RigidTransform2D":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        m = self.matrix
        rot = m @ other.rotation
        return RigidTransform2D(m @ other.translation + self.translation, rot / np.linalg.norm(rot))

    def inverse(self) -> "RigidTransform2D":
        mt = self.matrix.T
        return RigidTransform2D(-(mt @ self.translation), np.array([self.rotation[0], -self.rotation[1]]))


# ---------------------------------------------------------------------------
# contour extraction

# Moore neighbourhood in (drow, dcol), clockwise on screen starting west.
_MOORE = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]


def signed_area(points) -> float:
    p = np.asarray(points, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _moore_trace(mask: np.ndarray) -> list[tuple[int, int]]:
    padded = np.pad(mask, 1)
    rows, cols = np.nonzero(padded)
    order = np.lexsort((cols, rows))
    start = (int(rows[order[0]]), int(cols[order[0]]))
    # Entered from the west; that neighbour is background by construction.
    start_back = (start[0], start[1] - 1)

    boundary = [start]
    current, back = start, start_back
    max_steps = 4 * padded.size
    for _ in range(max_steps):
        d = _MOORE.index((back[0] - current[0], back[1] - current[1]))
        nxt = None
        prev = back
        for step in range(1, 9):
            dr, dc = _MOORE[(d + step) % 8]
            cand = (current[0] + dr, current[1] + dc)
            if padded[cand]:
                nxt = cand
                break
            prev = cand
        if nxt is None:  # isolated pixel
            break
        current, back = nxt, prev
        if current == start and back == start_back:
            break
        # Jacob's criterion can miss on some shapes; re-entering the start
        # from the same side as the last visit is equivalent.
        if current == start and len(boundary) > 1 and boundary[1] == _next_from(padded, start, back):
            break
        boundary.append(current)
    return [(r - 1, c - 1) for r, c in boundary]


def _next_from(padded, current, back):
    d = _MOORE.index((back[0] - current[0], back[1] - current[1]))
    for step in range(1, 9):
        dr, dc = _MOORE[(d + step) % 8]
        cand = (current[0] + dr, current[1] + dc)
        if padded[cand]:
            return cand
    return None


def extract_contour(mask) -> Contour:
    """Trace the outer boundary of a single-component binary mask.

    Returns the boundary pixel centres as a closed CCW polyline; holes are
    ignored.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2 or mask.sum() == 0:
        raise EmptyMask("mask has no foreground")
    _, n = ndimage.label(mask)  # default structure is 4-connectivity
    if n > 1:
        raise MultipleComponents(f"mask has {n} 4-connected components")
    if mask.sum() < MIN_MASK_PIXELS:
        raise EmptyMask(f"mask has only {int(mask.sum())} pixels (< {MIN_MASK_PIXELS})")
    trace = _moore_trace(mask)
    pts = np.array([(c, r) for r, c in trace], dtype=np.float64)
    if signed_area(pts) < 0:
        pts = np.concatenate([pts[:1], pts[1:][::-1]])
    return Contour(pts)


# ---------------------------------------------------------------------------
# local differential features


def curvature_at(contour: Contour, index: int, window: int = CURVATURE_WINDOW) -> float:
    """Unsigned curvature from an algebraic (Kåsa) circle fit.

    The fit uses the ``2 * window + 1`` contour points centred on ``index``
    (wrapping around the closed contour).  Collinear neighbourhoods give 0.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    pts = contour.points
    n = len(pts)
    if 2 * window + 1 >= n:
        nb = pts
    else:
        nb = pts[(index + np.arange(-window, window + 1)) % n]
    centre = nb.mean(axis=0)
    q = nb - centre
    scale = np.abs(q).max()
    if scale == 0:
        return 0.0
    q = q / scale
    design = np.column_stack([q[:, 0], q[:, 1], np.ones(len(q))])
    rhs = -(q ** 2).sum(axis=1)
    sv = np.linalg.svd(design, compute_uv=False)
    if sv[-1] <= 1e-9 * sv[0]:
        return 0.0
    (d, e, f), *_ = np.linalg.lstsq(design, rhs, rcond=None)
    r2 = (d * d + e * e) / 4.0 - f
    if r2 <= 0:
        return 0.0
    return float(1.0 / (np.sqrt(r2) * scale))


def edge_angle_at(contour: Contour, index: int) -> float:
    """Tangent direction from central differences, degrees in [0, 360)."""
    pts = contour.points
    n = len(pts)
    d = pts[(index + 1) % n] - pts[(index - 1) % n]
    deg = float(np.rad2deg(np.arctan2(d[1], d[0])) % 360.0)
    return 0.0 if deg >= 360.0 else deg


# ---------------------------------------------------------------------------
# Harris keypoints


def harris_response(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    gx = ndimage.sobel(img, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(img, axis=0, mode="nearest") / 8.0
    sxx = ndimage.gaussian_filter(gx * gx, HARRIS_SIGMA)
    syy = ndimage.gaussian_filter(gy * gy, HARRIS_SIGMA)
    sxy = ndimage.gaussian_filter(gx * gy, HARRIS_SIGMA)
    return sxx * syy - sxy * sxy - HARRIS_K * (sxx + syy) ** 2


def resample_arclength(points, n: int, closed: bool = True) -> np.ndarray:
    """``n`` points evenly spaced by arc length along a polyline."""
    p = np.asarray(points, dtype=np.float64)
    if closed:
        p = np.vstack([p, p[:1]])
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    targets = np.arange(n) * total / n if closed else np.linspace(0.0, total, n)
    x = np.interp(targets, cum, p[:, 0])
    y = np.interp(targets, cum, p[:, 1])
    return np.column_stack([x, y])


def _nearest_vertex(contour: Contour, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.linalg.norm(contour.points[None, :, :] - query[:, None, :], axis=2)
    idx = d.argmin(axis=1)
    return idx, d[np.arange(len(query)), idx]


def make_keypoint(contour: Contour, index: int, window: int = CURVATURE_WINDOW) -> Keypoint:
    return Keypoint(
        position=contour.points[index].copy(),
        curvature=curvature_at(contour, index, window),
        edge_angle=edge_angle_at(contour, index),
        contour_index=int(index),
    )


def uniform_contour_indices(contour: Contour, count: int) -> np.ndarray:
    """Contour vertex indices closest to ``count`` arc-length-uniform samples."""
    samples = resample_arclength(contour.points, count)
    idx, _ = _nearest_vertex(contour, samples)
    return np.unique(idx)


def harris_keypoints(image, contour: Contour | None, min_count: int = 3) -> list[Keypoint]:
    """Harris corners on the contour, topped up to at least ``min_count``.

    Corner-response local maxima within 2 px of the contour are snapped to
    the nearest contour vertex.  If fewer than ``min_count`` survive, the
    contour is resampled uniformly by arc length and those vertices are
    added.
    """
    if contour is None or len(contour) == 0:
        raise EmptyContour("no contour to attach keypoints to")
    if min_count < 3:
        raise ValueError("min_count must be >= 3")
    resp = harris_response(image)
    peak = resp.max()
    threshold = max(HARRIS_REL_THRESHOLD * peak, HARRIS_ABS_THRESHOLD)
    size = 2 * HARRIS_NMS_RADIUS + 1
    local_max = (resp == ndimage.maximum_filter(resp, size=size, mode="constant", cval=-np.inf))
    rows, cols = np.nonzero(local_max & (resp > threshold))
    indices: set[int] = set()
    if len(rows):
        cand = np.column_stack([cols, rows]).astype(np.float64)
        idx, dist = _nearest_vertex(contour, cand)
        indices.update(int(i) for i in idx[dist <= CONTOUR_SNAP_PX])

    if len(indices) < min_count:
        indices.update(int(i) for i in uniform_contour_indices(contour, min_count))
        # snapping can merge samples on coarse contours
        want = min(min_count, len(contour))
        bump = min_count
        while len(indices) < want and bump < 4 * len(contour):
            bump *= 2
            indices.update(int(i) for i in uniform_contour_indices(contour, bump))
        # duplicate or shadowed vertices are never anyone's nearest vertex
        for i in np.linspace(0, len(contour), 2 * len(contour), endpoint=False).astype(int):
            if len(indices) >= want:
                break
            indices.add(int(i))

    return [make_keypoint(contour, i) for i in sorted(indices)]


# ---------------------------------------------------------------------------
# polygons


def polygon_area(points) -> float:
    """Absolute shoelace area."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(p) < 3:
        raise TooFewPoints(f"need >= 3 points, got {len(p)}")
    return abs(signed_area(p))


def polygon_perimeter(points) -> float:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(p) < 3:
        raise TooFewPoints(f"need >= 3 points, got {len(p)}")
    return float(np.linalg.norm(p - np.roll(p, -1, axis=0), axis=1).sum())


def farthest_point_sampling(points, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subset of size ``k`` starting at ``seed_index``.

    Ties go to the lowest index.  Returned indices are sorted ascending.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(p)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise KTooLarge(f"k={k} exceeds {n} points")
    chosen = [int(seed_index)]
    dist = np.linalg.norm(p - p[seed_index], axis=1)
    dist[seed_index] = -np.inf
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(p - p[nxt], axis=1))
        dist[chosen] = -np.inf
    return np.array(sorted(chosen), dtype=np.int64)


def apply_transform(points, t: RigidTransform2D) -> np.ndarray:
    t.check()
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return p @ t.matrix.T + t.translation


def rasterize_polygon(points, resolution: float, origin, shape) -> np.ndarray:
    """Even-odd fill of pixel centres on a grid.

    Pixel ``(r, c)`` has its centre at ``origin + ((c + 0.5), (r + 0.5)) /
    resolution``.  Edges use a half-open rule so shared edges are never
    counted twice.
    """
    p = (np.asarray(points, dtype=np.float64) - np.asarray(origin, dtype=np.float64)) * resolution
    h, w = shape
    out = np.zeros((h, w), dtype=bool)
    if h == 0 or w == 0:
        return out
    x0, y0 = p[:, 0], p[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    yc = np.arange(h) + 0.5
    lo = np.minimum(y0, y1)
    hi = np.maximum(y0, y1)
    span = (yc[:, None] >= lo[None, :]) & (yc[:, None] < hi[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        tpar = (yc[:, None] - y0[None, :]) / (y1 - y0)[None, :]
    xs = np.where(span, x0[None, :] + tpar * (x1 - x0)[None, :], np.inf)
    xs.sort(axis=1)
    counts = span.sum(axis=1)
    xc = np.arange(w) + 0.5
    for r in np.nonzero(counts)[0]:
        row = xs[r, : counts[r]]
        # number of crossings left of each pixel centre
        inside = (np.searchsorted(row, xc, side="right") % 2) == 1
        out[r] = inside
    return out


def _grid_for(bounds_min, bounds_max, resolution):
    origin = np.floor(np.asarray(bounds_min) * resolution) / resolution
    extent = np.asarray(bounds_max) - origin
    w, h = (np.ceil(extent * resolution).astype(int) + 1)
    return origin, (int(h), int(w))


def polygon_intersection_area(a, b, resolution: float = 4.0) -> float:
    """Area of ``a ∩ b`` by rasterising both at ``resolution`` pixels per unit."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    for poly in (a, b):
        if len(poly) < 3 or abs(signed_area(poly)) == 0.0:
            raise DegeneratePolygon("polygon has no area")
    lo = np.maximum(a.min(axis=0), b.min(axis=0))
    hi = np.minimum(a.max(axis=0), b.max(axis=0))
    if np.any(hi <= lo):
        return 0.0
    origin, shape = _grid_for(lo, hi, resolution)
    ma = rasterize_polygon(a, resolution, origin, shape)
    mb = rasterize_polygon(b, resolution, origin, shape)
    return float(np.count_nonzero(ma & mb)) / resolution ** 2


def raster_area(points, resolution: float = 4.0) -> float:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    origin, shape = _grid_for(p.min(axis=0), p.max(axis=0), resolution)
    return float(np.count_nonzero(rasterize_polygon(p, resolution, origin, shape))) / resolution ** 2


def convex_clip_intersection_area(subject, clip) -> float:
    """Exact ``area(subject ∩ clip)`` for convex ``clip`` (Sutherland-Hodgman)."""
    out = [np.asarray(q, dtype=np.float64) for q in np.asarray(subject, dtype=np.float64)]
    c = np.asarray(clip, dtype=np.float64)
    if signed_area(c) < 0:
        c = c[::-1]
    for i in range(len(c)):
        a, b = c[i], c[(i + 1) % len(c)]
        edge = b - a

        def inside(q):
            return edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0]) >= 0

        def cross_point(p, q):
            d = q - p
            denom = edge[0] * d[1] - edge[1] * d[0]
            s = (edge[1] * (p[0] - a[0]) - edge[0] * (p[1] - a[1])) / denom
            return p + s * d

        src, out = out, []
        if not src:
            break
        prev = src[-1]
        for cur in src:
            if inside(cur):
                if not inside(prev):
                    out.append(cross_point(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross_point(prev, cur))
            prev = cur
    if len(out) < 3:
        return 0.0
    return abs(signed_area(np.array(out)))
