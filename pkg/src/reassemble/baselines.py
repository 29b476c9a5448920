"""Non-learned reference solvers.

``genetic_solve`` evolves whole layouts against a compactness-plus-overlap
fitness.  ``greedy_geometric_solve`` grows an assembly one piece at a time
by matching short boundary segments of an unplaced piece against the
boundary of the pieces already placed.

Both work on piece contours in their local frames (mm) and return
``{piece_id: RigidTransform2D}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.spatial import ConvexHull, cKDTree

from .geometry import (
    RigidTransform2D,
    _grid_for,
    apply_transform,
    polygon_area,
    polygon_intersection_area,
    polygon_perimeter,
    rasterize_polygon,
    resample_arclength,
)
from .puzzle import natural_key

OVERLAP_WEIGHT = 10.0

# greedy matching weights
SEGMENT_SAMPLES = 16
SMOOTH_SIGMA = 1.5  # boundary samples
VOTE_COST = 0.6
VOTE_DEG = 3.0
VOTE_CELL = 3.0  # boundary spacings
DIST_WEIGHT = 1.0
NORMAL_WEIGHT = 1.0
CONTACT_WEIGHT = 1.0
COMPACT_WEIGHT = 3.0
OVERLAP_TOLERANCE = 0.005  # fraction of the new piece's area


def _bbox_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.all(a.min(axis=0) < b.max(axis=0)) and np.all(b.min(axis=0) < a.max(axis=0)))


def _pair_overlap(a: np.ndarray, b: np.ndarray, resolution: float) -> float:
    if not _bbox_overlap(a, b):
        return 0.0
    return polygon_intersection_area(a, b, resolution)


def genetic_fitness(layout: dict[str, RigidTransform2D], shapes: dict[str, np.ndarray],
                    overlap_weight: float = OVERLAP_WEIGHT, resolution: float = 4.0) -> float:
    """Bounding-rectangle area of the posed pieces plus weighted pairwise
    overlap area.  Lower is better."""
    ids = sorted(layout, key=natural_key)
    posed = [apply_transform(shapes[i], layout[i]) for i in ids]
    pts = np.concatenate(posed)
    span = pts.max(axis=0) - pts.min(axis=0)
    overlap = 0.0
    for a in range(len(posed)):
        for b in range(a + 1, len(posed)):
            overlap += _pair_overlap(posed[a], posed[b], resolution)
    return float(span[0] * span[1] + overlap_weight * overlap)


@dataclass
class GAResult:
    solution: dict[str, RigidTransform2D]
    fitness: float
    history: list[float] = field(default_factory=list)


def _genome_layout(ids, genome: np.ndarray) -> dict[str, RigidTransform2D]:
    return {i: RigidTransform2D.from_angle(g[2], g[:2]) for i, g in zip(ids, genome)}


def genetic_solve(shapes: dict[str, np.ndarray], canvas_mm, population: int = 32, generations: int = 100,
                  rng: np.random.Generator | int = 0, tournament: int = 3, mutation_rate: float = 0.3,
                  elite: int = 2, overlap_weight: float = OVERLAP_WEIGHT, resolution: float = 1.0) -> GAResult:
    """Genome = per-piece ``(x, y, angle_deg)``.  Tournament selection,
    per-piece crossover, Gaussian mutation (5% of canvas, 10 degrees) and
    elitism, so the best fitness never increases."""
    if population < 4:
        raise ValueError("population must be >= 4")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    ids = sorted(shapes, key=natural_key)
    m = len(ids)
    canvas = np.asarray(canvas_mm, dtype=np.float64)
    sigma_t = 0.05 * float(canvas.max())
    sigma_r = 10.0

    def fitness(g):
        return genetic_fitness(_genome_layout(ids, g), shapes, overlap_weight, resolution)

    pop = np.empty((population, m, 3))
    pop[..., 0] = rng.uniform(0, canvas[0], size=(population, m))
    pop[..., 1] = rng.uniform(0, canvas[1], size=(population, m))
    pop[..., 2] = rng.uniform(0, 360.0, size=(population, m))
    fit = np.array([fitness(g) for g in pop])
    history = [float(fit.min())]
    n_elite = max(1, min(elite, population - 1))

    for _ in range(generations):
        order = np.argsort(fit, kind="stable")
        children = [pop[i].copy() for i in order[:n_elite]]
        child_fit = [fit[i] for i in order[:n_elite]]
        while len(children) < population:
            parents = []
            for _ in range(2):
                cand = rng.integers(0, population, size=tournament)
                parents.append(pop[cand[np.argmin(fit[cand])]])
            swap = rng.uniform(size=m) < 0.5
            child = np.where(swap[:, None], parents[1], parents[0]).copy()
            mut = rng.uniform(size=m) < mutation_rate
            child[mut, :2] += rng.normal(0.0, sigma_t, size=(int(mut.sum()), 2))
            child[mut, 2] = (child[mut, 2] + rng.normal(0.0, sigma_r, size=int(mut.sum()))) % 360.0
            children.append(child)
            child_fit.append(fitness(child))
        pop = np.stack(children)
        fit = np.array(child_fit)
        history.append(float(fit.min()))

    best = int(np.argmin(fit))
    return GAResult(_genome_layout(ids, pop[best]), float(fit[best]), history)


# ---------------------------------------------------------------------------
# greedy


@dataclass
class _Boundary:
    points: np.ndarray  # [N, 2] local mm
    normals: np.ndarray  # outward unit normals
    polygon: np.ndarray
    area: float
    interior: np.ndarray  # interior sample points, local mm


def _interior_samples(polygon: np.ndarray, resolution: float) -> np.ndarray:
    origin, shape = _grid_for(polygon.min(axis=0), polygon.max(axis=0), resolution)
    r, c = np.nonzero(rasterize_polygon(polygon, resolution, origin, shape))
    return origin + (np.column_stack([c, r]) + 0.5) / resolution


def _boundary(polygon: np.ndarray, spacing: float, resolution: float) -> _Boundary:
    n = max(int(np.ceil(polygon_perimeter(polygon) / spacing)), 2 * SEGMENT_SAMPLES)
    pts = resample_arclength(polygon, n)
    # soften the pixel staircase so straight cuts match as well as clean edges
    pts = gaussian_filter1d(pts, SMOOTH_SIGMA, axis=0, mode="wrap")
    tangent = np.roll(pts, -1, axis=0) - np.roll(pts, 1, axis=0)
    tangent /= np.maximum(np.linalg.norm(tangent, axis=1, keepdims=True), 1e-12)
    # positive shoelace orientation: outward normal is the tangent turned clockwise
    normals = np.column_stack([tangent[:, 1], -tangent[:, 0]])
    return _Boundary(pts, normals, polygon, polygon_area(polygon),
                     _interior_samples(polygon, min(resolution, 1.0 / spacing)))


def _segments(n: int, stride: int) -> np.ndarray:
    starts = np.arange(0, n, stride)
    return (starts[:, None] + np.arange(SEGMENT_SAMPLES)[None, :]) % n


def _procrustes(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Best rotation angle (rad) taking each centred src segment onto each
    centred dst segment, point for point.  src [S, L, 2], dst [D, L, 2] ->
    [D, S]."""
    sc = src - src.mean(axis=1, keepdims=True)
    dc = dst - dst.mean(axis=1, keepdims=True)
    h = np.einsum("sli,dlj->dsij", sc, dc)
    return np.arctan2(h[..., 0, 1] - h[..., 1, 0], h[..., 0, 0] + h[..., 1, 1])


def _rot(ang):
    c, s = np.cos(ang), np.sin(ang)
    return np.array([[c, -s], [s, c]])


class _Assembly:
    """Frozen view of the placed pieces used to score one placement round."""

    def __init__(self, matcher: "GreedyMatcher", placed: dict[str, RigidTransform2D], margin: float):
        self.placed = placed
        bs = [matcher.bounds[j] for j in placed]
        self.points = np.concatenate([apply_transform(b.points, placed[j]) for j, b in zip(placed, bs)])
        self.normals = np.concatenate([b.normals @ placed[j].matrix.T for j, b in zip(placed, bs)])
        self.tree = cKDTree(self.points)
        self.area = sum(b.area for b in bs)
        self.res = matcher.resolution
        lo = self.points.min(axis=0) - margin
        hi = self.points.max(axis=0) + margin
        self.origin, shape = _grid_for(lo, hi, self.res)
        self.union = np.zeros(shape, dtype=bool)
        for j, b in zip(placed, bs):
            self.union |= rasterize_polygon(apply_transform(b.polygon, placed[j]), self.res, self.origin, shape)
        self.hull = self.points[ConvexHull(self.points).vertices] if len(self.points) >= 3 else self.points

    def overlap(self, interior_posed: np.ndarray) -> float:
        ij = np.floor((interior_posed - self.origin) * self.res).astype(int)
        ok = (ij[:, 1] >= 0) & (ij[:, 1] < self.union.shape[0]) & (ij[:, 0] >= 0) & (ij[:, 0] < self.union.shape[1])
        return float(self.union[ij[ok, 1], ij[ok, 0]].sum()) / max(len(interior_posed), 1)


@dataclass
class _Candidate:
    score: float
    pose: RigidTransform2D
    overlap: float
    target: str


class GreedyMatcher:
    def __init__(self, shapes: dict[str, np.ndarray], spacing: float | None = None, resolution: float = 4.0,
                 stride: int = 2, proposals: int = 200, refine: int = 8):
        self.ids = sorted(shapes, key=natural_key)
        self.shapes = {i: np.asarray(shapes[i], dtype=np.float64) for i in self.ids}
        if spacing is None:
            per = np.median([polygon_perimeter(s) for s in self.shapes.values()])
            spacing = per / 256.0
        self.spacing = float(spacing)
        # contours traced through pixel centres leave a one-pixel gap between
        # neighbours; their edge length estimates that gap
        edges = np.concatenate([np.linalg.norm(np.diff(s, axis=0, append=s[:1]), axis=1) for s in self.shapes.values()])
        self.gap = min(float(np.median(edges)), self.spacing)
        self.resolution = resolution
        self.stride = stride
        self.n_proposals = proposals
        self.n_refine = refine
        self.bounds = {i: _boundary(self.shapes[i], self.spacing, resolution) for i in self.ids}

    def score(self, cid: str, pose: RigidTransform2D, asm: _Assembly) -> tuple[float, float]:
        """Higher is better.  Returns (score, overlap fraction)."""
        b = self.bounds[cid]
        pts = apply_transform(b.points, pose)
        nrm = b.normals @ pose.matrix.T
        dist, idx = asm.tree.query(pts)
        near = dist <= self.gap + 2.0 * self.spacing
        contact = float(near.mean())
        if near.any():
            d_term = float(np.maximum(dist[near] - self.gap, 0.0).mean() / self.spacing)
            n_term = float(((1.0 + np.einsum("ij,ij->i", nrm[near], asm.normals[idx[near]])) / 2.0).mean())
        else:
            d_term, n_term = 2.0, 1.0
        overlap = asm.overlap(apply_transform(b.interior, pose))
        hull = ConvexHull(np.concatenate([asm.hull, pts])).volume
        compact = hull / (asm.area + b.area) - 1.0
        score = (CONTACT_WEIGHT * contact - DIST_WEIGHT * d_term * contact - NORMAL_WEIGHT * n_term * contact
                 - OVERLAP_WEIGHT * overlap - COMPACT_WEIGHT * compact)
        return score, overlap

    def _back_off(self, cid, pose, direction, asm) -> tuple[RigidTransform2D, float]:
        """Slide the piece along ``direction`` until overlap is within tolerance."""
        interior = self.bounds[cid].interior
        step = 0.25 * self.spacing
        for k in range(0, 33):
            cand = RigidTransform2D(pose.translation + k * step * direction, pose.rotation)
            ov = asm.overlap(apply_transform(interior, cand))
            if ov <= OVERLAP_TOLERANCE:
                break
        return cand, ov

    def proposals(self, cid: str, asm: _Assembly):
        """Best segment-pair alignments of ``cid`` against the placed pieces,
        rotation rounded to whole degrees."""
        b = self.bounds[cid]
        seg_b = _segments(len(b.points), self.stride)
        src = b.points[seg_b][:, ::-1]  # traverse backwards to face the partner
        src_n = b.normals[seg_b][:, ::-1]
        rs = src - src.mean(axis=1, keepdims=True)
        found = []
        for jn, (j, pose_j) in enumerate(asm.placed.items()):
            bj = self.bounds[j]
            seg_a = _segments(len(bj.points), self.stride)
            dst = apply_transform(bj.points, pose_j)[seg_a]
            dst_n = (bj.normals @ pose_j.matrix.T)[seg_a]
            ang = np.deg2rad(np.round(np.rad2deg(_procrustes(src, dst))))
            c, s = np.cos(ang)[..., None], np.sin(ang)[..., None]
            dm = dst.mean(axis=1)
            dc = dst - dm[:, None, :]
            rx = c * rs[None, :, :, 0] - s * rs[None, :, :, 1]
            ry = s * rs[None, :, :, 0] + c * rs[None, :, :, 1]
            resid = np.sqrt(((rx - dc[:, None, :, 0]) ** 2 + (ry - dc[:, None, :, 1]) ** 2).mean(axis=2))
            nx = c * src_n[None, :, :, 0] - s * src_n[None, :, :, 1]
            ny = s * src_n[None, :, :, 0] + c * src_n[None, :, :, 1]
            opp = ((1.0 + nx * dst_n[:, None, :, 0] + ny * dst_n[:, None, :, 1]) / 2.0).mean(axis=2)
            cost = DIST_WEIGHT * resid / self.spacing + NORMAL_WEIGHT * opp
            d, k = np.nonzero(cost <= VOTE_COST)
            if len(d) == 0:
                f = np.argsort(cost, axis=None, kind="stable")[: self.n_proposals]
                d, k = np.unravel_index(f, cost.shape)
            a = ang[d, k]
            rot = np.stack([np.cos(a), -np.sin(a), np.sin(a), np.cos(a)], axis=1).reshape(-1, 2, 2)
            t = dm[d] - np.einsum("nij,nj->ni", rot, src[k].mean(axis=1))
            push = dst_n[d].mean(axis=1)
            push /= np.maximum(np.linalg.norm(push, axis=1, keepdims=True), 1e-12)
            found.append((cost[d, k], a, t, push, np.full(len(d), jn)))
        cost, a, t, push, jidx = (np.concatenate(x) for x in zip(*found))
        # every well-matched segment pair votes for a relative-pose bin; the
        # true fit collects votes along the whole shared edge
        cell = VOTE_CELL * self.spacing
        abin = np.floor(np.rad2deg(a) % 360.0 / VOTE_DEG).astype(int)
        keys = np.column_stack([jidx, abin, np.floor(t / cell).astype(int)])
        _, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        votes = np.bincount(inv, weights=1.0 - cost / (2 * VOTE_COST))
        order = np.lexsort((cost, inv))  # best pair first within each bin
        first = order[np.r_[True, inv[order][1:] != inv[order][:-1]]]
        rep = first[np.lexsort((cost[first], -votes[inv[first]]))][: self.n_proposals]
        return [(float(cost[n]), RigidTransform2D(t[n], np.array([np.cos(a[n]), np.sin(a[n])])), push[n]) for n in rep]

    def refine(self, cid: str, pose: RigidTransform2D, asm: _Assembly,
               push: np.ndarray | None = None) -> tuple[RigidTransform2D, float, float]:
        """Pattern search over small rotations about the piece centre, shifts,
        and long slides along the contact (perpendicular to ``push``)."""
        best = pose
        best_s, best_ov = self.score(cid, pose, asm)
        centre = self.shapes[cid].mean(axis=0)
        if push is None:
            push = np.array([1.0, 0.0])
        tangent = np.array([-push[1], push[0]])
        slide = 32.0 * self.spacing
        shift, turn = 2.0 * self.spacing, 1.0
        while shift > 0.1 * self.spacing:
            improved = False
            moves = [(turn, 0.0, 0.0), (-turn, 0.0, 0.0), (0, shift, 0), (0, -shift, 0), (0, 0, shift), (0, 0, -shift)]
            if slide > shift:
                moves += [(0.0, *(slide * tangent)), (0.0, *(-slide * tangent))]
            for da, dx, dy in moves:
                r = _rot(np.deg2rad(da))
                c = apply_transform(centre[None], best)[0]
                t = r @ (best.translation - c) + c + np.array([dx, dy])
                rot = r @ best.rotation
                cand = RigidTransform2D(t, rot / np.linalg.norm(rot))
                s, ov = self.score(cid, cand, asm)
                if ov <= OVERLAP_TOLERANCE and s > best_s + 1e-12:
                    best, best_s, best_ov, improved = cand, s, ov, True
            if not improved:
                if slide > shift:
                    slide *= 0.5
                else:
                    shift *= 0.5
                    turn *= 0.5
        return best, best_s, best_ov

    def _diverse(self, scored):
        """Best start per piece and 5-degree rotation bin, up to ``n_refine``."""
        out, bins = [], set()
        for item in scored:
            b = (item[3], int(round(item[1].angle_deg / 5.0)) % 72)
            if b not in bins:
                bins.add(b)
                out.append(item)
            if len(out) == self.n_refine:
                break
        return out

    def solve(self, seed_piece: str | None = None) -> dict[str, RigidTransform2D]:
        if len(self.ids) < 2:
            raise ValueError("greedy matching needs at least two pieces")
        if seed_piece is None:
            seed_piece = max(self.ids, key=lambda i: (self.bounds[i].area, -self.ids.index(i)))
        placed = {seed_piece: RigidTransform2D()}
        remaining = [i for i in self.ids if i != seed_piece]
        reach = max(np.linalg.norm(s, axis=1).max() for s in self.shapes.values())
        while remaining:
            asm = _Assembly(self, placed, 2.0 * reach + 4.0 * self.spacing)
            best: _Candidate | None = None
            scored = []
            # share the proposal budget between the pieces still waiting
            budget = max(40, self.n_proposals // len(remaining))
            for cid in remaining:
                for _, pose, push in self.proposals(cid, asm)[:budget]:
                    pose, ov = self._back_off(cid, pose, push, asm)
                    if ov > OVERLAP_TOLERANCE:
                        continue
                    scored.append((self.score(cid, pose, asm)[0], pose, push, cid))
            scored.sort(key=lambda x: -x[0])
            for _, pose, push, cid in self._diverse(scored):
                pose, s, ov = self.refine(cid, pose, asm, push)
                if best is None or s > best.score:
                    best = _Candidate(s, pose, ov, cid)
            if best is None:
                # nothing fits without overlap: park the next piece beside the assembly
                cid = remaining[0]
                offset = asm.points[:, 0].max() - self.shapes[cid][:, 0].min() + 2 * self.spacing
                best = _Candidate(-np.inf, RigidTransform2D(np.array([offset, 0.0])), 0.0, cid)
            placed[best.target] = best.pose
            remaining.remove(best.target)
        return {i: placed[i] for i in self.ids}


def greedy_geometric_solve(shapes: dict[str, np.ndarray], seed_piece: str | None = None,
                           spacing: float | None = None, resolution: float = 4.0) -> dict[str, RigidTransform2D]:
    """Seed piece at the identity pose; then repeatedly place the unplaced
    piece/pose with the best boundary complementarity."""
    return GreedyMatcher(shapes, spacing, resolution).solve(seed_piece)
