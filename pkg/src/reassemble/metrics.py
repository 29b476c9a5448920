"""Reconstruction scores: translation / rotation RMSE and the area-overlap
score ``Q_pos``, all computed after anchoring the largest piece.

Solutions and ground truth are ``{piece_id: RigidTransform2D}`` mapping
local mm to canvas mm.  ``shapes`` holds each piece's contour in its local
frame (mm).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegeneratePiece, PieceSetMismatch
from .geometry import (
    RigidTransform2D,
    apply_transform,
    polygon_area,
    polygon_intersection_area,
    rasterize_polygon,
    _grid_for,
)
from .puzzle import natural_key

DEFAULT_RESOLUTION = 4.0  # raster px per mm
METHODS = ("raster", "pointcloud")


def as_transform(pose) -> RigidTransform2D:
    if isinstance(pose, RigidTransform2D):
        return pose
    # AggregatedPose-like
    return RigidTransform2D(np.asarray(pose.translation, dtype=np.float64), np.asarray(pose.rotation, dtype=np.float64))


def _check_sets(solution, ground_truth) -> list[str]:
    if set(solution) != set(ground_truth):
        extra = sorted(set(solution) - set(ground_truth))
        missing = sorted(set(ground_truth) - set(solution))
        raise PieceSetMismatch(f"extra pieces {extra}, missing pieces {missing}")
    return sorted(solution, key=natural_key)


def translation_errors(solution, ground_truth) -> dict[str, float]:
    ids = _check_sets(solution, ground_truth)
    return {
        i: float(np.linalg.norm(as_transform(solution[i]).translation - as_transform(ground_truth[i]).translation))
        for i in ids
    }


def rotation_error_deg(a, b) -> float:
    """Absolute angle between two rotations, folded into [0, 180]."""
    ra = np.asarray(as_transform(a).rotation, dtype=np.float64)
    rb = np.asarray(as_transform(b).rotation, dtype=np.float64)
    ra = ra / np.linalg.norm(ra)
    rb = rb / np.linalg.norm(rb)
    # atan2 of cross/dot is better conditioned than arccos near 0 and 180
    cross = ra[0] * rb[1] - ra[1] * rb[0]
    dot = ra @ rb
    return float(abs(np.rad2deg(np.arctan2(cross, dot))))


def rotation_errors(solution, ground_truth) -> dict[str, float]:
    ids = _check_sets(solution, ground_truth)
    return {i: rotation_error_deg(solution[i], ground_truth[i]) for i in ids}


def rmse_translation(solution, ground_truth) -> float:
    """``sqrt(mean_m ||mu_hat - mu||)``: the unsquared-norm form."""
    e = np.array(list(translation_errors(solution, ground_truth).values()))
    return float(np.sqrt(e.mean()))


def rmse_translation_conventional(solution, ground_truth) -> float:
    e = np.array(list(translation_errors(solution, ground_truth).values()))
    return float(np.sqrt((e ** 2).mean()))


def rmse_rotation(solution, ground_truth) -> float:
    e = np.array(list(rotation_errors(solution, ground_truth).values()))
    return float(np.sqrt(e.mean()))


def rmse_rotation_conventional(solution, ground_truth) -> float:
    e = np.array(list(rotation_errors(solution, ground_truth).values()))
    return float(np.sqrt((e ** 2).mean()))


def anchor_id(ids, areas: dict[str, float] | None = None) -> str:
    """Largest piece; ties (or no areas) go to the lowest id."""
    ordered = sorted(ids, key=natural_key)
    if not ordered:
        raise ValueError("no pieces")
    if areas is None:
        return ordered[0]
    best = max(areas[i] for i in ordered)
    return next(i for i in ordered if areas[i] == best)


def anchor_align(solution, ground_truth, areas: dict[str, float] | None = None) -> dict[str, RigidTransform2D]:
    """Apply the one rigid motion that puts the anchor exactly on its ground
    truth to every predicted pose."""
    ids = _check_sets(solution, ground_truth)
    a = anchor_id(ids, areas)
    sol = {i: as_transform(solution[i]) for i in ids}
    delta = as_transform(ground_truth[a]).compose(sol[a].inverse())
    out = {i: delta.compose(sol[i]) for i in ids}
    out[a] = as_transform(ground_truth[a])
    return out


@dataclass
class MetricReport:
    q_pos: float
    rmse_translation_mm: float
    rmse_rotation_deg: float
    rmse_translation_mm_conventional: float
    rmse_rotation_deg_conventional: float
    anchor: str
    weights: dict[str, float]
    per_piece: list[dict] = field(default_factory=list)
    method: str = "raster"

    def to_dict(self) -> dict:
        return asdict(self)


def _pointcloud_overlap(shape: np.ndarray, pred: RigidTransform2D, gt: RigidTransform2D, resolution: float) -> float:
    """Fraction of the ground-truth piece's interior samples that land inside
    the predicted piece."""
    origin, grid = _grid_for(shape.min(axis=0), shape.max(axis=0), resolution)
    inside = rasterize_polygon(shape, resolution, origin, grid)
    r, c = np.nonzero(inside)
    if len(r) == 0:
        raise DegeneratePiece("piece has no interior samples")
    pts = origin + (np.column_stack([c, r]) + 0.5) / resolution
    # ground-truth canvas positions pulled back into the predicted local frame
    back = apply_transform(apply_transform(pts, gt), pred.inverse())
    cc = np.floor((back[:, 0] - origin[0]) * resolution).astype(int)
    rr = np.floor((back[:, 1] - origin[1]) * resolution).astype(int)
    ok = (rr >= 0) & (rr < grid[0]) & (cc >= 0) & (cc < grid[1])
    hit = np.zeros(len(pts), dtype=bool)
    hit[ok] = inside[rr[ok], cc[ok]]
    return float(hit.mean())


def q_pos(solution, ground_truth, shapes: dict[str, np.ndarray], resolution: float = DEFAULT_RESOLUTION,
          method: str = "raster") -> tuple[float, MetricReport]:
    """Area-weighted overlap of predicted and ground-truth placements.

    The solution is anchor-aligned first; the RMSE values in the report are
    computed on the aligned solution as well.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    ids = _check_sets(solution, ground_truth)
    if set(shapes) != set(ids):
        raise PieceSetMismatch("shapes do not match the solution's pieces")
    areas = {}
    for i in ids:
        try:
            areas[i] = polygon_area(shapes[i])
        except Exception as exc:
            raise DegeneratePiece(f"piece {i}: {exc}") from exc
        if not areas[i] > 0:
            raise DegeneratePiece(f"piece {i} has zero area")
    aligned = anchor_align(solution, ground_truth, areas)
    total = sum(areas.values())
    weights = {i: areas[i] / total for i in ids}
    gt = {i: as_transform(ground_truth[i]) for i in ids}

    per_piece = []
    score = 0.0
    for i in ids:
        if method == "raster":
            a_gt = apply_transform(shapes[i], gt[i])
            a_pred = apply_transform(shapes[i], aligned[i])
            inter = polygon_intersection_area(a_pred, a_gt, resolution)
            own = polygon_intersection_area(a_gt, a_gt, resolution)
            ratio = min(inter / own, 1.0) if own > 0 else 0.0
        else:
            ratio = _pointcloud_overlap(np.asarray(shapes[i], dtype=np.float64), aligned[i], gt[i], resolution)
        score += weights[i] * ratio
        per_piece.append({
            "id": i,
            "overlap": ratio,
            "weight": weights[i],
            "translation_error_mm": float(np.linalg.norm(aligned[i].translation - gt[i].translation)),
            "rotation_error_deg": rotation_error_deg(aligned[i], gt[i]),
        })

    report = MetricReport(
        q_pos=float(min(max(score, 0.0), 1.0)),
        rmse_translation_mm=rmse_translation(aligned, gt),
        rmse_rotation_deg=rmse_rotation(aligned, gt),
        rmse_translation_mm_conventional=rmse_translation_conventional(aligned, gt),
        rmse_rotation_deg_conventional=rmse_rotation_conventional(aligned, gt),
        anchor=anchor_id(ids, areas),
        weights=weights,
        per_piece=per_piece,
        method=method,
    )
    return report.q_pos, report


def evaluate_solution(puzzle, solution, resolution: float = DEFAULT_RESOLUTION, method: str = "raster") -> MetricReport:
    if puzzle.ground_truth is None:
        from .errors import MissingGroundTruth

        raise MissingGroundTruth(f"puzzle {puzzle.id} has no ground truth")
    _, report = q_pos(solution, puzzle.ground_truth, puzzle.shapes(), resolution, method)
    return report
