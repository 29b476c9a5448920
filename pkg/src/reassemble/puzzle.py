"""Puzzle data model and the on-disk layout.

A puzzle directory holds::

    pieces/<piece_id>.png   RGBA, transparent outside the fragment
    ground_truth.json       [{id, translation_mm: [x, y], rotation_deg}]
    meta.json               {schema_version, canvas_px: [w, h], mm_per_px, ...}

Each piece has a local frame in mm whose origin is the centre of its image
(x right, y down).  A pose maps local points onto the canvas:
``p_canvas = R p_local + translation``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .checkpoint import SCHEMA_VERSION
from .errors import CorruptImage, MissingGroundTruth, ScaleMissing
from .geometry import Contour, RigidTransform2D, extract_contour, polygon_area


def natural_key(s: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", s)]


def largest_component(mask: np.ndarray) -> np.ndarray:
    # 4-connectivity, matching what contour extraction accepts
    lab, n = ndimage.label(mask)
    if n <= 1:
        return np.asarray(mask, dtype=bool)
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (int(np.argmax(sizes)) + 1)


@dataclass
class Piece:
    id: str
    image: np.ndarray
    mm_per_px: float = 1.0

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 4:
            raise CorruptImage(f"piece {self.id}: expected an RGBA image, got shape {img.shape}")
        self.image = img

    @cached_property
    def mask(self) -> np.ndarray:
        m = self.image[..., 3] > 0
        if not m.any():
            raise CorruptImage(f"piece {self.id} has an empty alpha mask")
        return largest_component(m)

    @cached_property
    def contour(self) -> Contour:
        return extract_contour(self.mask)

    @property
    def center_px(self) -> np.ndarray:
        h, w = self.mask.shape
        return np.array([(w - 1) / 2.0, (h - 1) / 2.0])

    def to_local_mm(self, points_px) -> np.ndarray:
        return (np.asarray(points_px, dtype=np.float64) - self.center_px) * self.mm_per_px

    @cached_property
    def local_contour_mm(self) -> np.ndarray:
        return self.to_local_mm(self.contour.points)

    @property
    def area_mm2(self) -> float:
        return polygon_area(self.local_contour_mm)


@dataclass
class Puzzle:
    id: str
    pieces: list[Piece]
    canvas_px: tuple[int, int]
    mm_per_px: float
    ground_truth: dict[str, RigidTransform2D] | None = None
    path: Path | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [p.id for p in self.pieces]
        if len(set(ids)) != len(ids):
            raise ValueError(f"puzzle {self.id}: duplicate piece ids")

    @property
    def piece_ids(self) -> list[str]:
        return [p.id for p in self.pieces]

    def piece(self, pid: str) -> Piece:
        for p in self.pieces:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def shapes(self) -> dict[str, np.ndarray]:
        return {p.id: p.local_contour_mm for p in self.pieces}

    def areas(self) -> dict[str, float]:
        return {p.id: p.area_mm2 for p in self.pieces}

    @property
    def canvas_mm(self) -> np.ndarray:
        return np.asarray(self.canvas_px, dtype=np.float64) * self.mm_per_px

    @property
    def center_mm(self) -> np.ndarray:
        return (np.asarray(self.canvas_px, dtype=np.float64) - 1.0) / 2.0 * self.mm_per_px

    @property
    def half_extent_mm(self) -> float:
        return float(max(self.canvas_px)) / 2.0 * self.mm_per_px


def pose_to_json(pid: str, pose: RigidTransform2D) -> dict:
    return {
        "id": pid,
        "translation_mm": [float(v) for v in pose.translation],
        "rotation_deg": float(pose.angle_deg),
    }


def pose_from_json(entry: dict) -> RigidTransform2D:
    return RigidTransform2D.from_angle(float(entry["rotation_deg"]), entry["translation_mm"])


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def save_piece_png(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGBA").save(path, format="PNG", optimize=False)


def write_puzzle(path, pieces: dict[str, np.ndarray], ground_truth: dict[str, RigidTransform2D],
                 canvas_px, mm_per_px: float, extra_meta: dict | None = None) -> Path:
    path = Path(path)
    (path / "pieces").mkdir(parents=True, exist_ok=True)
    for pid in sorted(pieces, key=natural_key):
        save_piece_png(path / "pieces" / f"{pid}.png", pieces[pid])
    gt = [pose_to_json(pid, ground_truth[pid]) for pid in sorted(ground_truth, key=natural_key)]
    write_json(path / "ground_truth.json", gt)
    meta = {"schema_version": SCHEMA_VERSION, "canvas_px": [int(v) for v in canvas_px], "mm_per_px": float(mm_per_px)}
    meta.update(extra_meta or {})
    write_json(path / "meta.json", meta)
    return path


def _read_rgba(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im.convert("RGBA"))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImage(f"cannot read {path}: {exc}") from exc


def load_puzzle(path, require_ground_truth: bool = True) -> Puzzle:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise ScaleMissing(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text())
    if "mm_per_px" not in meta or "canvas_px" not in meta:
        raise ScaleMissing(f"{meta_path} lacks mm_per_px or canvas_px")
    mpp = float(meta["mm_per_px"])
    if not mpp > 0:
        raise ScaleMissing(f"{meta_path}: mm_per_px must be positive")

    pngs = {p.stem: p for p in sorted((path / "pieces").glob("*.png"))}
    gt = None
    gt_path = path / "ground_truth.json"
    if gt_path.exists():
        entries = json.loads(gt_path.read_text())
        gt = {e["id"]: pose_from_json(e) for e in entries}
        missing = sorted(set(gt) - set(pngs))
        if missing:
            raise MissingGroundTruth(f"ground truth lists pieces without images: {missing}")
        unposed = sorted(set(pngs) - set(gt))
        if unposed:
            raise MissingGroundTruth(f"pieces without ground truth: {unposed}")
    elif require_ground_truth:
        raise MissingGroundTruth(f"{gt_path} not found")

    pieces = [Piece(pid, _read_rgba(pngs[pid]), mpp) for pid in sorted(pngs, key=natural_key)]
    for p in pieces:
        p.contour  # validates the mask early
    return Puzzle(
        id=path.name,
        pieces=pieces,
        canvas_px=tuple(int(v) for v in meta["canvas_px"]),
        mm_per_px=mpp,
        ground_truth=gt,
        path=path,
        meta=meta,
    )


def solution_to_json(puzzle_id: str, poses: dict[str, RigidTransform2D], config: dict | None = None,
                     extra: dict | None = None) -> dict:
    out = {
        "schema_version": SCHEMA_VERSION,
        "puzzle_id": puzzle_id,
        "poses": [pose_to_json(pid, poses[pid]) for pid in sorted(poses, key=natural_key)],
    }
    if config is not None:
        out["config"] = config
    out.update(extra or {})
    return out


def save_solution(path, puzzle_id: str, poses: dict[str, RigidTransform2D], config: dict | None = None,
                  extra: dict | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_json(path, solution_to_json(puzzle_id, poses, config, extra))


def load_solution(path) -> tuple[str, dict[str, RigidTransform2D]]:
    data = json.loads(Path(path).read_text())
    return data["puzzle_id"], {e["id"]: pose_from_json(e) for e in data["poses"]}
