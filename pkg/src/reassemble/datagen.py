"""Semi-synthetic puzzle generation.

A source image is split recursively by break lines running between two
points on the circumscribed circle of the image region.  Each line is a
chord cut into a few segments, some of them bent by a short sine series.
Fragments are then eroded and their ground-truth poses jittered slightly.

Pixel coordinates are ``(x, y) = (col, row)`` with pixel centres on the
integer grid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .checkpoint import SCHEMA_VERSION
from .errors import CutMissesRegion, FragmentVanished, SourceUnreadable
from .geometry import (
    RigidTransform2D,
    apply_transform,
    extract_contour,
    polygon_intersection_area,
    rasterize_polygon,
)
from .puzzle import Piece, Puzzle, largest_component, write_json, write_puzzle

EROSION_KERNEL = np.ones((3, 3), dtype=bool)
CUT_RETRIES = 20
MIN_AREA_FRAC = 0.005


@dataclass
class CutSpec:
    fourier_terms: int = 3
    amplitude: float | None = None  # px; None means amplitude_frac of the chord
    amplitude_frac: float = 0.03
    straight_prob: float = 0.5
    segments: tuple[int, int] = (2, 5)

    def check(self, diagonal: float | None = None):
        if not 0.0 <= self.straight_prob <= 1.0:
            raise ValueError("straight_prob must be a probability")
        if self.fourier_terms < 1 or not 1 <= self.segments[0] <= self.segments[1]:
            raise ValueError("bad term or segment counts")
        if diagonal is not None:
            amp = self.amplitude if self.amplitude is not None else self.amplitude_frac * diagonal
            if amp >= 0.1 * diagonal:
                raise ValueError(f"amplitude {amp:.1f}px must stay below 10% of the diagonal")
        return self


@dataclass
class RealismSpec:
    erosion_iterations: tuple[int, int] = (1, 5)
    jitter_rotation_deg: float = 3.0
    jitter_translation_px: float = 3.0

    def check(self):
        lo, hi = self.erosion_iterations
        if not 0 <= lo <= hi <= 5:
            raise ValueError("erosion iterations must lie in [0, 5]")
        return self


@dataclass
class GenConfig:
    pieces: tuple[int, int] = (6, 12)
    mm_per_px: float = 0.5
    canvas_px: int = 256
    min_area_frac: float = MIN_AREA_FRAC
    cut: CutSpec = field(default_factory=CutSpec)
    realism: RealismSpec = field(default_factory=RealismSpec)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Fragment:
    id: str
    mask: np.ndarray  # canvas frame, after erosion
    piece_image: np.ndarray  # RGBA, canonical frame
    pose: RigidTransform2D  # local mm -> canvas mm, jitter included
    base_pose: RigidTransform2D  # before jitter
    erosion: int


@dataclass
class GeneratedPuzzle:
    id: str
    source_id: str
    fragments: list[Fragment]
    canvas_px: tuple[int, int]
    mm_per_px: float
    seed: tuple

    def to_puzzle(self) -> Puzzle:
        pieces = [Piece(f.id, f.piece_image, self.mm_per_px) for f in self.fragments]
        gt = {f.id: f.pose for f in self.fragments}
        return Puzzle(self.id, pieces, self.canvas_px, self.mm_per_px, gt)


# ---------------------------------------------------------------------------
# cuts


def circumscribed_circle(mask: np.ndarray) -> tuple[np.ndarray, float]:
    """Circle through the corners of the region's bounding box."""
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        raise CutMissesRegion("empty region")
    lo = np.array([cols.min(), rows.min()], dtype=np.float64) - 0.5
    hi = np.array([cols.max(), rows.max()], dtype=np.float64) + 0.5
    return (lo + hi) / 2.0, float(np.linalg.norm(hi - lo) / 2.0)


def generate_cut_line(mask: np.ndarray, rng: np.random.Generator, spec: CutSpec | None = None,
                      samples_per_segment: int = 24) -> np.ndarray:
    """Break line between two random points on the circumscribed circle."""
    spec = (spec or CutSpec()).check()
    center, radius = circumscribed_circle(mask)
    a0, a1 = rng.uniform(0.0, 2.0 * np.pi, size=2)
    p0 = center + radius * np.array([np.cos(a0), np.sin(a0)])
    p1 = center + radius * np.array([np.cos(a1), np.sin(a1)])
    chord = p1 - p0
    length = float(np.linalg.norm(chord))
    if length < 1e-9:
        return np.stack([p0, p1])
    normal = np.array([-chord[1], chord[0]]) / length
    amp = spec.amplitude if spec.amplitude is not None else spec.amplitude_frac * length

    n_seg = int(rng.integers(spec.segments[0], spec.segments[1] + 1))
    cuts = np.concatenate([[0.0], np.sort(rng.uniform(0.0, 1.0, n_seg - 1)), [1.0]])
    orders = np.arange(1, spec.fourier_terms + 1)
    pts = [p0]
    for s0, s1 in zip(cuts[:-1], cuts[1:]):
        straight = rng.uniform() < spec.straight_prob
        coef = rng.uniform(-amp / orders, amp / orders)
        u = np.linspace(0.0, 1.0, samples_per_segment + 1)[1:]
        offset = np.zeros_like(u) if straight else np.sin(np.pi * np.outer(u, orders)) @ coef
        along = s0 + (s1 - s0) * u
        pts.extend(p0 + np.outer(along, chord) + np.outer(offset, normal))
    pts[-1] = p1
    return np.asarray(pts)


def _side_polygon(polyline: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Close the polyline around one side with a far-away arc."""
    far = 2.0 * radius + 2.0
    a_end = np.arctan2(*(polyline[-1] - center)[::-1])
    a_start = np.arctan2(*(polyline[0] - center)[::-1])
    # arc from end back to start, counter-clockwise
    sweep = (a_start - a_end) % (2.0 * np.pi)
    ang = a_end + np.linspace(0.0, sweep, 64)
    arc = center + far * np.column_stack([np.cos(ang), np.sin(ang)])
    return np.concatenate([polyline, arc])


def split_region(mask: np.ndarray, polyline: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partition ``mask`` along a break line whose ends lie outside the region."""
    mask = np.asarray(mask, dtype=bool)
    center, radius = circumscribed_circle(mask)
    poly = _side_polygon(np.asarray(polyline, dtype=np.float64), center, radius)
    side = rasterize_polygon(poly, 1.0, (-0.5, -0.5), mask.shape)
    a = mask & side
    b = mask & ~side
    if not a.any() or not b.any():
        raise CutMissesRegion("break line does not cross the region")
    return a, b


def _components(mask: np.ndarray) -> int:
    return ndimage.label(mask)[1]


def cut_fragment(mask: np.ndarray, rng: np.random.Generator, spec: CutSpec, min_area: int,
                 retries: int = CUT_RETRIES) -> tuple[np.ndarray, np.ndarray]:
    """Split one fragment, redrawing the line until both halves are large
    enough and connected."""
    for _ in range(retries):
        line = generate_cut_line(mask, rng, spec)
        try:
            a, b = split_region(mask, line)
        except CutMissesRegion:
            continue
        if a.sum() < min_area or b.sum() < min_area:
            continue
        if _components(a) != 1 or _components(b) != 1:
            continue
        return a, b
    raise CutMissesRegion(f"no valid cut after {retries} attempts")


def fragment_region(region: np.ndarray, target: int, rng: np.random.Generator, spec: CutSpec,
                    min_area: int) -> list[np.ndarray]:
    """Recursively cut the largest remaining fragment until ``target`` pieces."""
    frags = [np.asarray(region, dtype=bool)]
    stuck: set[int] = set()
    while len(frags) < target:
        order = sorted((i for i in range(len(frags)) if i not in stuck), key=lambda i: -int(frags[i].sum()))
        if not order:
            break
        i = order[0]
        try:
            a, b = cut_fragment(frags[i], rng, spec, min_area)
        except CutMissesRegion:
            stuck.add(i)
            continue
        frags[i] = a
        frags.append(b)
        stuck.clear()
    return frags


# ---------------------------------------------------------------------------
# realism


def erode_fragment(mask: np.ndarray, iterations: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Binary erosion with the full 3x3 element, ``iterations`` times.

    If erosion splits the fragment, only the largest part is kept.
    """
    if not 1 <= iterations <= 5:
        raise ValueError(f"iterations must lie in [1, 5], got {iterations}")
    out = ndimage.binary_erosion(np.asarray(mask, dtype=bool), EROSION_KERNEL, iterations=iterations)
    if not out.any():
        raise FragmentVanished(f"erosion with {iterations} iterations removed the fragment")
    return largest_component(out)


def jitter_fragment(pose: RigidTransform2D, rng: np.random.Generator, spec: RealismSpec | None = None,
                    mm_per_px: float = 1.0) -> RigidTransform2D:
    """Small rotation about the piece centre or a small translation, chosen
    with equal probability."""
    spec = spec or RealismSpec()
    use_rotation = rng.uniform() < 0.5
    if use_rotation:
        d = rng.uniform(-spec.jitter_rotation_deg, spec.jitter_rotation_deg)
        return RigidTransform2D(pose.translation.copy(), _rotate_unit(pose.rotation, d))
    dxy = rng.uniform(-spec.jitter_translation_px, spec.jitter_translation_px, size=2)
    return RigidTransform2D(pose.translation + dxy * mm_per_px, pose.rotation.copy())


def _rotate_unit(r: np.ndarray, degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    out = np.array([c * r[0] - s * r[1], s * r[0] + c * r[1]])
    return out / np.linalg.norm(out)


# ---------------------------------------------------------------------------
# piece images


def cut_piece_image(source_rgb: np.ndarray, frag_mask: np.ndarray, angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Resample a fragment into its own canonical frame.

    The piece image is square with odd side and centred on the fragment
    centroid; canonical axes are the canvas axes rotated by ``angle_deg``.
    Returns the RGBA piece and the centroid in canvas pixels.
    """
    rows, cols = np.nonzero(frag_mask)
    centroid = np.array([cols.mean(), rows.mean()])
    reach = np.sqrt(((cols - centroid[0]) ** 2 + (rows - centroid[1]) ** 2).max())
    half = int(np.ceil(reach)) + 2
    side = 2 * half + 1
    lc, lr = np.meshgrid(np.arange(side) - half, np.arange(side) - half)
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    x = c * lc - s * lr + centroid[0]
    y = s * lc + c * lr + centroid[1]
    coords = np.stack([y, x])
    alpha = ndimage.map_coordinates(frag_mask.astype(np.float32), coords, order=0, mode="constant", cval=0.0) > 0.5
    alpha = largest_component(alpha)
    rgb = np.stack([
        ndimage.map_coordinates(source_rgb[..., ch].astype(np.float32), coords, order=1, mode="nearest")
        for ch in range(3)
    ], axis=-1)
    img = np.zeros((side, side, 4), dtype=np.uint8)
    img[..., :3] = np.clip(np.round(rgb), 0, 255).astype(np.uint8)
    img[..., 3] = np.where(alpha, 255, 0)
    img[~alpha, :3] = 0
    return img, centroid


# ---------------------------------------------------------------------------
# sources


def procedural_source(rng: np.random.Generator, size: int = 256) -> np.ndarray:
    """A textured RGB test image: smooth colour waves plus a few soft blobs."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    for ch in range(3):
        for _ in range(4):
            f = rng.uniform(1.0, 6.0, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            img[..., ch] += np.sin(2 * np.pi * (f[0] * xx + f[1] * yy) + ph) * rng.uniform(0.3, 1.0)
    for _ in range(6):
        c = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.03, 0.12)
        col = rng.uniform(-2, 2, size=3)
        img += np.exp(-((xx - c[0]) ** 2 + (yy - c[1]) ** 2) / (2 * r * r))[..., None] * col
    img -= img.min()
    img /= img.max()
    return (img * 255).round().astype(np.uint8)


def load_source(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise SourceUnreadable(f"cannot read source image {path}: {exc}") from exc


def list_sources(directory) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in exts)
    if not files:
        raise SourceUnreadable(f"no images in {directory}")
    return files


# ---------------------------------------------------------------------------
# puzzles


def generate_puzzle(source: np.ndarray, rng: np.random.Generator, config: GenConfig | None = None,
                    puzzle_id: str = "puzzle", source_id: str = "procedural", seed=()) -> GeneratedPuzzle:
    cfg = config or GenConfig()
    cfg.realism.check()
    h, w = source.shape[:2]
    region = np.ones((h, w), dtype=bool)
    cfg.cut.check(float(np.hypot(h, w)))
    min_area = max(int(np.ceil(cfg.min_area_frac * h * w)), 16)
    target = int(rng.integers(cfg.pieces[0], cfg.pieces[1] + 1))
    masks = fragment_region(region, target, rng, cfg.cut, min_area)

    frags = []
    lo, hi = cfg.realism.erosion_iterations
    for i, m in enumerate(masks):
        iters = int(rng.integers(lo, hi + 1))
        eroded = m
        # thin fragments may vanish; fall back to gentler erosion, then none
        for it in range(iters, 0, -1):
            try:
                cand = erode_fragment(m, it)
            except FragmentVanished:
                continue
            if cand.sum() >= 16:
                eroded, iters = cand, it
                break
        else:
            iters = 0
        angle = float(rng.uniform(0.0, 360.0))
        img, centroid = cut_piece_image(source, eroded, angle)
        base = RigidTransform2D.from_angle(angle, centroid * cfg.mm_per_px)
        pose = jitter_fragment(base, rng, cfg.realism, cfg.mm_per_px)
        frags.append(Fragment(f"p{i:02d}", eroded, img, pose, base, iters))
    return GeneratedPuzzle(puzzle_id, source_id, frags, (w, h), cfg.mm_per_px, tuple(seed))


def puzzle_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def split_ids(ids: list[str], seed: int, train_frac: float = 0.8) -> dict[str, list[str]]:
    order = np.random.default_rng([int(seed), 0xC0FFEE]).permutation(len(ids))
    n_train = int(round(train_frac * len(ids)))
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return {"train": train, "test": test}


def generate_dataset(out_dir, n_puzzles: int, seed: int = 7, sources=None, config: GenConfig | None = None,
                     train_frac: float = 0.8) -> dict:
    """Write ``n_puzzles`` puzzles plus ``manifest.json`` under ``out_dir``.

    ``sources`` is a directory or a list of image paths; without it each
    puzzle gets its own procedural texture.
    """
    cfg = config or GenConfig()
    out = Path(out_dir)
    src_paths = None
    if sources is not None:
        src_paths = list_sources(sources) if isinstance(sources, (str, Path)) and Path(sources).is_dir() else [Path(s) for s in sources]
        if not src_paths:
            raise SourceUnreadable("no source images given")
    ids = [f"puzzle_{i:05d}" for i in range(n_puzzles)]
    splits = split_ids(ids, seed, train_frac)
    split_of = {pid: name for name, lst in splits.items() for pid in lst}
    counts = []
    for i, pid in enumerate(ids):
        rng = puzzle_rng(seed, i)
        if src_paths is None:
            source, source_id = procedural_source(rng, cfg.canvas_px), f"procedural_{i:05d}"
        else:
            sp = src_paths[int(rng.integers(len(src_paths)))]
            source, source_id = load_source(sp), sp.name
        gp = generate_puzzle(source, rng, cfg, pid, source_id, (seed, i))
        write_puzzle(
            out / split_of[pid] / pid,
            {f.id: f.piece_image for f in gp.fragments},
            {f.id: f.pose for f in gp.fragments},
            gp.canvas_px,
            gp.mm_per_px,
            {"source": source_id, "seed": [int(seed), i]},
        )
        counts.append(len(gp.fragments))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": int(seed),
        "n_puzzles": n_puzzles,
        "config": cfg.to_dict(),
        "splits": splits,
        "pieces_per_puzzle": counts,
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def read_manifest(root) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def reference_layout(gp: GeneratedPuzzle) -> dict:
    """Canvas-frame contours of every fragment in mm, with the jitter applied
    as a rigid motion about the piece centre.  Used to check stored ground
    truth against the generated geometry."""
    out = {}
    for f in gp.fragments:
        pts = extract_contour(f.mask).points * gp.mm_per_px
        delta = f.pose.compose(f.base_pose.inverse())
        out[f.id] = apply_transform(pts, delta)
    return out


def layout_fidelity(gp: GeneratedPuzzle, resolution: float = 4.0) -> float:
    """Area-weighted overlap between pieces placed at their stored ground
    truth and the fragments as cut on the canvas (same form as Q_pos)."""
    puzzle = gp.to_puzzle()
    ref = reference_layout(gp)
    num = den = 0.0
    for p in puzzle.pieces:
        placed = apply_transform(p.local_contour_mm, puzzle.ground_truth[p.id])
        own = polygon_intersection_area(ref[p.id], ref[p.id], resolution)
        inter = polygon_intersection_area(placed, ref[p.id], resolution)
        num += p.area_mm2 * min(inter / own, 1.0)
        den += p.area_mm2
    return num / den
