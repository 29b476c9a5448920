"""Orchestration: feature preparation, training, sampling, evaluation,
rendering and the k ablation.

Poses are diffused in normalised canvas units: translations are shifted by
the canvas centre and divided by the canvas half-extent, and keypoint
coordinates in the piece frame are divided by the same half-extent.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy import ndimage

from .checkpoint import SCHEMA_VERSION, load_checkpoint, save_checkpoint
from .config import RunConfig
from .denoiser import DenoiserConfig, PoseDenoiser
from .diffusion import (
    cosine_schedule,
    forward_noise_batch,
    oracle_predictor,
    sample,
    training_losses,
)
from .errors import DatasetEmpty, IncompatibleCheckpoint, MissingSolutions, UntrainedModel
from .features import (
    GLOBAL_SIZE,
    TextureEncoder,
    external_local_embeddings,
    extract_local_patch,
    geometric_block,
    prepare_global_image,
    read_sidecar,
)
from .geometry import Contour, Keypoint, RigidTransform2D, apply_transform, harris_keypoints
from .metrics import evaluate_solution
from .puzzle import (
    Puzzle,
    load_puzzle,
    load_solution,
    natural_key,
    save_solution,
    solution_to_json,
    write_json,
)
from .selector import KeypointSelector, pretrain_selector, select_keypoints

log = logging.getLogger(__name__)

TEXTURE_CHANNELS = 32


# ---------------------------------------------------------------------------
# data


def is_puzzle_dir(path: Path) -> bool:
    return (path / "pieces").is_dir()


def list_puzzle_dirs(root) -> list[Path]:
    """A puzzle directory, a split directory of puzzles, or a dataset root
    (whose ``train``/``test`` splits are both included)."""
    root = Path(root)
    if not root.exists():
        raise DatasetEmpty(f"{root} does not exist")
    if is_puzzle_dir(root):
        return [root]
    dirs = sorted((p for p in root.iterdir() if p.is_dir() and is_puzzle_dir(p)), key=lambda p: natural_key(p.name))
    if not dirs:
        for split in ("train", "test"):
            if (root / split).is_dir():
                dirs += list_puzzle_dirs(root / split)
    return dirs


def load_split(root, require_ground_truth: bool = True) -> list[Puzzle]:
    dirs = list_puzzle_dirs(root)
    if not dirs:
        raise DatasetEmpty(f"no puzzles under {root}")
    return [load_puzzle(d, require_ground_truth) for d in dirs]


def densify(contour: Contour, n: int) -> Contour:
    """Split every edge evenly so the contour has at least ``n`` vertices;
    the original vertices are kept."""
    m = max(1, -(-n // len(contour)))
    if m == 1:
        return contour
    p = contour.points
    q = np.roll(p, -1, axis=0)
    s = np.arange(m)[None, :, None] / m
    return Contour((p[:, None] * (1 - s) + q[:, None] * s).reshape(-1, 2))


def piece_candidates(piece, k: int) -> list[Keypoint]:
    """Harris corners of the alpha mask snapped to the contour, topped up to k.

    Small pieces whose traced contour has fewer than ``k`` vertices are
    densified first.
    """
    contour = densify(piece.contour, max(k, 3))
    return harris_keypoints(piece.mask.astype(np.float64), contour, min_count=max(k, 3))


@dataclass
class PreparedPuzzle:
    puzzle: Puzzle
    k: int
    candidates: list[list[Keypoint]]
    offsets: np.ndarray  # start row of each piece's candidates
    cand_xy: torch.Tensor  # [C, 2] normalised local coordinates
    cand_geom: torch.Tensor  # [C, 3]
    cand_patches: torch.Tensor | None  # [C, P, P, 3]
    cand_local_ext: torch.Tensor | None  # [C, D] external local embeddings
    globals_img: torch.Tensor | None  # [M, S, S, 3]
    globals_ext: torch.Tensor | None  # [M, D]
    selection: list[np.ndarray] | None  # per piece candidate indices (fixed modes)
    selector_feats: torch.Tensor | None  # [M*K, F] (frozen mode)
    center: np.ndarray
    half: float
    target: torch.Tensor | None  # [M, 4] normalised ground truth

    @property
    def num_pieces(self) -> int:
        return len(self.candidates)

    @property
    def piece_index(self) -> torch.Tensor:
        return torch.arange(self.num_pieces).repeat_interleave(self.k)

    def rows(self, selection) -> torch.Tensor:
        return torch.as_tensor(np.concatenate([self.offsets[m] + np.asarray(s) for m, s in enumerate(selection)]))

    def to_canvas(self, translation_norm, rotation) -> RigidTransform2D:
        t = np.asarray(translation_norm, dtype=np.float64) * self.half + self.center
        r = np.asarray(rotation, dtype=np.float64)
        return RigidTransform2D(t, r / np.linalg.norm(r))


def normalised_target(puzzle: Puzzle) -> torch.Tensor:
    half = puzzle.half_extent_mm
    rows = []
    for pid in puzzle.piece_ids:
        g = puzzle.ground_truth[pid]
        rows.append([*((g.translation - puzzle.center_mm) / half), *g.rotation])
    return torch.tensor(rows, dtype=torch.float32)


def prepare_puzzle(puzzle: Puzzle, cfg: RunConfig, selector: KeypointSelector | None = None) -> PreparedPuzzle:
    k = cfg.k
    half = puzzle.half_extent_mm
    cands, xy, geom, patches, ext_local, glob_img, glob_ext = [], [], [], [], [], [], []
    for piece in puzzle.pieces:
        kps = piece_candidates(piece, k)
        cands.append(kps)
        pos = np.array([kp.position for kp in kps])
        xy.append(piece.to_local_mm(pos) / half)
        geom.append(geometric_block(kps))
        if cfg.texture == "builtin-cnn":
            patches.append(np.stack([extract_local_patch(piece.image, kp, cfg.patch_size) for kp in kps]))
            glob_img.append(prepare_global_image(piece.image, GLOBAL_SIZE))
        else:
            sidecar = read_sidecar(Path(puzzle.path) / "pieces" / f"{piece.id}.emb.json")
            if sidecar["width"] != cfg.embedding_width:
                raise IncompatibleCheckpoint(f"sidecar width {sidecar['width']} != embedding_width {cfg.embedding_width}")
            ext_local.append(external_local_embeddings(sidecar, kps, kps))
            glob_ext.append(torch.tensor(sidecar["global"], dtype=torch.float32))
    offsets = np.cumsum([0] + [len(c) for c in cands[:-1]])
    prep = PreparedPuzzle(
        puzzle=puzzle,
        k=k,
        candidates=cands,
        offsets=offsets,
        cand_xy=torch.tensor(np.concatenate(xy), dtype=torch.float32),
        cand_geom=torch.cat(geom),
        cand_patches=torch.from_numpy(np.concatenate(patches)) if patches else None,
        cand_local_ext=torch.cat(ext_local) if ext_local else None,
        globals_img=torch.from_numpy(np.stack(glob_img)) if glob_img else None,
        globals_ext=torch.stack(glob_ext) if glob_ext else None,
        selection=None,
        selector_feats=None,
        center=puzzle.center_mm,
        half=half,
        target=normalised_target(puzzle) if puzzle.ground_truth is not None else None,
    )
    if cfg.selection == "fps":
        prep.selection = [select_keypoints(c, "fps", k).indices for c in cands]
    elif cfg.selection == "learnable-frozen":
        sels = [select_keypoints(c, "learnable-frozen", k, selector) for c in cands]
        prep.selection = [s.indices for s in sels]
        prep.selector_feats = torch.cat([s.gated_features for s in sels]).detach()
    return prep


# ---------------------------------------------------------------------------
# model


class ReassemblyModel(torch.nn.Module):
    """Texture encoder, optional keypoint selector and pose denoiser."""

    def __init__(self, cfg: RunConfig, selector: KeypointSelector | None = None):
        super().__init__()
        self.k = cfg.k
        self.selection = cfg.selection
        self.texture = cfg.texture
        sel_width = 0
        if cfg.selection != "fps":
            if selector is None:
                raise ValueError(f"selection mode {cfg.selection!r} needs a selector checkpoint")
            sel_width = selector.width
        # frozen selectors stay outside the parameter list
        self.selector = selector if cfg.selection == "learnable-trainable" else None
        self.encoder = TextureEncoder(cfg.embedding_width, TEXTURE_CHANNELS).initialize(cfg.seed) \
            if cfg.texture == "builtin-cnn" else None
        self.denoiser_config = DenoiserConfig(
            feature_width=3 + 2 * cfg.embedding_width,
            layers=cfg.layers,
            heads=cfg.heads,
            width=cfg.width,
            time_width=cfg.time_width,
            selector_width=sel_width,
        )
        self.denoiser = PoseDenoiser(self.denoiser_config)

    def features(self, prep: PreparedPuzzle):
        """Returns token features, normalised local coordinates and selector
        features (or None) for the k selected keypoints of every piece."""
        sel_feats = prep.selector_feats
        selection = prep.selection
        if self.selection == "learnable-trainable":
            sels = [select_keypoints(c, "learnable-trainable", self.k, self.selector) for c in prep.candidates]
            selection = [s.indices for s in sels]
            sel_feats = torch.cat([s.gated_features for s in sels])
        rows = prep.rows(selection)
        if self.encoder is not None:
            local = self.encoder.encode_local(prep.cand_patches[rows])
            glob = self.encoder.encode_global(prep.globals_img)
        else:
            local = prep.cand_local_ext[rows]
            glob = prep.globals_ext
        h = torch.cat([prep.cand_geom[rows], local, glob[prep.piece_index]], dim=1)
        return h, prep.cand_xy[rows], sel_feats

    def predictor(self, prep: PreparedPuzzle, trained: bool = True):
        with torch.no_grad():
            h, xy, sf = self.features(prep)
        pidx = prep.piece_index
        model = self.denoiser

        def predict(x_t, t):
            return model(x_t, xy, h, torch.tensor(t), pidx, selector_features=sf)

        predict.trained = trained
        return predict


def build_model(cfg: RunConfig) -> ReassemblyModel:
    torch.manual_seed(cfg.seed)
    selector = None
    if cfg.selection != "fps":
        if not cfg.selector_checkpoint:
            raise ValueError(f"selection mode {cfg.selection!r} needs selector_checkpoint")
        selector = KeypointSelector.load(cfg.selector_checkpoint, k=cfg.k)
    return ReassemblyModel(cfg, selector)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Path | None
    epochs: list[dict]
    steps: list[float]
    model: ReassemblyModel


def _make_optimizer(cfg: RunConfig, params):
    cls = torch.optim.AdamW if cfg.optimizer == "adamw" else torch.optim.Adam
    return cls(params, lr=cfg.lr)


def _check_compatible(header: dict, cfg: RunConfig) -> None:
    if header.get("kind") != "denoiser":
        raise IncompatibleCheckpoint(f"expected a denoiser checkpoint, got {header.get('kind')!r}")
    ck = header["config"]
    for key in ("k", "selection", "texture", "embedding_width", "layers", "heads", "width", "time_width", "T"):
        if ck[key] != getattr(cfg, key):
            raise IncompatibleCheckpoint(f"checkpoint {key}={ck[key]!r} but config has {getattr(cfg, key)!r}")


def _batches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    if n < batch:
        # small datasets: fill the batch cyclically with independent noise draws
        return [np.resize(order, batch)]
    return [order[i:i + batch] for i in range(0, n, batch)]


def train_step(model: ReassemblyModel, batch: list[PreparedPuzzle], schedule, gen: torch.Generator):
    feats, xy, sf, pidx, gidx, targets = [], [], [], [], [], []
    cache = {}
    offset = 0
    for g, prep in enumerate(batch):
        if id(prep) not in cache:
            cache[id(prep)] = model.features(prep)
        h, x, s = cache[id(prep)]
        feats.append(h)
        xy.append(x)
        if s is not None:
            sf.append(s)
        pidx.append(prep.piece_index + offset)
        gidx.append(torch.full((h.shape[0],), g))
        targets.append(prep.target)
        offset += prep.num_pieces
    h = torch.cat(feats)
    xy = torch.cat(xy)
    sf = torch.cat(sf) if sf else None
    pidx = torch.cat(pidx)
    gidx = torch.cat(gidx)
    target = torch.cat(targets)
    t = torch.randint(1, schedule.T + 1, (len(batch),), generator=gen)[gidx]
    noise = torch.randn(h.shape[0], 4, generator=gen)
    x0 = target[pidx]
    x_t = forward_noise_batch(x0, t, schedule, noise)
    x0_hat = model.denoiser(x_t, xy, h, t, pidx, gidx, selector_features=sf)
    return training_losses(x0_hat, target[:, :2], target[:, 2:], pidx)


def save_training_state(path, cfg: RunConfig, model, opt, gen, rng, state: dict, history: dict) -> None:
    header = {
        "config": cfg.to_dict(),
        "denoiser": model.denoiser_config.to_dict(),
        "schedule": {"kind": "cosine", "T": cfg.T},
        "normalisation": "translations (mm - canvas centre) / canvas half-extent",
        "epoch": state["epoch"],
        "step": state["step"],
    }
    payload = {
        "model": model.state_dict(),
        "optimizer": opt.state_dict(),
        "torch_rng": gen.get_state(),
        "numpy_rng": json.dumps(rng.bit_generator.state),
        "loop": json.dumps(state),
        "history": json.dumps(history),
    }
    save_checkpoint(path, "denoiser", header, payload)


def write_loss_log(path, cfg: RunConfig, history: dict) -> None:
    write_json(path, {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(), **history})


def train(cfg: RunConfig, puzzles: list[Puzzle] | None = None, resume: bool = False,
          max_steps: int | None = None) -> TrainResult:
    """Noising/denoising training on ``cfg.train_dir`` (or ``puzzles``).

    With ``resume`` and an existing ``cfg.checkpoint`` training continues
    from the saved step, optimizer and RNG state, so an interrupted run
    reproduces the uninterrupted one exactly.  ``cfg.init_from`` loads
    weights only (fine-tuning).  ``max_steps`` stops after that many total
    steps and checkpoints mid-epoch.
    """
    if puzzles is None:
        if not cfg.train_dir:
            raise DatasetEmpty("no train_dir configured")
        puzzles = load_split(cfg.train_dir)
    if not puzzles:
        raise DatasetEmpty("training set is empty")
    model = build_model(cfg)
    selector = model.selector
    if cfg.selection == "learnable-frozen":
        selector = KeypointSelector.load(cfg.selector_checkpoint, k=cfg.k)
    preps = [prepare_puzzle(p, cfg, selector) for p in puzzles]
    schedule = cosine_schedule(cfg.T)
    opt = _make_optimizer(cfg, model.parameters())
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    history = {"epochs": [], "steps": []}
    state = {"epoch": 0, "step": 0, "batches": None, "pos": 0, "losses": []}

    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else None
    if resume and ckpt is not None and ckpt.exists():
        header, payload = load_checkpoint(ckpt)
        _check_compatible(header, cfg)
        model.load_state_dict(payload["model"])
        opt.load_state_dict(payload["optimizer"])
        gen.set_state(payload["torch_rng"])
        rng.bit_generator.state = json.loads(payload["numpy_rng"])
        state = json.loads(payload["loop"])
        history = json.loads(payload["history"])
    elif cfg.init_from:
        header, payload = load_checkpoint(cfg.init_from)
        _check_compatible(header, cfg)
        model.load_state_dict(payload["model"])

    model.train()
    while state["epoch"] < cfg.epochs:
        if state["batches"] is None:
            state["batches"] = [b.tolist() for b in _batches(len(preps), cfg.batch_size, rng)]
            state["pos"], state["losses"] = 0, []
        while state["pos"] < len(state["batches"]):
            if max_steps is not None and state["step"] >= max_steps:
                break
            opt.zero_grad()
            rep = train_step(model, [preps[i] for i in state["batches"][state["pos"]]], schedule, gen)
            rep.total.backward()
            opt.step()
            val = float(rep.total.detach())
            state["losses"].append([val, float(rep.loss_translation.detach()), float(rep.loss_rotation.detach())])
            history["steps"].append(val)
            state["pos"] += 1
            state["step"] += 1
        if state["pos"] < len(state["batches"]):
            break  # max_steps reached mid-epoch
        arr = np.array(state["losses"])
        history["epochs"].append({
            "epoch": state["epoch"],
            "steps": len(arr),
            "loss": float(arr[:, 0].mean()),
            "loss_translation": float(arr[:, 1].mean()),
            "loss_rotation": float(arr[:, 2].mean()),
        })
        log.info("epoch %d loss %.5f", state["epoch"], history["epochs"][-1]["loss"])
        state["epoch"] += 1
        state["batches"] = None
        if ckpt is not None and cfg.checkpoint_every and state["epoch"] % cfg.checkpoint_every == 0:
            save_training_state(ckpt, cfg, model, opt, gen, rng, state, history)
            write_loss_log(ckpt.with_suffix(".loss.json"), cfg, history)
    if ckpt is not None:
        save_training_state(ckpt, cfg, model, opt, gen, rng, state, history)
        write_loss_log(ckpt.with_suffix(".loss.json"), cfg, history)
    return TrainResult(ckpt, history["epochs"], history["steps"], model)


# ---------------------------------------------------------------------------
# inference


@dataclass
class InferResult:
    poses: dict[str, RigidTransform2D]
    solution: dict
    trace: list = field(default_factory=list)


def load_model(cfg: RunConfig, checkpoint=None) -> tuple[ReassemblyModel, dict]:
    path = checkpoint or cfg.checkpoint
    if not path or not Path(path).exists():
        raise UntrainedModel(f"no trained checkpoint at {path!r}")
    header, payload = load_checkpoint(path)
    _check_compatible(header, cfg)
    model = build_model(cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, header


def infer(cfg: RunConfig, puzzle: Puzzle, checkpoint=None, oracle: bool = False, render=None,
          out=None, record_trace: bool = False, model: ReassemblyModel | None = None) -> InferResult:
    """Sample poses for every piece of ``puzzle``.

    ``oracle`` replaces the denoiser by the ground truth (debugging the
    sampler and the pose conversions end to end).
    """
    schedule = cosine_schedule(cfg.T)
    header = {}
    if oracle:
        if puzzle.ground_truth is None:
            raise ValueError("oracle inference needs ground truth")
        m = len(puzzle.pieces)
        pidx = torch.arange(m).repeat_interleave(cfg.k)
        prep = None
        target = normalised_target(puzzle)
        predict = oracle_predictor(target[pidx])
        center, half = puzzle.center_mm, puzzle.half_extent_mm
    else:
        if model is None:
            model, header = load_model(cfg, checkpoint)
        selector = None
        if cfg.selection == "learnable-frozen":
            selector = KeypointSelector.load(cfg.selector_checkpoint, k=cfg.k)
        prep = prepare_puzzle(puzzle, cfg, selector)
        pidx = prep.piece_index
        predict = model.predictor(prep, trained=header.get("step", 1) > 0)
        center, half = prep.center, prep.half
    res = sample(predict, pidx, schedule, cfg.steps, seed=cfg.seed, record_trace=record_trace)
    poses = {}
    for pid, p in zip(puzzle.piece_ids, res.poses):
        poses[pid] = RigidTransform2D(np.asarray(p.translation, dtype=np.float64) * half + center,
                                      np.asarray(p.rotation, dtype=np.float64))
    extra = {"seed": cfg.seed, "oracle": bool(oracle), "checkpoint": str(checkpoint or cfg.checkpoint or "")}
    sol = solution_to_json(puzzle.id, poses, cfg.to_dict(), extra)
    if out is not None:
        save_solution(out, puzzle.id, poses, cfg.to_dict(), extra)
    if render is not None:
        render_solution(puzzle, poses, render)
    trace = res.trace
    if record_trace:
        for step in trace:
            for p in step["poses"]:
                p["translation"] = (np.asarray(p["translation"]) * half + center).tolist()
    return InferResult(poses, sol, trace)


def render_solution(puzzle: Puzzle, poses: dict[str, RigidTransform2D], path, outline_ground_truth: bool = True) -> None:
    """Posed pieces composited on the canvas; ground-truth outlines in red."""
    w, h = puzzle.canvas_px
    mpp = puzzle.mm_per_px
    canvas = np.full((h, w, 3), 255.0)
    for piece in puzzle.pieces:
        pose = poses[piece.id]
        inv = pose.matrix.T  # local = R^T (canvas - t)
        shift = -(inv @ pose.translation) / mpp + piece.center_px
        # (row, col) index order for ndimage
        matrix = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])
        offset = np.array([shift[1], shift[0]])
        img = piece.image.astype(np.float64)
        layers = [ndimage.affine_transform(img[..., c], matrix, offset, output_shape=(h, w), order=1)
                  for c in range(4)]
        alpha = np.clip(layers[3] / 255.0, 0.0, 1.0)[..., None]
        rgb = np.stack(layers[:3], axis=-1)
        canvas = canvas * (1 - alpha) + rgb * alpha
    out = Image.fromarray(np.clip(canvas, 0, 255).astype(np.uint8))
    if outline_ground_truth and puzzle.ground_truth is not None:
        draw = ImageDraw.Draw(out)
        for piece in puzzle.pieces:
            pts = apply_transform(piece.local_contour_mm, puzzle.ground_truth[piece.id]) / mpp
            draw.polygon([tuple(p) for p in pts], outline=(220, 30, 30))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    out.save(path)


# ---------------------------------------------------------------------------
# evaluation

METRIC_KEYS = ("q_pos", "rmse_translation_mm", "rmse_rotation_deg",
               "rmse_translation_mm_conventional", "rmse_rotation_deg_conventional")


def evaluate(split_dir, solutions_dir, cfg: RunConfig | None = None, out=None, method: str = "raster",
             render_dir=None) -> dict:
    """Score ``<solutions_dir>/<puzzle_id>.json`` against every puzzle in the split.

    With ``render_dir`` an overlay PNG per puzzle is written there too.
    """
    try:
        dirs = list_puzzle_dirs(split_dir)
    except DatasetEmpty:
        dirs = []
    if not dirs:
        raise MissingSolutions(f"no puzzles in {split_dir}")
    rows = []
    for d in dirs:
        puzzle = load_puzzle(d)
        path = Path(solutions_dir) / f"{puzzle.id}.json"
        if not path.exists():
            raise MissingSolutions(f"no solution for puzzle {puzzle.id} ({path})")
        _, poses = load_solution(path)
        rep = evaluate_solution(puzzle, poses, method=method)
        rows.append({"puzzle_id": puzzle.id, "pieces": len(puzzle.pieces), **{k: getattr(rep, k) for k in METRIC_KEYS},
                     "anchor": rep.anchor, "per_piece": rep.per_piece})
        if render_dir is not None:
            render_solution(puzzle, poses, Path(render_dir) / f"{puzzle.id}.png")
    report = aggregate_reports(rows)
    report["split"] = str(split_dir)
    report["method"] = method
    if cfg is not None:
        report["config"] = cfg.to_dict()
    if out is not None:
        out = Path(out)
        write_json(out, report)
        out.with_suffix(".txt").write_text(format_table(report))
    return report


def aggregate_reports(rows: list[dict]) -> dict:
    if not rows:
        raise MissingSolutions("nothing to aggregate")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS}
    return {"schema_version": SCHEMA_VERSION, "puzzles": rows, "mean": mean}


def format_table(report: dict) -> str:
    head = f"{'puzzle':<16}{'pieces':>7}{'Q_pos':>8}{'RMSE_t(mm)':>12}{'RMSE_r(deg)':>13}"
    lines = [head, "-" * len(head)]
    for r in report["puzzles"]:
        lines.append(f"{r['puzzle_id']:<16}{r['pieces']:>7}{r['q_pos']:>8.3f}"
                     f"{r['rmse_translation_mm']:>12.3f}{r['rmse_rotation_deg']:>13.3f}")
    m = report["mean"]
    lines.append("-" * len(head))
    lines.append(f"{'mean':<16}{'':>7}{m['q_pos']:>8.3f}{m['rmse_translation_mm']:>12.3f}{m['rmse_rotation_deg']:>13.3f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# memory and the k ablation


@contextmanager
def _quiet_stderr():
    # the profiler backend writes start/stop notices straight to fd 2
    try:
        saved = os.dup(2)
    except OSError:
        yield
        return
    devnull = os.open(os.devnull, os.O_WRONLY)
    try:
        os.dup2(devnull, 2)
        yield
    finally:
        os.dup2(saved, 2)
        os.close(saved)
        os.close(devnull)


@contextmanager
def track_peak_memory():
    """Peak bytes of live torch CPU allocations inside the block.

    Allocation and free events from the profiler are replayed in time order;
    the result lands in ``box["peak_bytes"]`` when the block exits.
    """
    from torch.profiler import ProfilerActivity, profile

    box = {"peak_bytes": 0}
    with _quiet_stderr():
        prof = profile(activities=[ProfilerActivity.CPU], profile_memory=True)
        prof.__enter__()
    try:
        yield box
    finally:
        with _quiet_stderr():
            prof.__exit__(None, None, None)
        events = sorted(prof.events(), key=lambda e: e.time_range.start)
        cur = peak = 0
        for e in events:
            cur += e.self_cpu_memory_usage
            peak = max(peak, cur)
        box["peak_bytes"] = int(peak)


ABLATION_COLUMNS = ("k", "peak_memory_mb", "q_pos", "rmse_rotation_deg", "rmse_translation_mm")


def ablate_k(cfg: RunConfig, ks, train_puzzles: list[Puzzle], test_puzzles: list[Puzzle], out_csv=None,
             workdir=None) -> list[dict]:
    """Train and evaluate once per k; peak memory is measured during inference."""
    ks = [int(k) for k in ks]
    if any(k < 3 for k in ks):
        raise ValueError("every k must be >= 3")
    rows = []
    for k in ks:
        ck = replace(cfg, k=k, checkpoint=str(Path(workdir) / f"k{k}.ckpt") if workdir else None)
        result = train(ck, train_puzzles)
        result.model.eval()
        peak, reports = 0, []
        for pz in test_puzzles:
            with track_peak_memory() as mem:
                res = infer(ck, pz, model=result.model)
            peak = max(peak, mem["peak_bytes"])
            reports.append(evaluate_solution(pz, res.poses))
        rows.append({
            "k": k,
            "peak_memory_mb": peak / 2 ** 20,
            "q_pos": float(np.mean([r.q_pos for r in reports])),
            "rmse_rotation_deg": float(np.mean([r.rmse_rotation_deg for r in reports])),
            "rmse_translation_mm": float(np.mean([r.rmse_translation_mm for r in reports])),
        })
        log.info("k=%d %s", k, rows[-1])
    if out_csv is not None:
        write_ablation_csv(out_csv, rows, cfg)
    return rows


def write_ablation_csv(path, rows: list[dict], cfg: RunConfig | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in ABLATION_COLUMNS})
    if cfg is not None:
        write_json(path.with_suffix(".config.json"), {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict()})


# ---------------------------------------------------------------------------
# selector pretraining on dataset pieces


def run_selector_pretraining(cfg: RunConfig, puzzles: list[Puzzle], out, epochs: int | None = None):
    pieces = [piece_candidates(p, cfg.k) for pz in puzzles for p in pz.pieces]
    pieces = [kps for kps in pieces if len(kps) >= cfg.k]
    if not pieces:
        raise DatasetEmpty("no pieces with enough candidate keypoints")
    out = Path(out)
    selector = KeypointSelector(k=cfg.k, lambda_area=cfg.lambda_area, lambda_perimeter=cfg.lambda_perimeter)
    torch.manual_seed(cfg.seed)
    selector, history = pretrain_selector(pieces, epochs or cfg.selector_epochs, cfg.k, selector=selector,
                                          lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed)
    selector.save(out)
    write_json(out.with_suffix(".loss.json"), {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(),
                                               "epochs": history})
    return selector, history
