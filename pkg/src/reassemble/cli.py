"""Command-line entry point (``reassemble <subcommand>``)."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import SEED_ENV, RunConfig, load_config
from .errors import ReassemblyError

log = logging.getLogger("reassemble")


def _range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition(":")
    return int(lo), int(hi or lo)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def _config_parent() -> argparse.ArgumentParser:
    """Every RunConfig field as a flag; unset flags fall through to the file."""
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI config file; flags override it")
    g = p.add_argument_group("run config")
    for f in fields(RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=f.name.upper())
    return p


def _resolve(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    return load_config(args.config, overrides)


def cmd_synth(args) -> None:
    from .datagen import CutSpec, GenConfig, RealismSpec, generate_dataset

    cfg = GenConfig(
        pieces=_range(args.pieces),
        mm_per_px=args.mm_per_px,
        canvas_px=args.canvas_px,
        cut=CutSpec(straight_prob=args.straight_prob),
        realism=RealismSpec(_range(args.erosion), args.jitter_rot, args.jitter_trans).check(),
    )
    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV) or 7)
    manifest = generate_dataset(args.out, args.n, seed=seed, sources=args.sources, config=cfg,
                                train_frac=args.train_frac)
    counts = manifest["pieces_per_puzzle"]
    print(f"wrote {args.n} puzzles to {args.out} (mean {np.mean(counts):.2f} pieces)")


def cmd_pretrain_selector(args) -> None:
    from .pipeline import load_split, run_selector_pretraining

    cfg = _resolve(args)
    data = args.data or cfg.train_dir
    out = args.out or cfg.selector_checkpoint
    if not data or not out:
        raise SystemExit("pretrain-selector needs --data (or train_dir) and --out (or selector_checkpoint)")
    _, history = run_selector_pretraining(cfg, load_split(data), out)
    print(f"selector saved to {out}; final loss {history[-1]['exact']:.5f}")


def cmd_train(args) -> None:
    from .pipeline import train

    cfg = _resolve(args)
    if not cfg.checkpoint:
        raise SystemExit("train needs --checkpoint")
    res = train(cfg, resume=args.resume, max_steps=args.max_steps)
    last = res.epochs[-1]["loss"] if res.epochs else float("nan")
    print(f"checkpoint {res.checkpoint} after {len(res.steps)} steps; last epoch loss {last:.5f}")


def cmd_infer(args) -> None:
    from .pipeline import infer, load_model, load_split

    cfg = _resolve(args)
    puzzles = load_split(args.puzzles or cfg.test_dir, require_ground_truth=args.oracle)
    out = Path(args.out or cfg.out_dir or "solutions")
    model = None if args.oracle else load_model(cfg)[0]
    for pz in puzzles:
        render = Path(args.render) / f"{pz.id}.png" if args.render else None
        infer(cfg, pz, oracle=args.oracle, out=out / f"{pz.id}.json", render=render, model=model)
    print(f"wrote {len(puzzles)} solutions to {out}")


def cmd_eval(args) -> None:
    from .pipeline import evaluate, format_table

    cfg = _resolve(args)
    report = evaluate(args.split or cfg.test_dir, args.solutions, cfg, out=args.out, method=args.method,
                      render_dir=args.render)
    print(format_table(report), end="")


def cmd_baseline(args) -> None:
    from .baselines import genetic_solve, greedy_geometric_solve
    from .pipeline import load_split
    from .puzzle import save_solution

    cfg = _resolve(args)
    puzzles = load_split(args.puzzles or cfg.test_dir, require_ground_truth=False)
    out = Path(args.out or cfg.out_dir or "solutions")
    echo = {**cfg.to_dict(), "method": args.method}
    for pz in puzzles:
        shapes = pz.shapes()
        if args.method == "genetic":
            canvas_mm = np.asarray(pz.canvas_px) * pz.mm_per_px
            poses = genetic_solve(shapes, canvas_mm, population=args.population, generations=args.generations,
                                  rng=cfg.seed).solution
        elif len(shapes) == 1:
            from .geometry import RigidTransform2D

            poses = {pid: RigidTransform2D(pz.center_mm) for pid in shapes}
        else:
            poses = greedy_geometric_solve(shapes)
        save_solution(out / f"{pz.id}.json", pz.id, poses, echo, {"method": args.method})
    print(f"wrote {len(puzzles)} {args.method} solutions to {out}")


def cmd_ablate_k(args) -> None:
    from .pipeline import ablate_k, load_split

    cfg = _resolve(args)
    train_p = load_split(args.train or cfg.train_dir)
    test_p = load_split(args.test or cfg.test_dir)
    rows = ablate_k(cfg, args.ks, train_p, test_p, out_csv=args.out, workdir=args.workdir)
    for r in rows:
        print(f"k={r['k']:>3}  peak {r['peak_memory_mb']:8.1f} MB  Q_pos {r['q_pos']:.3f}  "
              f"rot {r['rmse_rotation_deg']:.2f} deg  trans {r['rmse_translation_mm']:.2f} mm")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reassemble", description="2D fragment reassembly by pose diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _config_parent()

    p = sub.add_parser("synth", help="generate a synthetic fragment dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, help="default: $REASSEMBLE_SEED, else 7")
    p.add_argument("--sources", help="directory of source images (default: procedural textures)")
    p.add_argument("--pieces", default="6:12", help="min:max pieces per puzzle")
    p.add_argument("--erosion", default="1:5", help="min:max erosion iterations")
    p.add_argument("--jitter-rot", type=float, default=3.0)
    p.add_argument("--jitter-trans", type=float, default=3.0)
    p.add_argument("--canvas-px", type=int, default=256)
    p.add_argument("--mm-per-px", type=float, default=0.5)
    p.add_argument("--straight-prob", type=float, default=0.5)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain-selector", parents=[common], help="unsupervised keypoint selector pretraining")
    p.add_argument("--data", help="puzzle split to draw pieces from")
    p.add_argument("--out", help="selector checkpoint path")
    p.set_defaults(func=cmd_pretrain_selector)

    p = sub.add_parser("train", parents=[common], help="train the pose denoiser")
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint if it exists")
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="sample poses for a puzzle or split")
    p.add_argument("--puzzles", help="puzzle directory or split (default: test_dir)")
    p.add_argument("--out", help="solutions directory")
    p.add_argument("--oracle", action="store_true", help="use ground truth as the denoiser")
    p.add_argument("--render", help="directory for overlay PNGs")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score solutions against ground truth")
    p.add_argument("--split", help="puzzle split (default: test_dir)")
    p.add_argument("--solutions", required=True)
    p.add_argument("--out", help="report JSON (a .txt table is written next to it)")
    p.add_argument("--method", choices=("raster", "pointcloud"), default="raster")
    p.add_argument("--render", help="directory for overlay PNGs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", parents=[common], help="genetic or greedy geometric baseline")
    p.add_argument("--method", choices=("genetic", "greedy"), required=True)
    p.add_argument("--puzzles")
    p.add_argument("--out")
    p.add_argument("--population", type=int, default=32)
    p.add_argument("--generations", type=int, default=100)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("ablate-k", parents=[common], help="train and evaluate over several k")
    p.add_argument("--ks", type=_int_list, default=[3, 5, 10, 20], help="e.g. 3,5,10,20")
    p.add_argument("--train")
    p.add_argument("--test")
    p.add_argument("--out", default="ablate_k.csv")
    p.add_argument("--workdir", help="keep per-k checkpoints here")
    p.set_defaults(func=cmd_ablate_k)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ReassemblyError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
