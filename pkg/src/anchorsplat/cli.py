"""Command-line entry points: train, render, eval, inspect.

Exit codes: 0 success, 2 usage/config/data error, 3 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import metrics, trainer
from .config import RunConfig, load_config_file, write_config_file
from .errors import AnchorSplatError, IntegrityError, InternalError, ParseError, ValidationError
from .scene_io import Camera, load_colmap_text, load_transforms_json, split_train_test, write_png

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INTERNAL = 3


def load_scene(data_path, cfg):
    fmt = cfg.data_format
    if fmt == "auto":
        if os.path.isfile(os.path.join(data_path, "transforms.json")):
            fmt = "transforms"
        else:
            fmt = "colmap"
    if fmt == "transforms":
        scene = load_transforms_json(os.path.join(data_path, "transforms.json"))
    elif fmt == "colmap":
        scene = load_colmap_text(data_path)
    else:
        raise ValidationError(f"unknown data_format '{fmt}'")
    return split_train_test(scene, cfg.split_rule)


def _effective_config(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, base=cfg)
    if getattr(args, "iters", None) is not None:
        cfg.iterations = args.iters
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "voxel_size", None) is not None:
        cfg.voxel_size = args.voxel_size
    if getattr(args, "tau_g_mult", None) is not None:
        cfg.tau_g_mult = args.tau_g_mult
    if getattr(args, "keep_prob", None) is not None:
        cfg.keep_prob = args.keep_prob
    if getattr(args, "split_rule", None) is not None:
        cfg.split_rule = args.split_rule
    if getattr(args, "background", None) is not None:
        cfg.background = args.background
    if args.no_grow:
        cfg.enable_grow = False
    if args.no_prune:
        cfg.enable_prune = False
    if args.no_frustum_filter:
        cfg.enable_frustum = False
    if args.no_opacity_filter:
        cfg.enable_opacity = False
    return cfg


def cmd_train(args):
    cfg = _effective_config(args)
    if not os.path.isdir(args.data):
        raise ValidationError(f"data directory not found: {args.data}")
    scene = load_scene(args.data, cfg)
    os.makedirs(args.out, exist_ok=True)

    state, rows = trainer.train(scene, cfg)
    trainer.save_checkpoint(state, os.path.join(args.out, "model.ckpt"))
    trainer.write_train_log(rows, os.path.join(args.out, "train_log.csv"))
    write_config_file(state.config, os.path.join(args.out, "config_echo.cfg"))
    if rows:
        last = rows[-1]
        print(
            f"trained {last.iteration} iters: loss {last.loss:.5f}, "
            f"psnr {last.psnr:.2f} dB, anchors {last.anchors}"
        )
    print(f"voxel_size = {state.grid.voxel_size!r}")
    return EXIT_OK


def _camera_from_json(path):
    with open(path, "r") as fh:
        spec = json.load(fh)
    w2c = np.asarray(spec["world_to_camera"], dtype=np.float64).reshape(4, 4)
    return Camera(
        width=int(spec["width"]),
        height=int(spec["height"]),
        fx=float(spec["fx"]),
        fy=float(spec["fy"]),
        cx=float(spec["cx"]),
        cy=float(spec["cy"]),
        world_to_camera=w2c,
    )


def cmd_render(args):
    state = trainer.load_checkpoint(args.ckpt)
    overrides = {}
    if args.no_frustum_filter:
        overrides["enable_frustum"] = False
    if args.no_opacity_filter:
        overrides["enable_opacity"] = False

    views = []
    if args.camera:
        views.append(("camera", _camera_from_json(args.camera)))
    elif args.view is not None:
        if not args.data:
            raise ValidationError("--view requires --data to locate the dataset")
        scene = load_scene(args.data, state.config)
        if not (0 <= args.view < scene.n_views):
            raise ValidationError(f"view index {args.view} out of range (0..{scene.n_views - 1})")
        views.append((f"view_{args.view:04d}", scene.cameras[args.view]))
    else:
        raise ValidationError("render needs --view or --camera")

    os.makedirs(args.out, exist_ok=True)
    stats = []
    for name, camera in views:
        result = trainer.render_camera(state, camera, overrides=overrides)
        out_path = os.path.join(args.out, f"{name}.png")
        write_png(out_path, result.image)
        print(f"wrote {out_path}")
        stats.append(
            {
                "name": name,
                "visible_anchors": result.n_visible_anchors,
                "gaussians": result.n_rasterized,
            }
        )
    if args.dump_stats:
        with open(os.path.join(args.out, "render_stats.json"), "w") as fh:
            json.dump(stats, fh, indent=2)
    return EXIT_OK


def cmd_eval(args):
    state = trainer.load_checkpoint(args.ckpt)
    scene = load_scene(args.data, state.config)
    test_idx = scene.test_indices
    if test_idx.size == 0:
        raise ValidationError("eval needs a non-empty test split")
    report = metrics.EvalReport()
    report.model_size_mb = os.path.getsize(args.ckpt) / 2 ** 20
    for view in test_idx:
        result = trainer.render_camera(state, scene.cameras[view], scene_kind=scene.kind)
        report.add(
            view,
            metrics.psnr(result.image, scene.images[view]),
            metrics.ssim(result.image, scene.images[view]),
        )
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "eval.csv"))
    report.write_json(os.path.join(args.out, "eval.json"))
    print(
        f"eval over {len(report.view_indices)} views: "
        f"psnr {metrics.format_psnr(report.mean_psnr)}, ssim {report.mean_ssim:.4f}, "
        f"model {report.model_size_mb:.2f} MB"
    )
    return EXIT_OK


def write_anchor_ply(grid, path):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {grid.n_anchors}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property int level\nend_header\n")
        for pos, level in zip(grid.positions, grid.levels):
            fh.write(f"{pos[0]:.8f} {pos[1]:.8f} {pos[2]:.8f} {int(level)}\n")


def cmd_inspect(args):
    state = trainer.load_checkpoint(args.ckpt)
    print(f"anchors: {state.grid.n_anchors}")
    print(f"k: {state.grid.k}")
    print(f"voxel_size: {state.grid.voxel_size!r}")
    print(f"iteration: {state.iteration}")
    for name, mlp in state.decoders.named_mlps():
        print(f"params[{name}]: {mlp.n_params()}")
    print("--- config ---")
    from .config import config_to_text

    print(config_to_text(state.config), end="")
    if args.ply:
        write_anchor_ply(state.grid, args.ply)
        print(f"wrote {args.ply}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="anchorsplat",
        description="CPU trainer/renderer for anchor-scaffolded Gaussian splatting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_ablation_flags(p):
        p.add_argument("--no-grow", action="store_true", help="disable anchor growing")
        p.add_argument("--no-prune", action="store_true", help="disable anchor pruning")
        p.add_argument("--no-frustum-filter", action="store_true", help="disable frustum culling")
        p.add_argument("--no-opacity-filter", action="store_true", help="disable opacity filtering")

    p_train = sub.add_parser("train", help="optimize a model on a dataset")
    p_train.add_argument("--data", required=True, help="dataset directory")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--config", help="config file (key = value)")
    p_train.add_argument("--iters", type=int, help="override iteration count")
    p_train.add_argument("--seed", type=int, help="override RNG seed")
    p_train.add_argument("--voxel-size", dest="voxel_size", help="'auto' or a float")
    p_train.add_argument("--tau-g-mult", dest="tau_g_mult", type=float)
    p_train.add_argument("--keep-prob", dest="keep_prob", type=float)
    p_train.add_argument("--split-rule", dest="split_rule")
    p_train.add_argument("--background", dest="background")
    add_ablation_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_render = sub.add_parser("render", help="render views from a checkpoint")
    p_render.add_argument("--ckpt", required=True)
    p_render.add_argument("--out", required=True)
    p_render.add_argument("--view", type=int, help="dataset view index (needs --data)")
    p_render.add_argument("--data", help="dataset directory for --view")
    p_render.add_argument("--camera", help="JSON file with intrinsics + world_to_camera")
    p_render.add_argument("--dump-stats", action="store_true")
    p_render.add_argument("--no-grow", action="store_true", help=argparse.SUPPRESS)
    p_render.add_argument("--no-prune", action="store_true", help=argparse.SUPPRESS)
    p_render.add_argument("--no-frustum-filter", action="store_true")
    p_render.add_argument("--no-opacity-filter", action="store_true")
    p_render.set_defaults(func=cmd_render)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_inspect = sub.add_parser("inspect", help="print checkpoint summary")
    p_inspect.add_argument("--ckpt", required=True)
    p_inspect.add_argument("--ply", help="write anchor positions as ASCII PLY")
    p_inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ParseError, IntegrityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InternalError, AnchorSplatError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
