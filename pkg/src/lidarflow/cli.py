"""``lidarflow`` command line.

Exit status: 0 when every requested artifact was written, 2 for input or
configuration errors (nothing is written), 1 when a processing stage fails
(a MANIFEST naming the stage is written for ``run``).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .bench.metrics import evaluate_scene_flow
from .bench.synthetic import generate_synthetic_scene, two_plane_spec
from .bench.viz import render_visualizations
from .filtering import MatchSet, compute_reference_disparities, filter_matches
from .interpolation import interpolate_matches, load_edge_map
from .io_kitti import (
    DisparityImage,
    FlowImage,
    dewarp_future_depth,
    read_disparity,
    read_flow,
    read_image,
    read_sparse,
    sparsify_depth,
    write_disparity,
    write_flow,
    write_image,
    write_sparse,
)
from .matching import SupportWindowConfig

log = logging.getLogger("lidarflow")

_INPUT_FLAGS = {
    "left0": "left image at t0",
    "left1": "left image at t1",
    "right0": "right image at t0",
    "right1": "right image at t1",
    "lidar0": "sparse LiDAR disparity at t0 (KITTI disparity PNG)",
    "lidar1": "sparse LiDAR disparity at t1, in t1 pixel coordinates",
}
_GT_FLAGS = {
    "gt_flow": "ground-truth flow PNG",
    "gt_disp0": "ground-truth disparity at t0",
    "gt_disp1": "ground-truth disparity at t1 aligned to t0",
}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file (command-line flags take precedence)")
    p.add_argument("--window", type=int, help="support window size in pixels (default 15)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--workers", type=int, help="worker threads (default: CPU count)")


def _inputs(p, keys: dict, required: bool = False) -> None:
    for k, h in keys.items():
        p.add_argument(_flag(k), dest=k, required=required, help=h)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lidarflow", description="Dense scene flow from stereo images and sparse LiDAR.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log stage timings")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full pipeline")
    _inputs(p, _INPUT_FLAGS)
    _inputs(p, _GT_FLAGS)
    p.add_argument("--out", help="output directory")
    _common(p)
    p.add_argument("--dump-stages", action="store_const", const="true", default=None,
                   help="write the intermediate field after every stage")
    p.add_argument("--edge-map", dest="edge_map", help="precomputed edge map PNG (8 or 16 bit)")
    p.add_argument("--ref-disparity", dest="ref_disparity", help="reference disparity PNG replacing SGM")
    p.add_argument("--outlier-rule", dest="outlier_rule", choices=("and", "or"))

    p = sub.add_parser("match", help="forward and backward matching only")
    _inputs(p, _INPUT_FLAGS)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("filter", help="geometry and forward-backward filtering plus sparsification")
    p.add_argument("--forward", required=True, help="forward match directory (from 'match')")
    p.add_argument("--backward", required=True, help="backward match directory")
    p.add_argument("--left0")
    p.add_argument("--right0")
    p.add_argument("--ref-disparity", dest="ref_disparity")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("interpolate", help="dense interpolation of filtered matches")
    p.add_argument("--matches", required=True, help="match directory (e.g. 04_sparse from 'filter')")
    p.add_argument("--left0", required=True)
    p.add_argument("--edge-map", dest="edge_map")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("eval", help="metrics of a result directory against ground truth")
    p.add_argument("--result", required=True, help="directory with flow.png, disp_0.png, disp_1.png")
    _inputs(p, _GT_FLAGS, required=True)
    p.add_argument("--lidar0", help="LiDAR seeds, enables the per-region breakdown")
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--outlier-rule", dest="outlier_rule", choices=("and", "or"), default="and")
    p.add_argument("--out", help="directory for metrics.txt and metrics.csv (default: print only)")

    p = sub.add_parser("sparsify", help="thin a dense LiDAR disparity map to one point per cell")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lidar-window", dest="lidar_window", type=int, default=5)

    p = sub.add_parser("dewarp", help="move t0-aligned t1 disparities into the t1 frame")
    p.add_argument("--disp1", required=True)
    p.add_argument("--gt-flow", dest="gt_flow", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="write a synthetic two-plane scene with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=192)
    p.add_argument("--seed", type=int, default=7, help="texture seed")
    p.add_argument("--lidar-density", dest="lidar_density", type=float, default=0.001)
    p.add_argument("--flat-patch", dest="flat_patch", type=int, nargs=2, metavar=("X", "Y"))

    p = sub.add_parser("viz", help="colour renderings of a result directory")
    p.add_argument("--result", required=True)
    _inputs(p, _GT_FLAGS)
    p.add_argument("--outlier-rule", dest="outlier_rule", choices=("and", "or"), default="and")
    p.add_argument("--out", required=True)
    return ap


def _config(args, keys) -> pl.PipelineConfig:
    overrides = {k: getattr(args, k, None) for k in keys}
    return pl.parse_config(getattr(args, "config", None), {k: v for k, v in overrides.items() if v is not None})


_RUN_KEYS = tuple(pl.INPUT_KEYS) + tuple(pl.OPTIONAL_INPUTS) + ("out", "window", "seed", "workers",
                                                                   "dump_stages", "outlier_rule")


def _cmd_run(args) -> int:
    return pl.run_pipeline(_config(args, _RUN_KEYS))


def _cmd_match(args) -> int:
    cfg = _config(args, _RUN_KEYS)
    cfg.check_inputs()
    frames = pl.load_frames(cfg.inputs)
    res = pl.match_both(frames, cfg)
    out = Path(args.out)
    pl.write_field(out / "forward", res[0])
    pl.write_field(out / "backward", res[1])
    return 0


def _cmd_filter(args) -> int:
    cfg = _config(args, ("window", "seed", "workers"))
    fwd, bwd = pl.read_field(args.forward), pl.read_field(args.backward)
    if args.ref_disparity:
        ref, ref_right = read_disparity(args.ref_disparity), None
    elif args.left0 and args.right0:
        ref, ref_right = compute_reference_disparities(read_image(args.left0), read_image(args.right0),
                                                       cfg.filtering.sgm)
    else:
        raise pl.InputError("either --ref-disparity or both --left0 and --right0 are required")
    res = filter_matches(fwd, bwd, ref, cfg.filtering, ref_right)
    out = Path(args.out)
    for name, f in zip(pl.STAGE_DIRS[1:], (res.after_stage1, res.after_stage2, res.matches.to_field())):
        pl.write_field(out / name, f)
    return 0


def _cmd_interpolate(args) -> int:
    cfg = _config(args, ("window", "seed", "workers", "edge_map"))
    f = pl.read_field(args.matches)
    matches = MatchSet.from_field(f, f.valid)
    image = read_image(args.left0)
    edges = load_edge_map(args.edge_map) if args.edge_map else None
    res = interpolate_matches(matches, image, cfg.interp, edges)
    pl.write_outputs(Path(args.out), res.field)
    return 0


def _read_result(directory) -> pl.SceneFlowField:
    d = Path(directory)
    for name in ("flow.png", "disp_0.png", "disp_1.png"):
        if not (d / name).is_file():
            raise pl.InputError(f"result directory lacks {name}: {d}")
    return pl.read_field(d)


def _gt(args, shape):
    inputs = {k: getattr(args, k, None) for k in _GT_FLAGS}
    for k, p in inputs.items():
        if p and not Path(p).is_file():
            raise pl.InputError(f"input file for {_flag(k)} not found: {p}")
    return pl.load_ground_truth(inputs, shape)


def _cmd_eval(args) -> int:
    res = _read_result(args.result)
    gt, masks = _gt(args, res.valid.shape)
    seeds = read_sparse(args.lidar0) if args.lidar0 else None
    report = evaluate_scene_flow(res, gt, seeds, SupportWindowConfig(args.window), args.outlier_rule, gt_masks=masks)
    sys.stdout.write(report.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        pl.write_report(out, report)
    return 0


def _cmd_sparsify(args) -> int:
    sparse = sparsify_depth(read_disparity(args.input), args.lidar_window)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_sparse(args.out, sparse)
    return 0


def _cmd_dewarp(args) -> int:
    img = dewarp_future_depth(read_disparity(args.disp1), read_flow(args.gt_flow))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_disparity(args.out, img)
    return 0


def _cmd_synth(args) -> int:
    spec = two_plane_spec(args.width, args.height, args.seed, args.lidar_density,
                          tuple(args.flat_patch) if args.flat_patch else None)
    scene = generate_synthetic_scene(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("left0", "left1", "right0", "right1"):
        write_image(out / f"{name}.png", getattr(scene, name))
    write_sparse(out / "lidar0.png", scene.lidar0)
    write_sparse(out / "lidar1.png", scene.lidar1)
    gt = scene.gt
    write_flow(out / "gt_flow.png", FlowImage(gt.u, gt.v, gt.valid))
    write_disparity(out / "gt_disp0.png", DisparityImage(gt.d0, gt.valid & (gt.d0 > 0)))
    write_disparity(out / "gt_disp1.png", DisparityImage(gt.d1, gt.valid & (gt.d1 > 0)))
    return 0


def _cmd_viz(args) -> int:
    res = _read_result(args.result)
    gt = _gt(args, res.valid.shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in render_visualizations(res, gt[0] if gt else None, args.outlier_rule).items():
        write_image(out / f"viz_{name}.png", img)
    return 0


_COMMANDS = {
    "run": _cmd_run, "match": _cmd_match, "filter": _cmd_filter, "interpolate": _cmd_interpolate,
    "eval": _cmd_eval, "sparsify": _cmd_sparsify, "dewarp": _cmd_dewarp, "synth": _cmd_synth, "viz": _cmd_viz,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="lidarflow: %(message)s", stream=sys.stderr)
    try:
        return _COMMANDS[args.command](args)
    except (pl.ConfigError, pl.InputError, FileNotFoundError) as e:
        log.error("input error: %s", e)
        return 2
    except Exception as e:  # noqa: BLE001
        log.error("%s failed: %s: %s", args.command, type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
