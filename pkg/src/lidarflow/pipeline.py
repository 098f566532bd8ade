"""Pipeline configuration and stage orchestration behind the command line.

Stages run in a fixed order: forward and backward matching, reference
disparity, the two filter stages, sparsification and interpolation.
"""
from __future__ import annotations

import difflib
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bench.metrics import OUTLIER_RULES, EvalReport, evaluate_scene_flow
from .bench.viz import render_visualizations
from .core import ROLE_SEED, ROLE_WINDOW, CalibratedFrameSet, SceneFlowField, SparseDepthMap
from .features import PatchSpec
from .filtering import FilterConfig, FilterResult, MatchSet, SgmConfig, compute_reference_disparities, filter_matches
from .interpolation import EdgeMap, InterpConfig, InterpolationResult, interpolate_matches, load_edge_map
from .io_kitti import (
    DisparityImage,
    FlowImage,
    read_disparity,
    read_flow,
    read_image,
    read_sparse,
    write_disparity,
    write_flow,
    write_image,
)
from .matching import MatchingConfig, SupportWindowConfig, build_pyramids, run_matcher

log = logging.getLogger("lidarflow")

INPUT_KEYS = ("left0", "left1", "right0", "right1", "lidar0", "lidar1")
OPTIONAL_INPUTS = ("gt_flow", "gt_disp0", "gt_disp1", "edge_map", "ref_disparity")
# stage dump directory names, in pipeline order
STAGE_DIRS = ("01_matching", "02_stage1", "03_stage2", "04_sparse")


class ConfigError(ValueError):
    """Invalid configuration file or option."""


class InputError(ValueError):
    """Missing or unreadable input file."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _rule(text: str) -> str:
    if text not in OUTLIER_RULES:
        raise ValueError(text)
    return text


# key -> (parser, type description)
_SCHEMA = {
    "window": (int, "odd int"),
    "seed": (int, "int"),
    "workers": (int, "int"),
    "outlier_rule": (_rule, "and|or"),
    "dump_stages": (_bool, "bool"),
    "out": (str, "path"),
    "patch_size": (int, "odd int"),
    "pyramid_levels": (int, "int"),
    "iterations": (int, "int"),
    "search_radius": (int, "int"),
    "tau_d": (float, "float"),
    "init_candidates": (int, "int"),
    "max_disparity": (float, "float"),
    "snap_to_lidar1": (_bool, "bool"),
    "stage1_tolerance": (float, "float"),
    "fb_tolerance": (float, "float"),
    "cluster_similarity": (float, "float"),
    "min_cluster_size": (int, "int"),
    "sgm_p1": (int, "int"),
    "sgm_p2": (int, "int"),
    "sgm_max_disparity": (int, "int"),
    "lr_tolerance": (float, "float"),
    "superpixels": (int, "int"),
    "compactness": (float, "float"),
    "anchor_proximity": (float, "float"),
    "neighborhood_size": (int, "int"),
    "geodesic_lambda": (float, "float"),
    "lidar_consistency": (float, "float"),
    "refinement_iterations": (int, "int"),
    "lidar_window": (int, "odd int"),
    **{k: (str, "path") for k in INPUT_KEYS + OPTIONAL_INPUTS},
}
CONFIG_KEYS = tuple(sorted(_SCHEMA))


@dataclass
class PipelineConfig:
    window: SupportWindowConfig = field(default_factory=SupportWindowConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    filtering: FilterConfig = field(default_factory=FilterConfig)
    interp: InterpConfig = field(default_factory=InterpConfig)
    inputs: dict = field(default_factory=dict)  # key -> path or None
    out: Path | None = None
    outlier_rule: str = "and"
    dump_stages: bool = False
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    lidar_window: int = 5  # LiDAR sparsification cell size (data preparation)

    def check_inputs(self, required=INPUT_KEYS) -> None:
        missing = [k for k in required if not self.inputs.get(k)]
        if missing:
            raise InputError("missing required input(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
        for k, p in self.inputs.items():
            if p and not Path(p).is_file():
                raise InputError(f"input file for --{k.replace('_', '-')} not found: {p}")


def read_config_file(path) -> dict:
    """Typed values from a key=value file; '#' starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, _, val = (s.strip() for s in line.partition("="))
            values[key] = _convert(key, val, f"{path}:{lineno}")
    return values


def _convert(key: str, val, where: str):
    if key not in _SCHEMA:
        close = difflib.get_close_matches(key, CONFIG_KEYS, n=1)
        hint = f"; did you mean {close[0]!r}?" if close else ""
        raise ConfigError(f"{where}: unknown key {key!r}{hint} valid keys: {', '.join(CONFIG_KEYS)}")
    if not isinstance(val, str):
        return val
    parse, kind = _SCHEMA[key]
    try:
        return parse(val)
    except ValueError:
        raise ConfigError(f"{where}: malformed value {val!r} for {key} (expected {kind})") from None


def parse_config(config_file=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, overridden by the config file, overridden by ``overrides`` (command-line flags)."""
    values = read_config_file(config_file) if config_file else {}
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _convert(k, v, "command line")
    try:
        return _build(values)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None


def _build(v: dict) -> PipelineConfig:
    seed = v.get("seed", 0)
    m = MatchingConfig()
    patch = PatchSpec(v["patch_size"] // 2) if "patch_size" in v else m.patch
    if "patch_size" in v and v["patch_size"] % 2 == 0:
        raise ConfigError("patch_size must be odd")
    matching = replace(
        m,
        patch=patch,
        rng_seed=seed,
        pyramid_levels=v.get("pyramid_levels", m.pyramid_levels),
        iterations_per_level=v.get("iterations", m.iterations_per_level),
        search_radius=v.get("search_radius", m.search_radius),
        tau_d=v.get("tau_d", m.tau_d),
        init_candidates=v.get("init_candidates", m.init_candidates),
        max_disparity=v.get("max_disparity", m.max_disparity),
        snap_to_lidar1=v.get("snap_to_lidar1", m.snap_to_lidar1),
    )
    s = SgmConfig()
    sgm = replace(s, p1=v.get("sgm_p1", s.p1), p2=v.get("sgm_p2", s.p2),
                  max_disparity=v.get("sgm_max_disparity", s.max_disparity),
                  left_right_tolerance=v.get("lr_tolerance", s.left_right_tolerance))
    fc = FilterConfig()
    filtering = replace(
        fc, sgm=sgm,
        stage1_tolerance=v.get("stage1_tolerance", fc.stage1_tolerance),
        fb_tolerance=v.get("fb_tolerance", fc.fb_tolerance),
        cluster_similarity=v.get("cluster_similarity", fc.cluster_similarity),
        min_cluster_size=v.get("min_cluster_size", fc.min_cluster_size),
    )
    ic = InterpConfig()
    interp = replace(
        ic, rng_seed=seed,
        superpixel_count=v.get("superpixels", ic.superpixel_count),
        compactness=v.get("compactness", ic.compactness),
        anchor_proximity=v.get("anchor_proximity", ic.anchor_proximity),
        neighborhood_size=v.get("neighborhood_size", ic.neighborhood_size),
        geodesic_lambda=v.get("geodesic_lambda", ic.geodesic_lambda),
        lidar_consistency=v.get("lidar_consistency", ic.lidar_consistency),
        refinement_iterations=v.get("refinement_iterations", ic.refinement_iterations),
    )
    lidar_window = v.get("lidar_window", 5)
    if lidar_window < 3 or lidar_window % 2 == 0:
        raise ConfigError("lidar_window must be odd and >= 3")
    workers = v.get("workers", os.cpu_count() or 1)
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    return PipelineConfig(
        window=SupportWindowConfig(v.get("window", 15)),
        matching=matching,
        filtering=filtering,
        interp=interp,
        inputs={k: v.get(k) for k in INPUT_KEYS + OPTIONAL_INPUTS},
        out=Path(v["out"]) if v.get("out") else None,
        outlier_rule=v.get("outlier_rule", "and"),
        dump_stages=v.get("dump_stages", False),
        workers=workers,
        lidar_window=lidar_window,
    )


# -- in-memory pipeline -------------------------------------------------------------


@dataclass
class PipelineResult:
    forward: SceneFlowField
    backward: SceneFlowField
    filtered: FilterResult
    interpolation: InterpolationResult
    timings: dict

    @property
    def dense(self) -> SceneFlowField:
        return self.interpolation.field

    def stages(self) -> list[tuple[str, SceneFlowField]]:
        """Intermediate fields in pipeline order (matching, stage 1, stage 2, sparse)."""
        return list(zip(STAGE_DIRS, (self.forward, self.filtered.after_stage1, self.filtered.after_stage2,
                                     self.filtered.matches.to_field())))


def estimate_scene_flow(
    frames: CalibratedFrameSet,
    cfg: PipelineConfig = PipelineConfig(),
    edges: EdgeMap | None = None,
    reference: DisparityImage | None = None,
) -> PipelineResult:
    """Run every stage on in-memory inputs.

    ``reference`` replaces the internal SGM disparity (the right-view check
    is then skipped). Forward and backward matching run concurrently when
    ``cfg.workers`` > 1.
    """
    return _run_stages(frames, cfg, edges, reference)


# -- field serialisation ------------------------------------------------------------


def write_field(directory, f: SceneFlowField) -> list[Path]:
    """flow.png, disp_0.png, disp_1.png, residual.png (KITTI formats) and roles.png.

    roles.png holds 0 free, 1 window, 2 seed, 3 seed whose motion was
    rejected. Residuals use the disparity encoding (absent where not measured).
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    mv = f.motion_valid
    paths = [d / "flow.png", d / "disp_0.png", d / "disp_1.png", d / "residual.png", d / "roles.png"]
    write_flow(paths[0], FlowImage(f.u, f.v, mv))
    write_disparity(paths[1], DisparityImage(f.d0, f.valid & (f.d0 > 0)))
    write_disparity(paths[2], DisparityImage(f.d1, mv & (f.d1 > 0)))
    res_ok = f.valid & np.isfinite(f.residual)
    write_disparity(paths[3], DisparityImage(np.where(res_ok, f.residual, 0.0), res_ok))
    roles = f.roles.astype(np.uint8).copy()
    roles[f.geometry_only] = 3
    write_image(paths[4], roles)
    return paths


def read_field(directory) -> SceneFlowField:
    d = Path(directory)
    flow = read_flow(d / "flow.png")
    d0 = read_disparity(d / "disp_0.png")
    d1 = read_disparity(d / "disp_1.png")
    h, w = d0.values.shape
    roles = read_image(d / "roles.png") if (d / "roles.png").exists() else np.zeros((h, w), dtype=np.uint8)
    geo = roles == 3
    role = np.where(geo, ROLE_SEED, roles).astype(np.int8)
    valid = d0.valid | flow.valid
    residual = np.full((h, w), np.inf)
    if (d / "residual.png").exists():
        r = read_disparity(d / "residual.png")
        residual[r.valid] = r.values[r.valid]
    data = np.stack([flow.u, flow.v, d0.values, d1.values], axis=-1)
    seeds = (role == ROLE_SEED) & valid
    return SceneFlowField(data, valid, seeds, role, geo & seeds, residual)


def load_frames(inputs: dict) -> CalibratedFrameSet:
    imgs = [read_image(inputs[k]) for k in ("left0", "left1", "right0", "right1")]
    return CalibratedFrameSet(*imgs, read_sparse(inputs["lidar0"]), read_sparse(inputs["lidar1"]))


def load_ground_truth(inputs: dict, shape) -> tuple[SceneFlowField, dict] | None:
    keys = ("gt_flow", "gt_disp0", "gt_disp1")
    if not any(inputs.get(k) for k in keys):
        return None
    if not all(inputs.get(k) for k in keys):
        raise InputError("ground truth needs --gt-flow, --gt-disp0 and --gt-disp1 together")
    flow = read_flow(inputs["gt_flow"])
    d0 = read_disparity(inputs["gt_disp0"])
    d1 = read_disparity(inputs["gt_disp1"])
    if not (flow.u.shape == d0.values.shape == d1.values.shape == tuple(shape)):
        raise InputError("ground truth and images differ in size")
    data = np.stack([flow.u, flow.v, d0.values, d1.values], axis=-1)
    valid = flow.valid | d0.valid | d1.valid
    gt = SceneFlowField(data, valid, np.zeros(shape, dtype=bool))
    return gt, {"fl": flow.valid, "d0": d0.valid, "d1": d1.valid}


def write_outputs(out: Path, dense: SceneFlowField, gt=None, rule: str = "and",
                  lidar0: SparseDepthMap | None = None, window: SupportWindowConfig = SupportWindowConfig()) -> list[Path]:
    """Final KITTI PNGs, colour renderings and (with ground truth) metrics files."""
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "flow.png", out / "disp_0.png", out / "disp_1.png"]
    write_flow(written[0], FlowImage(dense.u, dense.v, dense.motion_valid))
    write_disparity(written[1], DisparityImage(dense.d0, dense.valid))
    write_disparity(written[2], DisparityImage(dense.d1, dense.motion_valid))
    # renderings and metrics describe the field as stored (1/256 and 1/64 px steps)
    dense = read_field(out)
    gt_field, masks = gt if gt is not None else (None, None)
    for name, img in render_visualizations(dense, gt_field, rule).items():
        p = out / f"viz_{name}.png"
        write_image(p, img)
        written.append(p)
    if gt_field is not None:
        report = evaluate_scene_flow(dense, gt_field, lidar0, window, rule, gt_masks=masks)
        written += write_report(out, report)
    return written


def write_report(out: Path, report: EvalReport, stem: str = "metrics") -> list[Path]:
    txt, csv = out / f"{stem}.txt", out / f"{stem}.csv"
    txt.write_text(report.to_text())
    csv.write_text(report.to_csv())
    return [txt, csv]


def write_manifest(out: Path, status: str, artifacts: list, failed_stage: str | None = None,
                   error: str | None = None) -> Path:
    lines = [f"status={status}"]
    if failed_stage:
        lines.append(f"failed_stage={failed_stage}")
    if error:
        lines.append("error=" + " ".join(error.split()))
    lines += [f"artifact={Path(a).relative_to(out).as_posix()}" for a in artifacts]
    p = out / "MANIFEST"
    p.write_text("\n".join(lines) + "\n")
    return p


def run_pipeline(cfg: PipelineConfig) -> int:
    """Full run writing to ``cfg.out``. Returns 0 on success, 2 on input errors, 1 if a stage fails."""
    try:
        if cfg.out is None:
            raise InputError("no output directory given (--out)")
        cfg.check_inputs()
    except InputError as e:
        log.error("input error: %s", e)
        return 2
    out = Path(cfg.out)
    artifacts: list = []
    stage = "load"
    try:
        frames = load_frames(cfg.inputs)
        gt = load_ground_truth(cfg.inputs, frames.shape)
        edges = load_edge_map(cfg.inputs["edge_map"]) if cfg.inputs.get("edge_map") else None
        ref = read_disparity(cfg.inputs["ref_disparity"]) if cfg.inputs.get("ref_disparity") else None
        if edges is not None and edges.shape != frames.shape:
            raise InputError("edge map and images differ in size")
        if ref is not None and ref.values.shape != frames.shape:
            raise InputError("reference disparity and images differ in size")
    except (InputError, OSError, ValueError) as e:
        log.error("input error: %s", e)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    try:
        stage = "pipeline"
        result = _run_stages(frames, cfg, edges, ref)
        if cfg.dump_stages:
            stage = "dump"
            for name, f in result.stages():
                artifacts += write_field(out / "stages" / name, f)
                if gt is not None:
                    stored = read_field(out / "stages" / name)
                    rep = evaluate_scene_flow(stored, gt[0], frames.lidar0, cfg.window, cfg.outlier_rule, gt_masks=gt[1])
                    artifacts += write_report(out / "stages" / name, rep)
        stage = "outputs"
        artifacts += write_outputs(out, result.dense, gt, cfg.outlier_rule, frames.lidar0, cfg.window)
        for k, v in result.timings.items():
            log.info("%s: %.2f s", k, v)
    except Exception as e:  # noqa: BLE001 - any stage failure is reported in the manifest
        failed = getattr(e, "stage", stage)
        log.error("stage %s failed: %s", failed, e)
        write_manifest(out, "failed", artifacts, failed, f"{type(e).__name__}: {e}")
        return 1
    write_manifest(out, "ok", artifacts)
    return 0


def match_both(frames: CalibratedFrameSet, cfg: PipelineConfig) -> tuple[SceneFlowField, SceneFlowField]:
    """Forward and backward matches, concurrently when ``cfg.workers`` > 1."""
    pyramid = build_pyramids(frames, cfg.matching)
    with ThreadPoolExecutor(max_workers=max(1, min(2, cfg.workers))) as pool:
        jobs = [pool.submit(run_matcher, None, d, cfg.matching, cfg.window, pyramid) for d in ("forward", "backward")]
        return jobs[0].result(), jobs[1].result()


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{type(cause).__name__}: {cause}")
        self.stage = stage


def _run_stages(frames, cfg, edges, ref) -> PipelineResult:
    """``estimate_scene_flow`` with failures tagged by stage name."""
    t = {}
    try:
        t0 = time.perf_counter()
        fwd, bwd = match_both(frames, cfg)
        t["matching"] = time.perf_counter() - t0
    except Exception as e:
        raise StageError("matching", e) from e
    try:
        t0 = time.perf_counter()
        if ref is None:
            ref, ref_right = compute_reference_disparities(frames.left0, frames.right0, cfg.filtering.sgm)
        else:
            ref_right = None
        filtered = filter_matches(fwd, bwd, ref, cfg.filtering, ref_right)
        t["filtering"] = time.perf_counter() - t0
    except Exception as e:
        raise StageError("filtering", e) from e
    try:
        t0 = time.perf_counter()
        interp = interpolate_matches(filtered.matches, frames.left0, cfg.interp, edges)
        t["interpolation"] = time.perf_counter() - t0
    except Exception as e:
        raise StageError("interpolation", e) from e
    return PipelineResult(fwd, bwd, filtered, interp, t)


__all__ = [
    "PipelineConfig", "PipelineResult", "ConfigError", "InputError", "StageError", "CONFIG_KEYS",
    "parse_config", "read_config_file", "estimate_scene_flow", "match_both", "STAGE_DIRS", "run_pipeline", "write_field", "read_field",
    "load_frames", "load_ground_truth", "write_outputs", "write_manifest", "MatchSet", "ROLE_WINDOW",
]
