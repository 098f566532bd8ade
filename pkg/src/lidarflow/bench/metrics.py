"""Endpoint errors and outlier rates in the KITTI scene flow style."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..core import ROLE_FREE, SceneFlowField, SparseDepthMap
from ..matching import SupportWindowConfig, compute_support_roles

OUTLIER_RULES = ("and", "or")
REGIONS = ("seeds", "window", "dense")
# Table-style column order
CSV_COLUMNS = ("epe_d0", "epe_d1", "epe_fl", "out_d0", "out_d1", "out_fl", "out_sf", "density")


@dataclass
class RegionStats:
    count: int  # pixels evaluated for the scene flow outlier rate
    epe_d0: float
    epe_d1: float
    epe_fl: float
    out_d0: float  # percent
    out_d1: float
    out_fl: float
    out_sf: float


@dataclass
class EvalReport:
    rule: str
    density: float  # percent of pixels with an estimate
    overall: RegionStats
    regions: dict = field(default_factory=dict)  # name -> RegionStats

    def __getattr__(self, name):
        # expose the overall numbers directly (report.epe_d0, report.out_sf, ...)
        if name in RegionStats.__dataclass_fields__:
            return getattr(self.__dict__["overall"], name)
        raise AttributeError(name)

    def as_dict(self) -> dict:
        out = {"rule": self.rule, "density": self.density}
        for k in RegionStats.__dataclass_fields__:
            out[k] = getattr(self.overall, k)
        for name, st in self.regions.items():
            for k in RegionStats.__dataclass_fields__:
                out[f"{name}_{k}"] = getattr(st, k)
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    def to_csv(self) -> str:
        d = self.as_dict()
        return ",".join(CSV_COLUMNS) + "\n" + ",".join(_fmt(d[c]) for c in CSV_COLUMNS) + "\n"


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if math.isnan(v) else f"{v:.6f}"


def parse_report_text(text: str) -> dict:
    """Flat key=value report back into a dict of strings/floats."""
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        k, _, v = line.partition("=")
        try:
            out[k] = float(v)
        except ValueError:
            out[k] = v
    return out


def is_outlier(err: np.ndarray, magnitude: np.ndarray, rule: str = "and", px: float = 3.0,
               rel: float = 0.05) -> np.ndarray:
    """KITTI rule ('and': > px and > rel * |gt|) or the stricter 'or' rule."""
    if rule == "and":
        return (err > px) & (err > rel * magnitude)
    if rule == "or":
        return (err > px) | (err > rel * magnitude)
    raise ValueError(f"outlier rule must be one of {OUTLIER_RULES}, got {rule!r}")


def _mean(x):
    return float(np.mean(x)) if x.size else float("nan")


def _pct(x):
    return 100.0 * float(np.mean(x)) if x.size else float("nan")


def _region(result, gt, masks, region, rule, px, rel) -> RegionStats:
    m0 = masks["d0"] & result.valid & region
    mm = result.motion_valid & region
    m1 = masks["d1"] & mm
    mf = masks["fl"] & mm
    msf = masks["d0"] & masks["d1"] & masks["fl"] & mm
    e0 = np.abs(result.d0 - gt.d0)
    e1 = np.abs(result.d1 - gt.d1)
    ef = np.hypot(result.u - gt.u, result.v - gt.v)
    o0 = is_outlier(e0, np.abs(gt.d0), rule, px, rel)
    o1 = is_outlier(e1, np.abs(gt.d1), rule, px, rel)
    of = is_outlier(ef, np.hypot(gt.u, gt.v), rule, px, rel)
    return RegionStats(
        int(msf.sum()),
        _mean(e0[m0]), _mean(e1[m1]), _mean(ef[mf]),
        _pct(o0[m0]), _pct(o1[m1]), _pct(of[mf]), _pct((o0 | o1 | of)[msf]),
    )


def evaluate_scene_flow(
    result: SceneFlowField,
    gt: SceneFlowField,
    seeds: SparseDepthMap | None = None,
    window: SupportWindowConfig = SupportWindowConfig(),
    rule: str = "and",
    px: float = 3.0,
    rel: float = 0.05,
    gt_masks: dict | None = None,
) -> EvalReport:
    """Errors of ``result`` against ``gt`` over pixels valid in both.

    ``gt_masks`` may give separate validity masks for 'd0', 'd1' and 'fl'
    (KITTI ground truth has one per map); they default to ``gt.valid``.
    Geometry-only pixels count for D0 only. The scene flow outlier rate
    uses pixels where all three components are available.
    """
    if result.data.shape != gt.data.shape:
        raise ValueError(f"result {result.data.shape} and ground truth {gt.data.shape} differ in size")
    if rule not in OUTLIER_RULES:
        raise ValueError(f"outlier rule must be one of {OUTLIER_RULES}, got {rule!r}")
    masks = {k: gt.valid for k in ("d0", "d1", "fl")}
    if gt_masks:
        for k, m in gt_masks.items():
            if k not in masks:
                raise ValueError(f"unknown ground-truth mask {k!r}")
            masks[k] = np.asarray(m, dtype=bool) & gt.valid
    everything = np.ones(result.valid.shape, dtype=bool)
    overall = _region(result, gt, masks, everything, rule, px, rel)
    regions = {"dense": overall}
    if seeds is not None:
        roles = compute_support_roles(seeds, window.radius).roles
        regions["seeds"] = _region(result, gt, masks, seeds.to_grid() > 0, rule, px, rel)
        regions["window"] = _region(result, gt, masks, roles != ROLE_FREE, rule, px, rel)
    ordered = {k: regions[k] for k in REGIONS if k in regions}
    return EvalReport(rule, 100.0 * result.density(), overall, ordered)
