"""Colour renderings of flow, disparity and error maps (8-bit RGB)."""
from __future__ import annotations

import numpy as np

from ..core import SceneFlowField
from .metrics import is_outlier

# KITTI devkit disparity colour map: rows of (r, g, b, bin weight)
_DISP_MAP = np.array([
    [0, 0, 0, 114], [0, 0, 1, 185], [1, 0, 0, 114], [1, 0, 1, 174],
    [0, 1, 0, 114], [0, 1, 1, 185], [1, 1, 0, 114], [1, 1, 1, 0],
], dtype=np.float64)


def _color_wheel() -> np.ndarray:
    """Middlebury colour wheel (55 hues) as an (N, 3) array in [0, 255]."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    cols = []
    cols += [(255, 255 * i / RY, 0) for i in range(RY)]
    cols += [(255 - 255 * i / YG, 255, 0) for i in range(YG)]
    cols += [(0, 255, 255 * i / GC) for i in range(GC)]
    cols += [(0, 255 - 255 * i / CB, 255) for i in range(CB)]
    cols += [(255 * i / BM, 0, 255) for i in range(BM)]
    cols += [(255, 0, 255 - 255 * i / MR) for i in range(MR)]
    return np.array(cols, dtype=np.float64)


def flow_to_color(u: np.ndarray, v: np.ndarray, valid: np.ndarray | None = None,
                  max_flow: float | None = None) -> np.ndarray:
    """Hue encodes direction, saturation the magnitude relative to ``max_flow``.

    Zero flow is white and invalid pixels are black.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    valid = np.ones(u.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    mag = np.hypot(u, v)
    if max_flow is None:
        max_flow = float(mag[valid].max()) if valid.any() else 0.0
    if not max_flow > 0:
        max_flow = 1.0
    wheel = _color_wheel()
    ncols = len(wheel)
    rad = np.minimum(mag / max_flow, 1.0)
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = ((1 - f) * wheel[k0] + f * wheel[k1]) / 255.0
    col = 1.0 - rad[..., None] * (1.0 - col)
    img = np.floor(255.0 * col + 0.5).astype(np.uint8)
    img[~valid] = 0
    return img


def disparity_to_color(d: np.ndarray, valid: np.ndarray | None = None, max_disp: float | None = None) -> np.ndarray:
    """Piecewise-linear black-blue-red-magenta-green-cyan-yellow-white ramp, black where invalid."""
    d = np.asarray(d, dtype=np.float64)
    valid = (d > 0) if valid is None else np.asarray(valid, dtype=bool)
    if max_disp is None:
        max_disp = float(d[valid].max()) if valid.any() else 1.0
    if not max_disp > 0:
        max_disp = 1.0
    bins = _DISP_MAP[:-1, 3]
    cbins = np.cumsum(bins)
    bins = bins / cbins[-1]
    cbins = np.concatenate([[0.0], cbins[:-1] / cbins[-1]])
    t = np.clip(d / max_disp, 0.0, 1.0)
    ind = np.clip(np.searchsorted(cbins, t, side="right") - 1, 0, len(bins) - 1)
    frac = ((t - cbins[ind]) / bins[ind])[..., None]
    col = _DISP_MAP[ind, :3] * (1 - frac) + _DISP_MAP[ind + 1, :3] * frac
    img = np.floor(255.0 * col + 0.5).astype(np.uint8)
    img[~valid] = 0
    return img


def error_map(result: SceneFlowField, gt: SceneFlowField, rule: str = "and", px: float = 3.0,
              rel: float = 0.05) -> np.ndarray:
    """Green for scene flow inliers, red brightening with the error for outliers, black elsewhere."""
    e0 = np.abs(result.d0 - gt.d0)
    e1 = np.abs(result.d1 - gt.d1)
    ef = np.hypot(result.u - gt.u, result.v - gt.v)
    motion = result.motion_valid
    out = is_outlier(e0, np.abs(gt.d0), rule, px, rel)
    out |= motion & (is_outlier(e1, np.abs(gt.d1), rule, px, rel) | is_outlier(ef, np.hypot(gt.u, gt.v), rule, px, rel))
    worst = np.where(motion, np.maximum(np.maximum(e0, e1), ef), e0)
    shown = result.valid & gt.valid
    img = np.zeros(result.valid.shape + (3,), dtype=np.uint8)
    img[shown & ~out] = (0, 200, 0)
    red = np.floor(96 + 159 * np.clip(worst / (4 * px), 0.0, 1.0) + 0.5).astype(np.uint8)
    m = shown & out
    img[m, 0] = red[m]
    return img


def render_visualizations(result: SceneFlowField, gt: SceneFlowField | None = None, rule: str = "and",
                          max_flow: float | None = None, max_disp: float | None = None) -> dict:
    """{'flow', 'disp_0', 'disp_1'[, 'error']} as uint8 RGB images.

    Colour scales follow the ground truth when it is given so that results
    and ground truth render comparably.
    """
    if gt is not None:
        if max_flow is None and gt.valid.any():
            max_flow = float(np.hypot(gt.u, gt.v)[gt.valid].max())
        if max_disp is None and gt.valid.any():
            max_disp = float(max(gt.d0[gt.valid].max(), gt.d1[gt.valid].max()))
    if max_disp is None:
        vals = np.concatenate([result.d0[result.valid], result.d1[result.motion_valid]])
        max_disp = float(vals.max()) if vals.size else 1.0
    out = {
        "flow": flow_to_color(result.u, result.v, result.motion_valid, max_flow),
        "disp_0": disparity_to_color(result.d0, result.valid, max_disp),
        "disp_1": disparity_to_color(result.d1, result.motion_valid, max_disp),
    }
    if gt is not None:
        out["error"] = error_map(result, gt, rule)
    return out
