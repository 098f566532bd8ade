"""Analytic piecewise-planar stereo sequences with exact scene flow ground truth.

Every plane is textured in left-t0 image coordinates. A view maps such a
coordinate ``x`` affinely to its own pixel grid, so each view is rendered by
inverting that map per plane and keeping the nearest surface (largest
disparity) per pixel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..core import CalibratedFrameSet, SceneFlowField, SparseDepthMap
from ..io_kitti import DISP_SCALE, DisparityImage, sparsify_depth

_MARGIN = 96


@dataclass
class PlaneMotion:
    """Rigid image-plane motion plus a disparity scale (d1 = scale * d0)."""

    tx: float = 0.0
    ty: float = 0.0
    angle: float = 0.0  # radians, about ``center``
    center: tuple[float, float] | None = None
    disparity_scale: float = 1.0


@dataclass
class PlaneSpec:
    # d0(x, y) = a*x + b*y + c over left-t0 coordinates
    disparity: tuple[float, float, float]
    motion: PlaneMotion = field(default_factory=PlaneMotion)
    # (x0, y0, x1, y1), half-open, in left-t0 coordinates; None = unbounded
    region: tuple[float, float, float, float] | None = None
    brightness: float = 128.0
    contrast: float = 45.0
    flat_regions: list[tuple[int, int, int, int]] = field(default_factory=list)


@dataclass
class SceneSpec:
    planes: list[PlaneSpec]
    width: int = 256
    height: int = 192
    texture_seed: int = 0
    lidar_density: float = 0.001
    texture_sigma: float = 1.5
    lidar_window: int = 5


@dataclass
class SyntheticScene:
    left0: np.ndarray
    left1: np.ndarray
    right0: np.ndarray
    right1: np.ndarray
    lidar0: SparseDepthMap
    lidar1: SparseDepthMap
    gt: SceneFlowField
    gt_backward: SceneFlowField
    spec: SceneSpec
    plane_index: np.ndarray  # visible plane per left-t0 pixel

    @property
    def frames(self) -> CalibratedFrameSet:
        return CalibratedFrameSet(self.left0, self.left1, self.right0, self.right1, self.lidar0, self.lidar1)

    def without_lidar(self) -> CalibratedFrameSet:
        h, w = self.left0.shape[:2]
        return CalibratedFrameSet(self.left0, self.left1, self.right0, self.right1,
                                  SparseDepthMap(w, h), SparseDepthMap(w, h))


def _motion_affine(plane: PlaneSpec, width: int, height: int):
    """(R, o) with M(x) = R x + o mapping left-t0 to left-t1 coordinates."""
    m = plane.motion
    cx, cy = m.center if m.center is not None else ((width - 1) / 2.0, (height - 1) / 2.0)
    c, s = np.cos(m.angle), np.sin(m.angle)
    R = np.array([[c, -s], [s, c]])
    ctr = np.array([cx, cy])
    return R, ctr - R @ ctr + np.array([m.tx, m.ty])


def _view_affine(plane: PlaneSpec, view: str, width: int, height: int):
    a, b, c = plane.disparity
    s = plane.motion.disparity_scale
    if view == "left0":
        return np.eye(2), np.zeros(2)
    if view == "right0":
        return np.array([[1.0 - a, -b], [0.0, 1.0]]), np.array([-c, 0.0])
    R, o = _motion_affine(plane, width, height)
    if view == "left1":
        return R, o
    if view == "right1":
        return R - s * np.array([[a, b], [0.0, 0.0]]), o - np.array([s * c, 0.0])
    raise ValueError(view)


def _in_region(plane: PlaneSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if plane.region is None:
        return np.ones(x.shape, dtype=bool)
    x0, y0, x1, y1 = plane.region
    return (x >= x0) & (x < x1) & (y >= y0) & (y < y1)


def _textures(spec: SceneSpec) -> list[np.ndarray]:
    rng = np.random.default_rng(spec.texture_seed)
    out = []
    for plane in spec.planes:
        noise = rng.standard_normal((spec.height + 2 * _MARGIN, spec.width + 2 * _MARGIN))
        noise = ndimage.gaussian_filter(noise, spec.texture_sigma, mode="reflect")
        noise /= noise.std()
        tex = plane.brightness + plane.contrast * noise
        for x0, y0, x1, y1 in plane.flat_regions:
            tex[y0 + _MARGIN:y1 + _MARGIN, x0 + _MARGIN:x1 + _MARGIN] = plane.brightness
        out.append(tex)
    return out


def _visible(spec: SceneSpec, view: str):
    """Per pixel of ``view``: plane index (-1 if none), source coords, view disparity."""
    h, w = spec.height, spec.width
    qy, qx = np.mgrid[0:h, 0:w].astype(np.float64)
    best = np.full((h, w), -np.inf)
    idx = -np.ones((h, w), dtype=np.int64)
    sx = np.zeros((h, w))
    sy = np.zeros((h, w))
    for i, plane in enumerate(spec.planes):
        P, o = _view_affine(plane, view, w, h)
        Pi = np.linalg.inv(P)
        rx, ry = qx - o[0], qy - o[1]
        x = Pi[0, 0] * rx + Pi[0, 1] * ry
        y = Pi[1, 0] * rx + Pi[1, 1] * ry
        a, b, c = plane.disparity
        d = a * x + b * y + c
        if view in ("left1", "right1"):
            d = d * plane.motion.disparity_scale
        take = _in_region(plane, x, y) & (d > 0) & (d > best)
        best[take] = d[take]
        idx[take] = i
        sx[take] = x[take]
        sy[take] = y[take]
    return idx, sx, sy, best


def _render(spec: SceneSpec, textures, view: str) -> np.ndarray:
    idx, sx, sy, _ = _visible(spec, view)
    img = np.zeros((spec.height, spec.width))
    for i, tex in enumerate(textures):
        m = idx == i
        if np.any(m):
            coords = np.vstack([sy[m] + _MARGIN, sx[m] + _MARGIN])
            img[m] = ndimage.map_coordinates(tex, coords, order=3, mode="reflect")
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def _sample_lidar(disp: np.ndarray, density: float, window: int, rng) -> SparseDepthMap:
    h, w = disp.shape
    cells = window * window
    if density <= 0:
        return SparseDepthMap(w, h)
    # raw point density that leaves ~``density`` after one-per-cell sparsification
    frac = min(density * cells, 1.0)
    raw = 1.0 - (1.0 - frac) ** (1.0 / cells) if frac < 1.0 else 1.0
    mask = rng.random((h, w)) < raw
    q = np.floor(disp * DISP_SCALE + 0.5) / DISP_SCALE
    return sparsify_depth(DisparityImage(np.where(mask, q, 0.0), mask & (q > 0)), window)


def generate_synthetic_scene(spec: SceneSpec) -> SyntheticScene:
    """Render four views, exact forward/backward ground truth and two LiDAR frames."""
    h, w = spec.height, spec.width
    if not spec.planes:
        raise ValueError("scene needs at least one plane")
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    for i, plane in enumerate(spec.planes):
        a, b, c = plane.disparity
        inside = _in_region(plane, gx, gy)
        d = a * gx + b * gy + c
        if np.any(d[inside] <= 0) or plane.motion.disparity_scale <= 0:
            raise ValueError(f"plane {i} has non-positive disparity inside the image")

    idx0, _, _, d0 = _visible(spec, "left0")
    if np.any(idx0 < 0):
        raise ValueError("planes do not cover the reference image")
    gt = np.zeros((h, w, 4))
    for i, plane in enumerate(spec.planes):
        m = idx0 == i
        R, o = _motion_affine(plane, w, h)
        gt[..., 0][m] = (R[0, 0] - 1) * gx[m] + R[0, 1] * gy[m] + o[0]
        gt[..., 1][m] = R[1, 0] * gx[m] + (R[1, 1] - 1) * gy[m] + o[1]
        gt[..., 2][m] = d0[m]
        gt[..., 3][m] = d0[m] * plane.motion.disparity_scale

    idx1, sx1, sy1, d1 = _visible(spec, "left1")
    gtb = np.zeros((h, w, 4))
    valid_b = idx1 >= 0
    gtb[..., 0] = np.where(valid_b, sx1 - gx, 0.0)
    gtb[..., 1] = np.where(valid_b, sy1 - gy, 0.0)
    gtb[..., 2] = np.where(valid_b, d1, 0.0)
    for i, plane in enumerate(spec.planes):
        m = idx1 == i
        gtb[..., 3][m] = d1[m] / plane.motion.disparity_scale

    textures = _textures(spec)
    images = {v: _render(spec, textures, v) for v in ("left0", "left1", "right0", "right1")}
    rng = np.random.default_rng([spec.texture_seed, 1])
    lidar0 = _sample_lidar(gt[..., 2], spec.lidar_density, spec.lidar_window, rng)
    lidar1 = _sample_lidar(np.where(valid_b, gtb[..., 2], 0.0), spec.lidar_density, spec.lidar_window, rng)

    no_seeds = np.zeros((h, w), dtype=bool)
    return SyntheticScene(
        images["left0"], images["left1"], images["right0"], images["right1"],
        lidar0, lidar1,
        SceneFlowField(gt, np.ones((h, w), dtype=bool), no_seeds),
        SceneFlowField(gtb, valid_b, no_seeds.copy()),
        spec, idx0,
    )


def two_plane_spec(
    width: int = 256,
    height: int = 192,
    texture_seed: int = 7,
    lidar_density: float = 0.001,
    flat_patch: tuple[int, int] | None = None,
    flat_size: int = 32,
) -> SceneSpec:
    """Slanted textured background plus a nearer moving foreground block.

    Disparities span roughly 12 to 35 px and every motion stays under 12 px.
    ``flat_patch`` = (x, y) paints a textureless square with its top-left
    corner at that left-t0 pixel onto whichever plane is visible there.
    """
    sx, sy = width / 256.0, height / 192.0
    background = PlaneSpec(
        disparity=(0.0, 0.06 / sy, 12.0),
        motion=PlaneMotion(tx=-3.0, ty=1.0, angle=0.01, disparity_scale=1.04),
        brightness=105.0,
    )
    foreground = PlaneSpec(
        disparity=(0.03 / sx, 0.0, 28.0),
        motion=PlaneMotion(tx=8.0, ty=2.0, angle=-0.01, disparity_scale=1.05),
        region=(150 * sx, 60 * sy, 230 * sx, 150 * sy),
        brightness=165.0,
    )
    planes = [background, foreground]
    if flat_patch is not None:
        x, y = flat_patch
        rect = (x, y, x + flat_size, y + flat_size)
        x0, y0, x1, y1 = foreground.region
        target = foreground if (x0 <= x < x1 and y0 <= y < y1) else background
        target.flat_regions.append(rect)
    return SceneSpec(planes, width, height, texture_seed, lidar_density)
