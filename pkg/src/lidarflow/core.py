"""Shared domain types for the scene flow pipeline.

A scene flow field stores, for every pixel ``p`` of the reference left image,
the 4-vector ``(u, v, d0, d1)``: optical flow to the next frame plus the
stereo disparity at both timestamps. Invalid pixels are tracked by a boolean
mask; the float data of an invalid pixel carries no meaning.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, NamedTuple

import numpy as np


class PixelRole(IntEnum):
    """Role of a pixel with respect to the LiDAR seeds of the reference frame."""

    FREE = 0
    WINDOW = 1  # inside a seed's support window
    SEED = 2  # carries a LiDAR measurement


ROLE_FREE = int(PixelRole.FREE)
ROLE_WINDOW = int(PixelRole.WINDOW)
ROLE_SEED = int(PixelRole.SEED)

# Rec.601 luma weights (R, G, B)
_LUMA = np.array([0.299, 0.587, 0.114])


class SceneFlowVector(NamedTuple):
    u: float
    v: float
    d0: float
    d1: float


class PixelCoord(NamedTuple):
    x: int
    y: int


def round_half_up(x):
    """Nearest-integer rounding with halves going up (floor(x + 0.5))."""
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


@dataclass
class SceneFlowField:
    """Dense grid of scene flow hypotheses.

    ``data`` has shape (H, W, 4) holding u, v, d0, d1 in pixels. ``valid`` marks
    usable pixels. ``geometry_only`` marks seeds whose motion components were
    rejected by filtering but whose LiDAR disparity remains trusted; those are
    always also ``valid``. ``residual`` holds the forward-backward round trip
    error where it has been measured (inf elsewhere).
    """

    data: np.ndarray
    valid: np.ndarray
    seed_mask: np.ndarray
    roles: np.ndarray | None = None
    geometry_only: np.ndarray | None = None
    residual: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 4:
            raise ValueError(f"scene flow data must be (H, W, 4), got {self.data.shape}")
        shape = self.data.shape[:2]
        self.valid = np.asarray(self.valid, dtype=bool)
        self.seed_mask = np.asarray(self.seed_mask, dtype=bool)
        if self.roles is None:
            self.roles = np.where(self.seed_mask, ROLE_SEED, ROLE_FREE).astype(np.int8)
        if self.geometry_only is None:
            self.geometry_only = np.zeros(shape, dtype=bool)
        if self.residual is None:
            self.residual = np.full(shape, np.inf)
        for name in ("valid", "seed_mask", "roles", "geometry_only", "residual"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if np.any(self.seed_mask & ~self.valid):
            raise ValueError("seed pixels must be valid")
        if np.any(self.geometry_only & ~(self.seed_mask & self.valid)):
            raise ValueError("geometry-only pixels must be valid seeds")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def u(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.data[..., 1]

    @property
    def d0(self) -> np.ndarray:
        return self.data[..., 2]

    @property
    def d1(self) -> np.ndarray:
        return self.data[..., 3]

    @property
    def motion_valid(self) -> np.ndarray:
        """Pixels whose (u, v, d1) components are usable."""
        return self.valid & ~self.geometry_only

    def density(self) -> float:
        return float(np.count_nonzero(self.valid)) / self.valid.size

    def vector(self, x: int, y: int) -> SceneFlowVector:
        return SceneFlowVector(*map(float, self.data[y, x]))

    def copy(self) -> "SceneFlowField":
        return SceneFlowField(
            self.data.copy(),
            self.valid.copy(),
            self.seed_mask.copy(),
            self.roles.copy(),
            self.geometry_only.copy(),
            self.residual.copy(),
        )

    @classmethod
    def empty(cls, height: int, width: int) -> "SceneFlowField":
        return cls(
            np.zeros((height, width, 4)),
            np.zeros((height, width), dtype=bool),
            np.zeros((height, width), dtype=bool),
        )


@dataclass
class SparseDepthMap:
    """Image-aligned sparse disparity measurements (one LiDAR frame)."""

    width: int
    height: int
    xs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ys: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    disparities: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.int64).reshape(-1)
        self.ys = np.asarray(self.ys, dtype=np.int64).reshape(-1)
        self.disparities = np.asarray(self.disparities, dtype=np.float64).reshape(-1)
        if not (len(self.xs) == len(self.ys) == len(self.disparities)):
            raise ValueError("xs, ys and disparities must have equal length")
        if len(self.xs):
            if self.xs.min() < 0 or self.xs.max() >= self.width:
                raise ValueError("sparse depth x coordinate out of bounds")
            if self.ys.min() < 0 or self.ys.max() >= self.height:
                raise ValueError("sparse depth y coordinate out of bounds")
            if np.any(~(self.disparities > 0)):
                raise ValueError("sparse disparities must be positive")
            flat = self.ys * self.width + self.xs
            if len(np.unique(flat)) != len(flat):
                raise ValueError("at most one measurement per pixel")

    def __len__(self) -> int:
        return len(self.xs)

    @classmethod
    def from_entries(cls, width: int, height: int, entries: Iterable[tuple[int, int, float]]):
        entries = list(entries)
        if not entries:
            return cls(width, height)
        xs, ys, ds = zip(*entries)
        return cls(width, height, np.array(xs), np.array(ys), np.array(ds, dtype=np.float64))

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "SparseDepthMap":
        """Build from an (H, W) array where values <= 0 (or NaN) mean no measurement."""
        grid = np.asarray(grid, dtype=np.float64)
        ys, xs = np.nonzero(grid > 0)
        return cls(grid.shape[1], grid.shape[0], xs, ys, grid[ys, xs])

    def entries(self) -> list[tuple[int, int, float]]:
        return [(int(x), int(y), float(d)) for x, y, d in zip(self.xs, self.ys, self.disparities)]

    def to_grid(self) -> np.ndarray:
        """Dense (H, W) array with 0 where no measurement exists."""
        grid = np.zeros((self.height, self.width))
        grid[self.ys, self.xs] = self.disparities
        return grid

    def density(self) -> float:
        return len(self) / float(self.width * self.height)


@dataclass
class CalibratedFrameSet:
    """Two stereo pairs plus two aligned sparse LiDAR frames."""

    left0: np.ndarray
    left1: np.ndarray
    right0: np.ndarray
    right1: np.ndarray
    lidar0: SparseDepthMap
    lidar1: SparseDepthMap
    baseline: float = 0.54
    focal_length: float = 721.5377

    def __post_init__(self):
        shapes = {img.shape[:2] for img in (self.left0, self.left1, self.right0, self.right1)}
        if len(shapes) != 1:
            raise ValueError(f"all images must share one size, got {sorted(shapes)}")
        (h, w), = shapes
        for name in ("lidar0", "lidar1"):
            lid = getattr(self, name)
            if (lid.height, lid.width) != (h, w):
                raise ValueError(f"{name} is {lid.width}x{lid.height}, images are {w}x{h}")
        if not self.baseline > 0 or not self.focal_length > 0:
            raise ValueError("baseline and focal length must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.left0.shape[:2]

    def luminance(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(left0, left1, right0, right1) as float luminance images."""
        return tuple(to_luminance(img) for img in (self.left0, self.left1, self.right0, self.right1))


def to_luminance(image: np.ndarray) -> np.ndarray:
    """Single-channel float image; RGB input is reduced with Rec.601 weights."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.float64)
    if image.ndim == 3 and image.shape[2] == 1:
        return image[..., 0].astype(np.float64)
    if image.ndim == 3 and image.shape[2] in (3, 4):
        return image[..., :3].astype(np.float64) @ _LUMA
    raise ValueError(f"unsupported image shape {image.shape}")


def disparity_to_depth(d, calib: CalibratedFrameSet):
    """Metric depth ``f * B / d`` for a rectified pair."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ValueError("disparity must be positive to convert to depth")
    z = calib.focal_length * calib.baseline / d
    return float(z) if z.ndim == 0 else z


def depth_to_disparity(z, calib: CalibratedFrameSet):
    z = np.asarray(z, dtype=np.float64)
    if np.any(~(z > 0)):
        raise ValueError("depth must be positive to convert to disparity")
    d = calib.focal_length * calib.baseline / z
    return float(d) if d.ndim == 0 else d
