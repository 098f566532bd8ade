"""Dense gradient-orientation descriptors and the patch matching cost."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .core import to_luminance

N_ORIENTATIONS = 8
GRID = 4
CELL = 2
DESCRIPTOR_DIM = N_ORIENTATIONS * GRID * GRID
# L1 normaliser floor, in summed gradient magnitude over the 8x8 support
_NORM_FLOOR = 128.0
_QUANT_SCALE = 2048.0


@dataclass(frozen=True)
class PatchSpec:
    radius: int = 3

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("patch radius must be >= 0")

    @property
    def size(self) -> int:
        return 2 * self.radius + 1


@dataclass
class DescriptorField:
    data: np.ndarray  # (H, W, dim) uint8

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.dtype != np.uint8:
            raise ValueError("descriptor data must be an (H, W, dim) uint8 array")
        self.data = np.ascontiguousarray(self.data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def _orientation_channels(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    pos = theta / (2 * np.pi / N_ORIENTATIONS)
    lo = np.floor(pos).astype(np.int64) % N_ORIENTATIONS
    frac = pos - np.floor(pos)
    hi = (lo + 1) % N_ORIENTATIONS
    chans = np.zeros(img.shape + (N_ORIENTATIONS,))
    rows, cols = np.indices(img.shape)
    # soft binning between the two nearest orientations
    np.add.at(chans, (rows, cols, lo), mag * (1.0 - frac))
    np.add.at(chans, (rows, cols, hi), mag * frac)
    return chans


def compute_dense_descriptors(image: np.ndarray) -> DescriptorField:
    """SIFT-like descriptor for every pixel.

    Each descriptor concatenates 8-bin orientation histograms of a 4x4 grid
    of 2x2-pixel cells (an 8x8 support centred on the pixel). The 128 values
    are L1-normalised and quantised to 8 bits. Samples beyond the border are
    clamped.
    """
    img = to_luminance(image)
    if img.size == 0:
        raise ValueError("empty image")
    h, w = img.shape
    chans = _orientation_channels(img)
    padded = np.pad(chans, ((0, 1), (0, 1), (0, 0)), mode="edge")
    cells = padded[:-1, :-1] + padded[1:, :-1] + padded[:-1, 1:] + padded[1:, 1:]

    ys = np.arange(h)
    xs = np.arange(w)
    half = GRID * CELL // 2
    blocks = []
    for i in range(GRID):
        yy = np.clip(ys - half + CELL * i, 0, h - 1)
        for j in range(GRID):
            xx = np.clip(xs - half + CELL * j, 0, w - 1)
            blocks.append(cells[yy[:, None], xx[None, :]])
    desc = np.concatenate(blocks, axis=2)
    total = desc.sum(axis=2, keepdims=True) + _NORM_FLOOR
    q = np.minimum(np.floor(desc / total * _QUANT_SCALE + 0.5), 255)
    return DescriptorField(q.astype(np.uint8))


@nb.njit(nogil=True, cache=True, fastmath=True)
def patch_cost_kernel(A, B, xa, ya, xb, yb, r, bound):
    """Sum of descriptor L2 distances over a (2r+1)^2 patch, clamped at the borders.

    Coordinates are integers. Returns early with a value > ``bound`` once the
    partial sum exceeds it.
    """
    ha, wa, dim = A.shape
    hb, wb, _ = B.shape
    total = 0.0
    for dy in range(-r, r + 1):
        ya2 = min(max(ya + dy, 0), ha - 1)
        yb2 = min(max(yb + dy, 0), hb - 1)
        for dx in range(-r, r + 1):
            xa2 = min(max(xa + dx, 0), wa - 1)
            xb2 = min(max(xb + dx, 0), wb - 1)
            a = A[ya2, xa2]
            b = B[yb2, xb2]
            # explicit int32 keeps the reduction in 32-bit SIMD lanes
            acc = nb.int32(0)
            for k in range(dim):
                d = nb.int32(a[k]) - nb.int32(b[k])
                acc = nb.int32(acc + nb.int32(d * d))
            total += math.sqrt(acc)
        if total > bound:
            return total
    return total


@nb.njit(nogil=True, cache=True)
def rint(x):
    return int(math.floor(x + 0.5))


def patch_match_cost(A: DescriptorField, B: DescriptorField, pA, pB, patch: PatchSpec = PatchSpec()) -> float:
    """Matching cost between pixel ``pA`` of A and (subpixel) position ``pB`` of B.

    ``pA`` and ``pB`` are (x, y) pairs; ``pB`` is sampled at its nearest
    integer pixel.
    """
    xa, ya = int(pA[0]), int(pA[1])
    if not (0 <= xa < A.width and 0 <= ya < A.height):
        raise IndexError(f"pA={pA} outside {A.width}x{A.height}")
    xb = int(np.floor(pB[0] + 0.5))
    yb = int(np.floor(pB[1] + 0.5))
    return float(patch_cost_kernel(A.data, B.data, xa, ya, xb, yb, patch.radius, np.inf))
