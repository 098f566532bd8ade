"""KITTI devkit file formats and the LiDAR data-preparation tools.

Disparity maps are 16-bit grayscale PNGs storing ``round(d * 256)`` with 0
meaning "no value". Flow maps are 16-bit RGB PNGs storing
``u * 64 + 2**15`` in R, ``v * 64 + 2**15`` in G and a validity flag in B.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import cv2
import numpy as np

from .core import SparseDepthMap, round_half_up

DISP_SCALE = 256.0
FLOW_SCALE = 64.0
FLOW_OFFSET = 2 ** 15
MAX_DISPARITY = 65535 / DISP_SCALE
MIN_DISPARITY = 1.0 / DISP_SCALE
MAX_FLOW = (2 ** 16 - 1 - FLOW_OFFSET) / FLOW_SCALE


class KittiFormatError(ValueError):
    """Raised when a file does not follow the expected KITTI PNG layout."""


@dataclass
class DisparityImage:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise ValueError("disparity values and mask must be equal 2-D arrays")
        self.values = np.where(self.valid, self.values, 0.0)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_array(cls, values: np.ndarray) -> "DisparityImage":
        """Treat non-positive and non-finite entries as invalid."""
        values = np.asarray(values, dtype=np.float64)
        valid = np.isfinite(values) & (values > 0)
        return cls(np.where(valid, values, 0.0), valid)

    @classmethod
    def from_sparse(cls, sparse: SparseDepthMap) -> "DisparityImage":
        return cls.from_array(sparse.to_grid())


@dataclass
class FlowImage:
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.u.shape == self.v.shape == self.valid.shape) or self.u.ndim != 2:
            raise ValueError("flow components and mask must be equal 2-D arrays")
        self.u = np.where(self.valid, self.u, 0.0)
        self.v = np.where(self.valid, self.v, 0.0)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


def _png_decode(data: bytes) -> np.ndarray:
    buf = np.frombuffer(data, dtype=np.uint8)
    img = cv2.imdecode(buf, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise KittiFormatError("not a decodable PNG")
    return img


def _png_encode(img: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", img)
    if not ok:
        raise KittiFormatError("PNG encoding failed")
    return buf.tobytes()


def decode_disparity(data: bytes) -> DisparityImage:
    raw = _png_decode(data)
    if raw.dtype != np.uint16 or raw.ndim != 2:
        raise KittiFormatError(f"disparity PNG must be 16-bit single channel, got {raw.dtype} {raw.shape}")
    valid = raw > 0
    return DisparityImage(raw.astype(np.float64) / DISP_SCALE, valid)


def encode_disparity(img: DisparityImage) -> bytes:
    raw = np.zeros(img.values.shape, dtype=np.uint16)
    q = round_half_up(img.values[img.valid] * DISP_SCALE)
    # keep valid pixels representable: 0 would read back as invalid
    raw[img.valid] = np.clip(q, 1, 65535).astype(np.uint16)
    return _png_encode(raw)


def decode_flow(data: bytes) -> FlowImage:
    raw = _png_decode(data)
    if raw.dtype != np.uint16 or raw.ndim != 3 or raw.shape[2] != 3:
        raise KittiFormatError(f"flow PNG must be 16-bit three channel, got {raw.dtype} {raw.shape}")
    # OpenCV orders channels B, G, R
    valid = raw[..., 0] > 0
    u = (raw[..., 2].astype(np.float64) - FLOW_OFFSET) / FLOW_SCALE
    v = (raw[..., 1].astype(np.float64) - FLOW_OFFSET) / FLOW_SCALE
    return FlowImage(u, v, valid)


def encode_flow(img: FlowImage) -> bytes:
    raw = np.zeros(img.u.shape + (3,), dtype=np.uint16)
    m = img.valid
    raw[..., 2][m] = np.clip(round_half_up(img.u[m] * FLOW_SCALE) + FLOW_OFFSET, 0, 65535)
    raw[..., 1][m] = np.clip(round_half_up(img.v[m] * FLOW_SCALE) + FLOW_OFFSET, 0, 65535)
    raw[..., 0][m] = 1
    return _png_encode(raw)


def read_disparity(path) -> DisparityImage:
    with open(path, "rb") as f:
        return decode_disparity(f.read())


def write_disparity(path, img: DisparityImage) -> None:
    with open(path, "wb") as f:
        f.write(encode_disparity(img))


def read_flow(path) -> FlowImage:
    with open(path, "rb") as f:
        return decode_flow(f.read())


def write_flow(path, img: FlowImage) -> None:
    with open(path, "wb") as f:
        f.write(encode_flow(img))


def read_sparse(path) -> SparseDepthMap:
    return extract_sparse_measurements(read_disparity(path))


def write_sparse(path, sparse: SparseDepthMap) -> None:
    write_disparity(path, DisparityImage.from_sparse(sparse))


def read_image(path) -> np.ndarray:
    """Load an 8-bit image as (H, W) grayscale or (H, W, 3) RGB."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise KittiFormatError(f"cannot decode image {path}")
    if img.dtype != np.uint8:
        raise KittiFormatError(f"expected an 8-bit image: {path}")
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[..., :3]
        img = img[..., ::-1].copy()
    return img


def write_image(path, img: np.ndarray) -> None:
    """Write an 8-bit grayscale or RGB image."""
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[..., ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(img)):
        raise OSError(f"could not write {path}")


def extract_sparse_measurements(img: DisparityImage) -> SparseDepthMap:
    """One entry per valid pixel, in row-major order."""
    ys, xs = np.nonzero(img.valid)
    return SparseDepthMap(img.width, img.height, xs, ys, img.values[ys, xs])


def sparsify_depth(dense: DisparityImage, window: int = 5) -> SparseDepthMap:
    """Keep, per non-overlapping ``window``-sized cell, the valid pixel closest to the cell center.

    Cells tile the image from the top-left corner; partial cells at the right
    and bottom borders use the same nominal center. Distance ties go to the
    earliest pixel in row-major order.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"sparsification window must be odd and >= 3, got {window}")
    h, w = dense.values.shape
    ys, xs = np.nonzero(dense.valid)
    if len(xs) == 0:
        return SparseDepthMap(w, h)
    half = window // 2
    cy, cx = ys // window, xs // window
    dist2 = (ys - (cy * window + half)) ** 2 + (xs - (cx * window + half)) ** 2
    cell = cy * ((w + window - 1) // window) + cx
    order = np.lexsort((ys * w + xs, dist2, cell))
    cell_sorted = cell[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell_sorted[1:] != cell_sorted[:-1]
    # nonzero() yields row-major indices, so sorting restores that order
    keep = np.sort(order[first])
    return SparseDepthMap(w, h, xs[keep], ys[keep], dense.values[ys[keep], xs[keep]])


def dewarp_future_depth(d1_aligned_to_t0: DisparityImage, gt_flow: FlowImage) -> DisparityImage:
    """Move t0-aligned future disparities to their pixel position in the t1 frame.

    Each measurement is splatted to the nearest integer pixel of ``p + flow``.
    When several land on one pixel the larger disparity (nearer surface) wins.
    """
    src = d1_aligned_to_t0
    if src.values.shape != gt_flow.u.shape:
        raise ValueError("disparity and flow images must have the same size")
    h, w = src.values.shape
    ys, xs = np.nonzero(src.valid & gt_flow.valid)
    tx = round_half_up(xs + gt_flow.u[ys, xs])
    ty = round_half_up(ys + gt_flow.v[ys, xs])
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    out = np.zeros((h, w))
    np.maximum.at(out, (ty[inside], tx[inside]), src.values[ys[inside], xs[inside]])
    return DisparityImage(out, out > 0)
