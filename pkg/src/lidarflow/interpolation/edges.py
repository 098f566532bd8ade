"""Edge strength maps that steer the geodesic neighbourhoods."""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from ..core import to_luminance


@dataclass
class EdgeMap:
    strength: np.ndarray  # (H, W) float in [0, 1]

    def __post_init__(self):
        self.strength = np.asarray(self.strength, dtype=np.float64)
        if self.strength.ndim != 2:
            raise ValueError("edge map must be 2-D")
        if self.strength.size and (self.strength.min() < 0 or self.strength.max() > 1):
            raise ValueError("edge strengths must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.strength.shape


def compute_edge_map(image: np.ndarray, percentile: float = 99.0) -> EdgeMap:
    """Sobel gradient magnitude, 3x3 Gaussian smoothed, scaled by its ``percentile`` value."""
    lum = to_luminance(image)
    gx = cv2.Sobel(lum, cv2.CV_64F, 1, 0, ksize=3, borderType=cv2.BORDER_REPLICATE)
    gy = cv2.Sobel(lum, cv2.CV_64F, 0, 1, ksize=3, borderType=cv2.BORDER_REPLICATE)
    mag = cv2.GaussianBlur(np.hypot(gx, gy), (3, 3), 0, borderType=cv2.BORDER_REPLICATE)
    scale = np.percentile(mag, percentile) if mag.size else 0.0
    if not scale > 0:
        scale = mag.max() if mag.size and mag.max() > 0 else 1.0
    return EdgeMap(np.clip(mag / scale, 0.0, 1.0))


def load_edge_map(path) -> EdgeMap:
    """Read a single-channel 8- or 16-bit edge probability PNG."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"cannot read edge map {path}")
    if img.ndim != 2:
        raise ValueError(f"edge map must be single channel, got shape {img.shape}")
    if img.dtype == np.uint8:
        return EdgeMap(img / 255.0)
    if img.dtype == np.uint16:
        return EdgeMap(img / 65535.0)
    raise ValueError(f"edge map must be 8- or 16-bit, got {img.dtype}")
