"""SLIC-style superpixels on intensity with connectivity enforcement."""
from __future__ import annotations

import math

import numba as nb
import numpy as np

from ..core import to_luminance


@nb.njit(cache=True)
def _slic(img, centers, spacing, compactness, iterations):
    h, w = img.shape
    k = centers.shape[0]
    labels = -np.ones((h, w), dtype=np.int64)
    dist = np.empty((h, w))
    ratio = (compactness / spacing) ** 2
    reach = int(math.ceil(spacing))
    sums = np.zeros((k, 4))
    for _ in range(iterations):
        dist[:] = np.inf
        for c in range(k):
            cy, cx, ci = centers[c, 0], centers[c, 1], centers[c, 2]
            y0 = max(0, int(cy) - reach)
            y1 = min(h, int(cy) + reach + 1)
            x0 = max(0, int(cx) - reach)
            x1 = min(w, int(cx) + reach + 1)
            for y in range(y0, y1):
                for x in range(x0, x1):
                    di = img[y, x] - ci
                    ds = (y - cy) ** 2 + (x - cx) ** 2
                    d = di * di + ratio * ds
                    if d < dist[y, x]:
                        dist[y, x] = d
                        labels[y, x] = c
        sums[:] = 0.0
        for y in range(h):
            for x in range(w):
                c = labels[y, x]
                if c >= 0:
                    sums[c, 0] += y
                    sums[c, 1] += x
                    sums[c, 2] += img[y, x]
                    sums[c, 3] += 1.0
        for c in range(k):
            if sums[c, 3] > 0:
                centers[c, 0] = sums[c, 0] / sums[c, 3]
                centers[c, 1] = sums[c, 1] / sums[c, 3]
                centers[c, 2] = sums[c, 2] / sums[c, 3]
    return labels


@nb.njit(cache=True)
def _components(labels):
    """4-connected components of equal label; returns (component id grid, count)."""
    h, w = labels.shape
    comp = -np.ones((h, w), dtype=np.int64)
    stack = np.empty(h * w, dtype=np.int64)
    n = 0
    for sy in range(h):
        for sx in range(w):
            if comp[sy, sx] >= 0:
                continue
            lab = labels[sy, sx]
            comp[sy, sx] = n
            top = 0
            stack[top] = sy * w + sx
            top += 1
            while top > 0:
                top -= 1
                p = stack[top]
                y = p // w
                x = p - y * w
                for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and comp[yy, xx] < 0 and labels[yy, xx] == lab:
                        comp[yy, xx] = n
                        stack[top] = yy * w + xx
                        top += 1
            n += 1
    return comp, n


@nb.njit(cache=True)
def _merge_small(comp, ncomp, min_size):
    """Fold every fragment below ``min_size`` into the adjacent fragment it
    shares the longest boundary with. Returns one root per component."""
    h, w = comp.shape
    size = np.zeros(ncomp, dtype=np.int64)
    for y in range(h):
        for x in range(w):
            size[comp[y, x]] += 1
    flat = comp.ravel()
    pix = np.argsort(flat, kind="mergesort")
    start = np.zeros(ncomp + 1, dtype=np.int64)
    for c in range(ncomp):
        start[c + 1] = start[c] + size[c]
    # smallest first so fragments join stable neighbours
    order = np.argsort(size, kind="mergesort")
    parent = np.arange(ncomp)
    merged_size = size.copy()
    contact = np.zeros(ncomp, dtype=np.int64)
    touched = np.empty(4 * h * w, dtype=np.int64)
    for c in order:
        if merged_size[c] >= min_size:
            continue
        nt = 0
        for i in range(start[c], start[c + 1]):
            y = pix[i] // w
            x = pix[i] - y * w
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w:
                    o = comp[yy, xx]
                    while parent[o] != o:
                        o = parent[o]
                    if o != c:
                        if contact[o] == 0:
                            touched[nt] = o
                            nt += 1
                        contact[o] += 1
        best = -1
        for t in range(nt):
            o = touched[t]
            if best < 0 or contact[o] > contact[best] or (contact[o] == contact[best] and o < best):
                best = o
        for t in range(nt):
            contact[touched[t]] = 0
        if best >= 0:
            parent[c] = best
            merged_size[best] += merged_size[c]
    target = np.empty(ncomp, dtype=np.int64)
    for c in range(ncomp):
        r = c
        while parent[r] != r:
            r = parent[r]
        target[c] = r
    return target


def segment_superpixels(image: np.ndarray, count: int = 1000, compactness: float = 10.0,
                        iterations: int = 10) -> np.ndarray:
    """Label grid of roughly ``count`` connected superpixels, numbered 0..k-1 in row-major order.

    Centres start on a regular grid of spacing sqrt(H*W/count) and are
    refined by local k-means in (x, y, intensity) where spatial distance is
    weighted by ``compactness / spacing``. Afterwards every 4-connected
    piece is its own segment, except pieces below half of the nominal
    area, which join the neighbour sharing the longest boundary.
    """
    lum = to_luminance(image)
    h, w = lum.shape
    if count < 1:
        raise ValueError("superpixel count must be >= 1")
    if compactness <= 0 or iterations < 1:
        raise ValueError("compactness and iterations must be positive")
    spacing = math.sqrt(h * w / count)
    ny = max(1, int(round(h / spacing)))
    nx = max(1, int(round(w / spacing)))
    cy = (np.arange(ny) + 0.5) * h / ny
    cx = (np.arange(nx) + 0.5) * w / nx
    gy, gx = np.meshgrid(cy, cx, indexing="ij")
    iy = np.clip(gy.astype(np.int64), 0, h - 1)
    ix = np.clip(gx.astype(np.int64), 0, w - 1)
    centers = np.stack([gy.ravel(), gx.ravel(), lum[iy, ix].ravel()], axis=1)
    step = math.sqrt(h * w / len(centers))
    labels = _slic(lum, centers, step, float(compactness), int(iterations))
    comp, ncomp = _components(labels)
    min_size = max(1, int(step * step / 2))
    target = _merge_small(comp, ncomp, min_size)
    merged = target[comp]
    # contiguous relabelling in order of first appearance
    _, first, inverse = np.unique(merged.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse].reshape(h, w)
