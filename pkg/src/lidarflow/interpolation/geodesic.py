"""Edge-aware geodesic distances on the 4-connected pixel grid.

Stepping between neighbouring pixels a and b costs
``1 + lam * max(edge[a], edge[b])``, so paths avoid crossing strong edges.
"""
from __future__ import annotations

import numba as nb
import numpy as np


@nb.njit(cache=True, nogil=True)
def _push(hk, hv, n, key, val):
    i = n
    hk[i] = key
    hv[i] = val
    while i > 0:
        p = (i - 1) >> 1
        if hk[p] <= hk[i]:
            break
        hk[p], hk[i] = hk[i], hk[p]
        hv[p], hv[i] = hv[i], hv[p]
        i = p
    return n + 1


@nb.njit(cache=True, nogil=True)
def _pop(hk, hv, n):
    key, val = hk[0], hv[0]
    n -= 1
    hk[0] = hk[n]
    hv[0] = hv[n]
    i = 0
    while True:
        l = 2 * i + 1
        if l >= n:
            break
        c = l
        if l + 1 < n and hk[l + 1] < hk[l]:
            c = l + 1
        if hk[i] <= hk[c]:
            break
        hk[c], hk[i] = hk[i], hk[c]
        hv[c], hv[i] = hv[i], hv[c]
        i = c
    return key, val, n


@nb.njit(cache=True, nogil=True)
def _geodesic(edges, sources, lam):
    h, w = edges.shape
    dist = np.full(h * w, np.inf)
    cap = 4 * h * w + len(sources) + 1
    hk = np.empty(cap)
    hv = np.empty(cap, dtype=np.int64)
    n = 0
    for s in sources:
        if dist[s] > 0.0:
            dist[s] = 0.0
            n = _push(hk, hv, n, 0.0, s)
    done = np.zeros(h * w, dtype=np.bool_)
    while n > 0:
        d, p, n = _pop(hk, hv, n)
        if done[p]:
            continue
        done[p] = True
        y = p // w
        x = p - y * w
        ep = edges[y, x]
        for k in range(4):
            yy = y + (k == 1) - (k == 0)
            xx = x + (k == 3) - (k == 2)
            if yy < 0 or yy >= h or xx < 0 or xx >= w:
                continue
            q = yy * w + xx
            if done[q]:
                continue
            nd = d + (1.0 + lam * max(ep, edges[yy, xx]))
            if nd < dist[q]:
                dist[q] = nd
                n = _push(hk, hv, n, nd, q)
    return dist.reshape(h, w)


def geodesic_distance(edges: np.ndarray, sources, lam: float = 40.0) -> np.ndarray:
    """Distance from the nearest of ``sources`` ((x, y) pairs) to every pixel."""
    e = np.ascontiguousarray(getattr(edges, "strength", edges), dtype=np.float64)
    h, w = e.shape
    src = np.asarray(sources, dtype=np.int64).reshape(-1, 2)
    if len(src) == 0:
        raise ValueError("at least one source pixel is required")
    if np.any((src[:, 0] < 0) | (src[:, 0] >= w) | (src[:, 1] < 0) | (src[:, 1] >= h)):
        raise ValueError("source outside the grid")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return _geodesic(e, src[:, 1] * w + src[:, 0], float(lam))


def step_cost_graph(edges: np.ndarray, lam: float = 40.0):
    """Sparse adjacency matrix of the grid with the geodesic step costs."""
    from scipy.sparse import coo_matrix

    e = np.asarray(getattr(edges, "strength", edges), dtype=np.float64)
    h, w = e.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [], [], []
    for a, b, ea, eb in ((idx[:, :-1], idx[:, 1:], e[:, :-1], e[:, 1:]), (idx[:-1], idx[1:], e[:-1], e[1:])):
        c = 1.0 + lam * np.maximum(ea, eb)
        rows += [a.ravel(), b.ravel()]
        cols += [b.ravel(), a.ravel()]
        vals += [c.ravel(), c.ravel()]
    return coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(h * w, h * w)).tocsr()


@nb.njit(cache=True, nogil=True)
def _nearest_anchors(edges, lam, anchor_pix, owner_start, owner_list, k):
    """For each anchor, the k superpixels whose anchors are geodesically closest."""
    h, w = edges.shape
    m = anchor_pix.shape[0]
    out_idx = -np.ones((m, k), dtype=np.int64)
    out_dist = np.full((m, k), np.inf)
    dist = np.full(h * w, np.inf)
    stamp = np.zeros(h * w, dtype=np.int64)  # run id that last touched a pixel
    done = np.zeros(h * w, dtype=np.int64)
    cap = 4 * h * w + 1
    hk = np.empty(cap)
    hv = np.empty(cap, dtype=np.int64)
    for s in range(m):
        run = s + 1
        src = anchor_pix[s]
        stamp[src] = run
        dist[src] = 0.0
        n = _push(hk, hv, 0, 0.0, src)
        found = 0
        while n > 0 and found < k:
            d, p, n = _pop(hk, hv, n)
            if done[p] == run:
                continue
            done[p] = run
            for j in range(owner_start[p], owner_start[p + 1]):
                if found < k:
                    out_idx[s, found] = owner_list[j]
                    out_dist[s, found] = d
                    found += 1
            y = p // w
            x = p - y * w
            ep = edges[y, x]
            for t in range(4):
                yy = y + (t == 1) - (t == 0)
                xx = x + (t == 3) - (t == 2)
                if yy < 0 or yy >= h or xx < 0 or xx >= w:
                    continue
                q = yy * w + xx
                if done[q] == run:
                    continue
                nd = d + (1.0 + lam * max(ep, edges[yy, xx]))
                if stamp[q] != run or nd < dist[q]:
                    stamp[q] = run
                    dist[q] = nd
                    n = _push(hk, hv, n, nd, q)
    return out_idx, out_dist


def nearest_anchor_neighbourhoods(edges, anchors: np.ndarray, k: int, lam: float = 40.0):
    """(indices, distances), each (m, k): the k superpixels nearest to each anchor.

    ``anchors`` is (m, 2) integer (x, y). Superpixels sharing an anchor pixel
    are reported together, in index order. Rows are padded with -1 / inf
    when fewer than k anchors are reachable.
    """
    e = np.ascontiguousarray(getattr(edges, "strength", edges), dtype=np.float64)
    h, w = e.shape
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
    pix = anchors[:, 1] * w + anchors[:, 0]
    order = np.argsort(pix, kind="stable")
    counts = np.bincount(pix, minlength=h * w)
    start = np.zeros(h * w + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    return _nearest_anchors(e, float(lam), pix, start, order.astype(np.int64), int(k))


@nb.njit(cache=True, nogil=True)
def _pair_distances(edges, lam, src, dst, limit):
    h, w = edges.shape
    m = src.shape[0]
    out = np.full(m, np.inf)
    dist = np.full(h * w, np.inf)
    stamp = np.zeros(h * w, dtype=np.int64)
    done = np.zeros(h * w, dtype=np.int64)
    cap = 4 * h * w + 1
    hk = np.empty(cap)
    hv = np.empty(cap, dtype=np.int64)
    for s in range(m):
        run = s + 1
        stamp[src[s]] = run
        dist[src[s]] = 0.0
        n = _push(hk, hv, 0, 0.0, src[s])
        while n > 0:
            d, p, n = _pop(hk, hv, n)
            if d > limit:
                break
            if done[p] == run:
                continue
            done[p] = run
            if p == dst[s]:
                out[s] = d
                break
            y = p // w
            x = p - y * w
            ep = edges[y, x]
            for t in range(4):
                yy = y + (t == 1) - (t == 0)
                xx = x + (t == 3) - (t == 2)
                if yy < 0 or yy >= h or xx < 0 or xx >= w:
                    continue
                q = yy * w + xx
                if done[q] == run:
                    continue
                nd = d + (1.0 + lam * max(ep, edges[yy, xx]))
                if stamp[q] != run or nd < dist[q]:
                    stamp[q] = run
                    dist[q] = nd
                    n = _push(hk, hv, n, nd, q)
    return out


def pairwise_geodesic(edges, sources, targets, lam: float = 40.0, limit: float = np.inf) -> np.ndarray:
    """Geodesic distance from each source (x, y) to its paired target; inf beyond ``limit``."""
    e = np.ascontiguousarray(getattr(edges, "strength", edges), dtype=np.float64)
    h, w = e.shape
    s = np.asarray(sources, dtype=np.int64).reshape(-1, 2)
    t = np.asarray(targets, dtype=np.int64).reshape(-1, 2)
    if len(s) != len(t):
        raise ValueError("sources and targets must pair up")
    for a in (s, t):
        if np.any((a[:, 0] < 0) | (a[:, 0] >= w) | (a[:, 1] < 0) | (a[:, 1] >= h)):
            raise ValueError("point outside the grid")
    return _pair_distances(e, float(lam), s[:, 1] * w + s[:, 0], t[:, 1] * w + t[:, 0], float(limit))
