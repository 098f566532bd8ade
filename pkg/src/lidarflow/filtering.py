"""Consistency filtering of dense matches and block sparsification.

The dense forward matches are cleaned in two stages. Stage 1 compares the
reference-frame disparity against an independent semi-global matching (SGM)
result; stage 2 runs a forward-backward round trip. Each stage is followed by
a clustering pass that drops small incoherent blobs. Finally one match per
3x3 block survives, plus every LiDAR seed.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .core import ROLE_FREE, ROLE_SEED, SceneFlowField, round_half_up, to_luminance
from .io_kitti import DisparityImage

# (dx, dy) of the eight SGM aggregation paths
_PATHS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1))


@dataclass(frozen=True)
class SgmConfig:
    census_radius: int = 2  # 5x5 window, 24 comparison bits
    path_count: int = 8
    p1: int = 10
    p2: int = 120
    max_disparity: int = 128
    left_right_tolerance: float = 1.0

    def __post_init__(self):
        if not (self.p2 >= self.p1 > 0):
            raise ValueError("SGM penalties need P2 >= P1 > 0")
        if self.max_disparity < 1:
            raise ValueError("max_disparity must be >= 1")
        if self.path_count not in (2, 4, 8):
            raise ValueError("path_count must be 2, 4 or 8")
        if not (1 <= self.census_radius <= 2):
            raise ValueError("census_radius must be 1 or 2 (at most 24 bits)")
        if self.left_right_tolerance < 0:
            raise ValueError("left_right_tolerance must be >= 0")


@dataclass(frozen=True)
class FilterConfig:
    stage1_tolerance: float = 3.0
    fb_tolerance: float = 1.0
    cluster_similarity: float = 3.0
    min_cluster_size: int = 30
    sgm: SgmConfig = field(default_factory=SgmConfig)

    def __post_init__(self):
        if not (self.stage1_tolerance > 0 and self.fb_tolerance > 0 and self.cluster_similarity > 0):
            raise ValueError("filter tolerances must be positive")
        if self.min_cluster_size < 1:
            raise ValueError("min_cluster_size must be >= 1")


@dataclass
class MatchSet:
    """Sparse matches: pixel positions, (u, v, d0, d1) vectors, roles and FB residuals."""

    width: int
    height: int
    xs: np.ndarray
    ys: np.ndarray
    vectors: np.ndarray  # (N, 4)
    roles: np.ndarray  # int8
    residual: np.ndarray
    geometry_only: np.ndarray  # seeds whose motion was rejected

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.int64).reshape(-1)
        self.ys = np.asarray(self.ys, dtype=np.int64).reshape(-1)
        self.vectors = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 4)
        self.roles = np.asarray(self.roles, dtype=np.int8).reshape(-1)
        self.residual = np.asarray(self.residual, dtype=np.float64).reshape(-1)
        self.geometry_only = np.asarray(self.geometry_only, dtype=bool).reshape(-1)
        n = len(self.xs)
        if not all(len(a) == n for a in (self.ys, self.vectors, self.roles, self.residual, self.geometry_only)):
            raise ValueError("match arrays must have equal length")
        flat = self.ys * self.width + self.xs
        if len(np.unique(flat)) != n:
            raise ValueError("match coordinates must be unique")
        if np.any(self.geometry_only & (self.roles != ROLE_SEED)):
            raise ValueError("only seeds can be geometry-only")

    def __len__(self) -> int:
        return len(self.xs)

    @property
    def is_seed(self) -> np.ndarray:
        return self.roles == ROLE_SEED

    @classmethod
    def from_field(cls, f: SceneFlowField, mask: np.ndarray | None = None) -> "MatchSet":
        keep = f.valid if mask is None else (mask & f.valid)
        ys, xs = np.nonzero(keep)
        return cls(f.width, f.height, xs, ys, f.data[ys, xs], f.roles[ys, xs], f.residual[ys, xs],
                   f.geometry_only[ys, xs])

    def to_field(self) -> SceneFlowField:
        h, w = self.height, self.width
        data = np.zeros((h, w, 4))
        valid = np.zeros((h, w), dtype=bool)
        roles = np.zeros((h, w), dtype=np.int8)
        geo = np.zeros((h, w), dtype=bool)
        res = np.full((h, w), np.inf)
        data[self.ys, self.xs] = self.vectors
        valid[self.ys, self.xs] = True
        roles[self.ys, self.xs] = self.roles
        geo[self.ys, self.xs] = self.geometry_only
        res[self.ys, self.xs] = self.residual
        return SceneFlowField(data, valid, roles == ROLE_SEED, roles, geo, res)


# -- semi-global matching ---------------------------------------------------------


def census_transform(img: np.ndarray, radius: int = 2) -> np.ndarray:
    """Bit string of ``neighbour < centre`` comparisons over a (2r+1)^2 window (edge-clamped)."""
    lum = to_luminance(img)
    h, w = lum.shape
    p = np.pad(lum, radius, mode="edge")
    out = np.zeros((h, w), dtype=np.uint32)
    bit = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            nb_ = p[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            out |= (nb_ < lum).astype(np.uint32) << np.uint32(bit)
            bit += 1
    return out


@nb.njit(cache=True, nogil=True)
def _popcount(x):
    x = np.int64(x)
    c = 0
    while x:
        x &= x - 1
        c += 1
    return c


@nb.njit(cache=True, nogil=True)
def _census_costs(cl, cr, D, maxcost):
    h, w = cl.shape
    C = np.empty((h, w, D + 1), dtype=np.int32)
    for y in range(h):
        for x in range(w):
            for d in range(D + 1):
                if x - d >= 0:
                    C[y, x, d] = _popcount(cl[y, x] ^ cr[y, x - d])
                else:
                    C[y, x, d] = maxcost
    return C


@nb.njit(cache=True, nogil=True)
def _aggregate_path(C, S, dx, dy, p1, p2):
    h, w, nd = C.shape
    prev = np.zeros((w, nd), dtype=np.int32)
    cur = np.zeros((w, nd), dtype=np.int32)
    prev_min = np.zeros(w, dtype=np.int32)
    cur_min = np.zeros(w, dtype=np.int32)
    big = np.int32(1 << 28)
    for i in range(h):
        y = i if dy >= 0 else h - 1 - i
        for j in range(w):
            x = j if dx >= 0 else w - 1 - j
            px = x - dx
            py = y - dy
            has_pred = 0 <= px < w and 0 <= py < h
            if has_pred:
                L = cur if dy == 0 else prev
                Lm = cur_min if dy == 0 else prev_min
                m = Lm[px]
                best = big
                for d in range(nd):
                    v = L[px, d]
                    if d > 0:
                        v = min(v, L[px, d - 1] + p1)
                    if d < nd - 1:
                        v = min(v, L[px, d + 1] + p1)
                    v = min(v, m + p2)
                    val = C[y, x, d] + v - m
                    cur[x, d] = val
                    if val < best:
                        best = val
                cur_min[x] = best
            else:
                best = big
                for d in range(nd):
                    cur[x, d] = C[y, x, d]
                    if C[y, x, d] < best:
                        best = C[y, x, d]
                cur_min[x] = best
            for d in range(nd):
                S[y, x, d] += cur[x, d]
        if dy != 0:
            prev, cur = cur, prev
            prev_min, cur_min = cur_min, prev_min


@nb.njit(cache=True, nogil=True)
def _winner_take_all(S):
    h, w, nd = S.shape
    disp = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=np.bool_)
    for y in range(h):
        for x in range(w):
            dlim = min(nd - 1, x)
            best = np.int64(1) << 60
            bd = 0
            for d in range(dlim + 1):
                if S[y, x, d] < best:
                    best = S[y, x, d]
                    bd = d
            # a minimum shared by a non-adjacent disparity is ambiguous
            unique = True
            for d in range(dlim + 1):
                if abs(d - bd) > 1 and S[y, x, d] <= best:
                    unique = False
                    break
            dsub = float(bd)
            if 0 < bd < dlim:
                a = float(S[y, x, bd - 1])
                b = float(S[y, x, bd])
                c = float(S[y, x, bd + 1])
                den = a - 2.0 * b + c
                if den > 0:
                    dsub = bd + 0.5 * (a - c) / den
            disp[y, x] = dsub
            valid[y, x] = unique and bd > 0
    return disp, valid


def _sgm_one_view(ref_census: np.ndarray, other_census: np.ndarray, cfg: SgmConfig):
    """Winner disparities of ``ref`` where ref(x) matches other(x - d)."""
    h, w = ref_census.shape
    D = int(min(cfg.max_disparity, w - 1))
    nbits = (2 * cfg.census_radius + 1) ** 2 - 1
    C = _census_costs(ref_census, other_census, D, nbits)
    S = np.zeros((h, w, D + 1), dtype=np.int32)
    for dx, dy in _PATHS[:cfg.path_count]:
        _aggregate_path(C, S, dx, dy, cfg.p1, cfg.p2)
    return _winner_take_all(S)


def _cross_check(disp, valid, other, other_valid, sign, tol):
    h, w = disp.shape
    ys, xs = np.nonzero(valid)
    xo = xs + sign * round_half_up(disp[ys, xs])
    inside = (xo >= 0) & (xo < w)
    xo = np.clip(xo, 0, w - 1)
    agree = inside & other_valid[ys, xo] & (np.abs(other[ys, xo] - disp[ys, xs]) <= tol)
    ok = np.zeros_like(valid)
    ok[ys[agree], xs[agree]] = True
    return DisparityImage(np.where(ok, disp, 0.0), ok)


def compute_reference_disparities(left: np.ndarray, right: np.ndarray,
                                  cfg: SgmConfig = SgmConfig()) -> tuple[DisparityImage, DisparityImage]:
    """SGM disparities of a rectified pair for the left and the right view.

    Each view is matched as reference on its own (the right view through the
    mirrored pair). A pixel is invalid when its winner is ambiguous or 0, or
    when the other view's disparity at its correspondence differs by more
    than the left-right tolerance.
    """
    left, right = to_luminance(left), to_luminance(right)
    if left.shape != right.shape:
        raise ValueError("left and right images differ in size")
    r = cfg.census_radius
    dl, vl = _sgm_one_view(census_transform(left, r), census_transform(right, r), cfg)
    # mirrored: right(x) = left(x + d) becomes a left-reference problem
    dr, vr = _sgm_one_view(census_transform(right[:, ::-1], r), census_transform(left[:, ::-1], r), cfg)
    dr, vr = dr[:, ::-1], vr[:, ::-1]
    tol = cfg.left_right_tolerance
    return _cross_check(dl, vl, dr, vr, -1, tol), _cross_check(dr, vr, dl, vl, 1, tol)


def compute_reference_disparity(left: np.ndarray, right: np.ndarray, cfg: SgmConfig = SgmConfig()) -> DisparityImage:
    """Left-view SGM disparity with a left-right cross check (see ``compute_reference_disparities``)."""
    return compute_reference_disparities(left, right, cfg)[0]


# -- consistency stages -----------------------------------------------------------


def stage1_geometry_check(f: SceneFlowField, ref: DisparityImage, cfg: FilterConfig = FilterConfig(),
                          ref_right: DisparityImage | None = None) -> SceneFlowField:
    """Drop free pixels whose d0 disagrees with the reference disparity.

    Seeds and support-window pixels are exempt. With a right-view reference,
    a free pixel is also dropped when its right-image correspondence
    ``x - d0`` lies outside the image or carries a valid right-view
    disparity that disagrees with d0 by more than the tolerance.
    """
    if ref.values.shape != (f.height, f.width):
        raise ValueError("reference disparity and field differ in size")
    out = f.copy()
    free = f.roles == ROLE_FREE
    tol = cfg.stage1_tolerance
    bad = free & ref.valid & (np.abs(f.d0 - ref.values) > tol)
    if ref_right is not None:
        if ref_right.values.shape != ref.values.shape:
            raise ValueError("right reference disparity has the wrong size")
        ys, xs = np.mgrid[0:f.height, 0:f.width]
        xr = round_half_up(xs - f.d0)
        outside = xr < 0
        xrc = np.clip(xr, 0, f.width - 1)
        rv = ref_right.valid[ys, xrc] & ~outside
        bad |= free & (outside | (rv & (np.abs(f.d0 - ref_right.values[ys, xrc]) > tol)))
    out.valid &= ~bad
    return out


def forward_backward_residual(fwd: SceneFlowField, bwd: SceneFlowField) -> np.ndarray:
    """Round-trip residual per forward pixel (inf where the target is outside or invalid).

    The backward field is sampled at round(p + (u, v)); its flow should negate
    the forward flow and its disparities swap roles (bwd d0 is the t1
    disparity).
    """
    if bwd.data.shape != fwd.data.shape:
        raise ValueError("forward and backward fields differ in size")
    h, w = fwd.height, fwd.width
    ys, xs = np.mgrid[0:h, 0:w]
    tx = round_half_up(xs + fwd.u)
    ty = round_half_up(ys + fwd.v)
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    txc = np.clip(tx, 0, w - 1)
    tyc = np.clip(ty, 0, h - 1)
    b = bwd.data[tyc, txc]
    res = np.max(
        np.stack([
            np.abs(fwd.u + b[..., 0]),
            np.abs(fwd.v + b[..., 1]),
            np.abs(fwd.d1 - b[..., 2]),
            np.abs(fwd.d0 - b[..., 3]),
        ]),
        axis=0,
    )
    ok = inside & bwd.valid[tyc, txc]
    return np.where(ok, res, np.inf)


def stage2_forward_backward_check(fwd: SceneFlowField, bwd: SceneFlowField,
                                  cfg: FilterConfig = FilterConfig()) -> SceneFlowField:
    """Invalidate pixels failing the round trip; failing seeds keep only their d0."""
    res = forward_backward_residual(fwd, bwd)
    out = fwd.copy()
    out.residual = np.where(fwd.valid, res, np.inf)
    fail = fwd.valid & ~(res <= cfg.fb_tolerance)
    seeds = fwd.seed_mask
    out.valid &= ~(fail & ~seeds)
    out.geometry_only |= fail & seeds & fwd.valid
    return out


# -- clustering -------------------------------------------------------------------


def _similar(data, geo, a, b, tol) -> bool:
    if geo[a] or geo[b]:
        return abs(data[a][2] - data[b][2]) <= tol
    return bool(np.all(np.abs(data[a] - data[b]) <= tol))


def similarity_components(f: SceneFlowField, tol: float) -> np.ndarray:
    """Component label per valid pixel (-1 elsewhere).

    Seeds are processed first, in row-major order: each grows a region of
    pixels linked to their neighbour and also within ``tol`` of the seed's
    own values. The remaining valid pixels form components of the plain
    4-neighbour similarity relation. Geometry-only pixels compare d0 only.
    """
    h, w = f.height, f.width
    labels = -np.ones((h, w), dtype=np.int64)
    data, geo, valid = f.data, f.geometry_only, f.valid
    nbrs = ((-1, 0), (1, 0), (0, -1), (0, 1))
    n = 0
    sy, sx = np.nonzero(f.seed_mask & valid)
    for y0, x0 in zip(sy, sx):
        if labels[y0, x0] >= 0:
            continue
        ref = (y0, x0)
        labels[ref] = n
        queue = deque([ref])
        while queue:
            y, x = queue.popleft()
            for dy, dx in nbrs:
                q = (y + dy, x + dx)
                if not (0 <= q[0] < h and 0 <= q[1] < w) or labels[q] >= 0 or not valid[q]:
                    continue
                if _similar(data, geo, (y, x), q, tol) and _similar(data, geo, ref, q, tol):
                    labels[q] = n
                    queue.append(q)
        n += 1
    rest = valid & (labels < 0)
    return _link_components(data, geo, rest, labels, n, tol)


@nb.njit(cache=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@nb.njit(cache=True)
def _link_components(data, geo, mask, labels, n0, tol):
    h, w = mask.shape
    parent = np.arange(h * w)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((0, 1), (1, 0)):
                yy, xx = y + dy, x + dx
                if yy >= h or xx >= w or not mask[yy, xx]:
                    continue
                if geo[y, x] or geo[yy, xx]:
                    ok = abs(data[y, x, 2] - data[yy, xx, 2]) <= tol
                else:
                    ok = True
                    for c in range(4):
                        if abs(data[y, x, c] - data[yy, xx, c]) > tol:
                            ok = False
                            break
                if ok:
                    a = _find(parent, y * w + x)
                    b = _find(parent, yy * w + xx)
                    if a != b:
                        if a < b:
                            parent[b] = a
                        else:
                            parent[a] = b
    out = labels.copy()
    root_label = -np.ones(h * w, dtype=np.int64)
    n = n0
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            r = _find(parent, y * w + x)
            if root_label[r] < 0:
                root_label[r] = n
                n += 1
            out[y, x] = root_label[r]
    return out


def cluster_filter(f: SceneFlowField, cfg: FilterConfig = FilterConfig()) -> SceneFlowField:
    """Remove similarity components smaller than ``min_cluster_size`` that hold no seed."""
    labels = similarity_components(f, cfg.cluster_similarity)
    out = f.copy()
    if not np.any(labels >= 0):
        return out
    flat = labels[labels >= 0]
    sizes = np.bincount(flat)
    has_seed = np.zeros(len(sizes), dtype=bool)
    has_seed[labels[f.seed_mask & f.valid]] = True
    drop_label = (sizes < cfg.min_cluster_size) & ~has_seed
    drop = np.zeros(labels.shape, dtype=bool)
    drop[labels >= 0] = drop_label[flat]
    out.valid &= ~drop
    return out


# -- sparsification ---------------------------------------------------------------


def sparsify_matches(f: SceneFlowField, block: int = 3) -> MatchSet:
    """One valid non-seed match per block (lowest residual, ties row-major) plus all seeds."""
    h, w = f.height, f.width
    ys, xs = np.nonzero(f.valid & ~f.seed_mask)
    cell = (ys // block) * ((w + block - 1) // block) + xs // block
    order = np.lexsort((ys * w + xs, f.residual[ys, xs], cell))
    cs = cell[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = cs[1:] != cs[:-1]
    keep = np.zeros((h, w), dtype=bool)
    keep[ys[order[first]], xs[order[first]]] = True
    keep |= f.seed_mask & f.valid
    return MatchSet.from_field(f, keep)


@dataclass
class FilterResult:
    after_stage1: SceneFlowField
    after_stage2: SceneFlowField
    matches: MatchSet


def filter_matches(fwd: SceneFlowField, bwd: SceneFlowField, ref: DisparityImage | None,
                   cfg: FilterConfig = FilterConfig(), ref_right: DisparityImage | None = None) -> FilterResult:
    """Stage 1 (if a reference is given) and stage 2, each followed by clustering, then sparsification."""
    s1 = fwd if ref is None else stage1_geometry_check(fwd, ref, cfg, ref_right)
    s1 = cluster_filter(s1, cfg)
    s2 = cluster_filter(stage2_forward_backward_check(s1, bwd, cfg), cfg)
    return FilterResult(s1, s2, sparsify_matches(s2))

