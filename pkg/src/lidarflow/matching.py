"""LiDAR-seeded coarse-to-fine PatchMatch for scene flow.

Each pixel of the reference image carries a hypothesis ``(u, v, d0, d1)``.
Hypotheses start on the coarsest pyramid level (LiDAR disparities inside the
support windows, best-of-K random guesses elsewhere), then spread by
neighbour propagation and a halving random search. A candidate replaces the
current hypothesis only if it lowers the matching cost and respects the
disparity band around the governing LiDAR seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Sequence

import numba as nb
import numpy as np

from .core import (
    ROLE_FREE,
    ROLE_SEED,
    ROLE_WINDOW,
    CalibratedFrameSet,
    SceneFlowField,
    SparseDepthMap,
)
from .features import DescriptorField, PatchSpec, compute_dense_descriptors, patch_cost_kernel, rint

MIN_LEVEL_SIDE = 8


class CostCase(IntEnum):
    C_I = 0  # image only
    C_D0 = 1  # LiDAR at p in the reference frame
    C_D1 = 2  # LiDAR at p + (u, v) in the target frame
    C_D0D1 = 3


class CostScheme(NamedTuple):
    case: CostCase
    d1_lookup: float | None = None


@dataclass(frozen=True)
class SupportWindowConfig:
    size: int = 15

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"support window size must be odd and >= 1, got {self.size}")

    @property
    def radius(self) -> int:
        return self.size // 2


@dataclass(frozen=True)
class MatchingConfig:
    pyramid_levels: int = 4
    iterations_per_level: int = 8
    search_radius: int = 16
    tau_d: float = 3.0
    patch: PatchSpec = field(default_factory=PatchSpec)
    rng_seed: int = 0
    init_candidates: int = 8
    max_disparity: float = 128.0
    # replace d1 by the LiDAR value when p + (u, v) lands on a D1 measurement
    snap_to_lidar1: bool = True

    scale_factor = 0.5

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if not self.tau_d > 0:
            raise ValueError("tau_d must be positive")
        if self.iterations_per_level < 0 or self.search_radius < 1 or self.init_candidates < 1:
            raise ValueError("iterations >= 0, search_radius >= 1 and init_candidates >= 1 required")
        if not self.max_disparity > 0:
            raise ValueError("max_disparity must be positive")

    def radii(self) -> np.ndarray:
        r, out = self.search_radius, []
        while r >= 1:
            out.append(r)
            r //= 2
        return np.array(out, dtype=np.float64)


@dataclass
class PyramidLevel:
    """Descriptors and LiDAR grids of one pyramid level (forward orientation)."""

    level: int
    descriptors: dict  # name -> DescriptorField for left0, left1, right0, right1
    lidar0: np.ndarray  # (H, W), 0 = no measurement
    lidar1: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.lidar0.shape

    @property
    def scale(self) -> float:
        return 0.5 ** self.level

    def oriented(self, direction: str):
        """(ref, ref_next, right, right_next) descriptor arrays plus (seed, target) LiDAR grids."""
        d = self.descriptors
        if direction == "forward":
            names, lids = ("left0", "left1", "right0", "right1"), (self.lidar0, self.lidar1)
        elif direction == "backward":
            names, lids = ("left1", "left0", "right1", "right0"), (self.lidar1, self.lidar0)
        else:
            raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
        return tuple(d[n].data for n in names), lids


@dataclass
class SupportRoles:
    """Per-pixel role plus the disparity and index of the governing seed."""

    roles: np.ndarray  # int8
    governing: np.ndarray  # float64, 0 for free pixels
    seed_index: np.ndarray  # int64, -1 for free pixels


def downsample(img: np.ndarray) -> np.ndarray:
    """2x box filter; odd sizes are padded by edge replication."""
    h, w = img.shape
    p = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2])


def scale_lidar(grid: np.ndarray, level: int, shape: tuple[int, int]) -> np.ndarray:
    """Move measurements to a coarser level; colliding entries keep the larger disparity."""
    f = 2 ** level
    ys, xs = np.nonzero(grid > 0)
    out = np.zeros(shape)
    np.maximum.at(out, (ys // f, xs // f), grid[ys, xs] / f)
    return out


def build_pyramids(frames: CalibratedFrameSet, cfg: MatchingConfig) -> list[PyramidLevel]:
    h, w = frames.shape
    coarse_h = math.ceil(h / 2 ** (cfg.pyramid_levels - 1))
    coarse_w = math.ceil(w / 2 ** (cfg.pyramid_levels - 1))
    if min(coarse_h, coarse_w) < MIN_LEVEL_SIDE:
        raise ValueError(
            f"{cfg.pyramid_levels} pyramid levels on {w}x{h} give a {coarse_w}x{coarse_h} "
            f"coarsest level (minimum side {MIN_LEVEL_SIDE})"
        )
    names = ("left0", "left1", "right0", "right1")
    images = dict(zip(names, frames.luminance()))
    lid0, lid1 = frames.lidar0.to_grid(), frames.lidar1.to_grid()
    levels = []
    for lv in range(cfg.pyramid_levels):
        if lv > 0:
            images = {n: downsample(im) for n, im in images.items()}
        shape = images["left0"].shape
        levels.append(
            PyramidLevel(
                lv,
                {n: compute_dense_descriptors(im) for n, im in images.items()},
                scale_lidar(lid0, lv, shape),
                scale_lidar(lid1, lv, shape),
            )
        )
    return levels


def level_window_radius(window: SupportWindowConfig, level: int) -> int:
    return int(math.floor(window.radius / 2 ** level + 0.5))


@nb.njit(cache=True)
def _support_roles(lidar, radius):
    h, w = lidar.shape
    roles = np.zeros((h, w), dtype=np.int8)
    gov = np.zeros((h, w))
    idx = -np.ones((h, w), dtype=np.int64)
    best = np.full((h, w), np.inf)
    k = 0
    for sy in range(h):
        for sx in range(w):
            if lidar[sy, sx] <= 0:
                continue
            for y in range(max(0, sy - radius), min(h, sy + radius + 1)):
                for x in range(max(0, sx - radius), min(w, sx + radius + 1)):
                    d2 = (y - sy) ** 2 + (x - sx) ** 2
                    # strict: the earlier seed in row-major order wins ties
                    if d2 < best[y, x]:
                        best[y, x] = d2
                        gov[y, x] = lidar[sy, sx]
                        idx[y, x] = k
                        roles[y, x] = 1
            k += 1
    for y in range(h):
        for x in range(w):
            if lidar[y, x] > 0:
                roles[y, x] = 2
                gov[y, x] = lidar[y, x]
    return roles, gov, idx


def compute_support_roles(lidar0, radius: int) -> SupportRoles:
    """Classify pixels as seed, window or free for a seed grid (or SparseDepthMap)."""
    if isinstance(lidar0, SparseDepthMap):
        lidar0 = lidar0.to_grid()
    roles, gov, idx = _support_roles(np.ascontiguousarray(lidar0, dtype=np.float64), int(radius))
    return SupportRoles(roles, gov, idx)


# -- cost evaluation -------------------------------------------------------------


@nb.njit(nogil=True, cache=True)
def _scheme(lid0, lid1, x, y, u, v):
    h, w = lid0.shape
    case = 0
    if lid0[y, x] > 0:
        case += 1
    xt = rint(x + u)
    yt = rint(y + v)
    look = 0.0
    if 0 <= xt < w and 0 <= yt < h and lid1[yt, xt] > 0:
        case += 2
        look = lid1[yt, xt]
    return case, look


@nb.njit(nogil=True, cache=True)
def _total_cost(L0, L1, R0, R1, x, y, u, v, d0, d1, case, r, bound):
    xf = rint(x + u)
    yf = rint(y + v)
    xr0 = rint(x - d0)
    xr1 = rint(x + u - d1)
    # E(l0, l1) at p -> p + (u, v) appears in every case
    total = patch_cost_kernel(L0, L1, x, y, xf, yf, r, bound)
    if total > bound:
        return total
    if case == 0:
        total += patch_cost_kernel(L0, R0, x, y, xr0, y, r, bound - total)
        if total > bound:
            return total
        total += patch_cost_kernel(L0, R1, x, y, xr1, yf, r, bound - total)
    elif case == 1:
        total += patch_cost_kernel(L0, R1, x, y, xr1, yf, r, bound - total)
        if total > bound:
            return total
        total += patch_cost_kernel(R0, R1, xr0, y, xr1, yf, r, bound - total)
        if total > bound:
            return total
        total += patch_cost_kernel(R0, L1, xr0, y, xf, yf, r, bound - total)
    elif case == 2:
        total += patch_cost_kernel(L0, R0, x, y, xr0, y, r, bound - total)
        if total > bound:
            return total
        total += patch_cost_kernel(R0, R1, xr0, y, xr1, yf, r, bound - total)
        if total > bound:
            return total
        total += patch_cost_kernel(L1, R1, xf, yf, xr1, yf, r, bound - total)
    else:
        total += patch_cost_kernel(R0, L1, xr0, y, xf, yf, r, bound - total)
        if total > bound:
            return total
        total += 2.0 * patch_cost_kernel(R0, R1, xr0, y, xr1, yf, r, 0.5 * (bound - total))
        if total > bound:
            return total
        total += patch_cost_kernel(L1, R1, xf, yf, xr1, yf, r, bound - total)
    return total


def select_cost_scheme(p, sf, lidar0, lidar1) -> CostScheme:
    """Which of the four cost cases applies to hypothesis ``sf`` at pixel ``p``.

    ``lidar0``/``lidar1`` may be SparseDepthMaps or (H, W) grids with 0 = empty.
    """
    g0 = lidar0.to_grid() if isinstance(lidar0, SparseDepthMap) else np.asarray(lidar0, dtype=np.float64)
    g1 = lidar1.to_grid() if isinstance(lidar1, SparseDepthMap) else np.asarray(lidar1, dtype=np.float64)
    case, look = _scheme(g0, g1, int(p[0]), int(p[1]), float(sf[0]), float(sf[1]))
    return CostScheme(CostCase(case), float(look) if case >= 2 else None)


def total_match_cost(scheme, p, sf, descriptors: Sequence[DescriptorField], patch: PatchSpec = PatchSpec()) -> float:
    """Cost of hypothesis ``sf = (u, v, d0, d1)`` at ``p = (x, y)``.

    ``descriptors`` are the fields of (left0, left1, right0, right1) in the
    matching direction.
    """
    case = scheme.case if isinstance(scheme, CostScheme) else CostCase(scheme)
    L0, L1, R0, R1 = (d.data if isinstance(d, DescriptorField) else d for d in descriptors)
    u, v, d0, d1 = map(float, sf)
    return float(_total_cost(L0, L1, R0, R1, int(p[0]), int(p[1]), u, v, d0, d1, int(case), patch.radius, np.inf))


# -- hypothesis search -----------------------------------------------------------
#
# The search caches the six constancy terms of each pixel's current
# hypothesis. A candidate reuses every term whose rounded sample coordinates
# did not change, which makes single-component perturbations cheap.
# Term ids: 0 E(l0,l1)  1 E(l0,r0)  2 E(l0,r1)  3 E(r0,r1)  4 E(r0,l1)  5 E(l1,r1)

_CASE_TERMS = np.array([[0, 1, 2, -1], [0, 2, 3, 4], [0, 1, 3, 5], [0, 4, 3, 5]], dtype=np.int64)
_CASE_WEIGHTS = np.array([[1.0, 1.0, 1.0, 0.0], [1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 2.0, 1.0]])


@nb.njit(nogil=True, cache=True)
def _term(t, L0, L1, R0, R1, x, y, xf, yf, xr0, xr1, r, bound):
    if t == 0:
        return patch_cost_kernel(L0, L1, x, y, xf, yf, r, bound)
    if t == 1:
        return patch_cost_kernel(L0, R0, x, y, xr0, y, r, bound)
    if t == 2:
        return patch_cost_kernel(L0, R1, x, y, xr1, yf, r, bound)
    if t == 3:
        return patch_cost_kernel(R0, R1, xr0, y, xr1, yf, r, bound)
    if t == 4:
        return patch_cost_kernel(R0, L1, xr0, y, xf, yf, r, bound)
    return patch_cost_kernel(L1, R1, xf, yf, xr1, yf, r, bound)


@nb.njit(nogil=True, cache=True)
def _cached_cost(L0, L1, R0, R1, x, y, xf, yf, xr0, xr1, case, r, bound, cur, cterms, out):
    """Total cost reusing cached terms whose sample coordinates are unchanged.

    ``cur`` holds (xf, yf, xr0, xr1) of the cached hypothesis and ``cterms``
    its term values (NaN = unknown). Fresh term values are written to ``out``;
    they are exact whenever the returned total is <= ``bound``.
    """
    sf = xf == cur[0] and yf == cur[1]
    s0 = xr0 == cur[2]
    s1 = xr1 == cur[3]
    for t in range(6):
        out[t] = np.nan
    reuse = (sf, s0, s1 and sf, s0 and s1 and sf, s0 and sf, sf and s1)
    total = 0.0
    for i in range(4):
        t = _CASE_TERMS[case, i]
        if t >= 0 and reuse[t] and not np.isnan(cterms[t]):
            out[t] = cterms[t]
            total += _CASE_WEIGHTS[case, i] * cterms[t]
    if total > bound:
        return total
    for i in range(4):
        t = _CASE_TERMS[case, i]
        if t < 0 or not np.isnan(out[t]):
            continue
        wgt = _CASE_WEIGHTS[case, i]
        val = _term(t, L0, L1, R0, R1, x, y, xf, yf, xr0, xr1, r, (bound - total) / wgt)
        out[t] = val
        total += wgt * val
        if total > bound:
            return total
    return total


@nb.njit(nogil=True, cache=True)
def _coords(x, y, u, v, d0, d1, cur):
    cur[0] = rint(x + u)
    cur[1] = rint(y + v)
    cur[2] = rint(x - d0)
    cur[3] = rint(x + u - d1)


@nb.njit(nogil=True, cache=True)
def _evaluate(L0, L1, R0, R1, lid0, lid1, x, y, u, v, d0, d1, role, gov, tau, dmax, snap, r, bound,
              cur, cterms, out, ccoords):
    """Cost of a candidate after applying the acceptance constraints.

    Returns (cost, d0, d1) with the admissible (possibly snapped) disparities;
    cost is inf when the candidate violates a constraint. ``ccoords``
    receives the candidate's sample coordinates.
    """
    if role == 2:
        d0 = lid0[y, x]
    elif d0 <= 0.0 or d0 > dmax:
        return np.inf, d0, d1
    case, look = _scheme(lid0, lid1, x, y, u, v)
    if snap and case >= 2:
        d1 = look
    if d1 <= 0.0 or d1 > dmax:
        return np.inf, d0, d1
    if role != 0:
        if abs(d1 - gov) > tau:
            return np.inf, d0, d1
        if role == 1 and abs(d0 - gov) > tau:
            return np.inf, d0, d1
    _coords(x, y, u, v, d0, d1, ccoords)
    # store the disparities actually sampled (same cost) unless that leaves the band;
    # seeds and LiDAR-snapped d1 keep their measured values
    if role != 2:
        q = x - ccoords[2]
        if 0.0 < q <= dmax and (role == 0 or abs(q - gov) <= tau):
            d0 = float(q)
    if not (snap and case >= 2):
        q = x + u - ccoords[3]
        if 0.0 < q <= dmax and (role == 0 or abs(q - gov) <= tau):
            d1 = q
    c = _cached_cost(L0, L1, R0, R1, x, y, ccoords[0], ccoords[1], ccoords[2], ccoords[3], case, r, bound,
                     cur, cterms, out)
    return c, d0, d1


@nb.njit(nogil=True, cache=True)
def _initialize(F, C, roles, gov, lid0, lid1, L0, L1, R0, R1, r, tau, dmax, search, snap, rnd):
    h, w = roles.shape
    K = rnd.shape[2]
    cur = np.full(4, -(2 ** 40), dtype=np.int64)
    ccoords = np.zeros(4, dtype=np.int64)
    nothing = np.full(6, np.nan)
    out = np.empty(6)
    for y in range(h):
        for x in range(w):
            role = roles[y, x]
            g = gov[y, x]
            bc = np.inf
            bu, bv, b0, b1 = 0.0, 0.0, g if role != 0 else 1.0, g if role != 0 else 1.0
            for k in range(K):
                u = float(rint((2.0 * rnd[y, x, k, 0] - 1.0) * search))
                v = float(rint((2.0 * rnd[y, x, k, 1] - 1.0) * search))
                if role == 0:
                    d0 = min(1.0 + math.floor(rnd[y, x, k, 2] * dmax), dmax)
                    d1 = min(1.0 + math.floor(rnd[y, x, k, 3] * dmax), dmax)
                else:
                    d0 = g
                    d1 = g + rint((2.0 * rnd[y, x, k, 3] - 1.0) * tau)
                    if d1 <= 0.0:
                        d1 = g
                c, d0, d1 = _evaluate(L0, L1, R0, R1, lid0, lid1, x, y, u, v, d0, d1, role, g, tau, dmax, snap, r,
                                      bc, cur, nothing, out, ccoords)
                if c < bc:
                    bc, bu, bv, b0, b1 = c, u, v, d0, d1
            if role == 2:
                b0 = lid0[y, x]
            F[y, x, 0] = bu
            F[y, x, 1] = bv
            F[y, x, 2] = b0
            F[y, x, 3] = b1
            case, _ = _scheme(lid0, lid1, x, y, bu, bv)
            C[y, x] = _total_cost(L0, L1, R0, R1, x, y, bu, bv, b0, b1, case, r, np.inf)


@nb.njit(nogil=True, cache=True)
def _field_terms(F, lid0, lid1, L0, L1, R0, R1, r):
    """Per-pixel total cost and cached term values of the current hypotheses."""
    h, w = lid0.shape
    C = np.empty((h, w))
    T = np.full((h, w, 6), np.nan)
    cur = np.full(4, -(2 ** 40), dtype=np.int64)
    nothing = np.full(6, np.nan)
    out = np.empty(6)
    for y in range(h):
        for x in range(w):
            u, v, d0, d1 = F[y, x, 0], F[y, x, 1], F[y, x, 2], F[y, x, 3]
            case, _ = _scheme(lid0, lid1, x, y, u, v)
            C[y, x] = _cached_cost(L0, L1, R0, R1, x, y, rint(x + u), rint(y + v), rint(x - d0), rint(x + u - d1),
                                   case, r, np.inf, cur, nothing, out)
            for t in range(6):
                T[y, x, t] = out[t]
    return C, T


@nb.njit(nogil=True, cache=True)
def _field_costs(F, roles, lid0, lid1, L0, L1, R0, R1, r):
    h, w = roles.shape
    C = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            case, _ = _scheme(lid0, lid1, x, y, F[y, x, 0], F[y, x, 1])
            C[y, x] = _total_cost(L0, L1, R0, R1, x, y, F[y, x, 0], F[y, x, 1], F[y, x, 2], F[y, x, 3], case, r, np.inf)
    return C


@nb.njit(nogil=True, cache=True)
def _propagate(F, C, T, roles, gov, lid0, lid1, L0, L1, R0, R1, r, tau, dmax, snap, radii, rnd, reverse):
    h, w = roles.shape
    n = h * w
    ny = (-1, 1, 0, 0)
    nx = (0, 0, -1, 1)
    cur = np.zeros(4, dtype=np.int64)
    ccoords = np.zeros(4, dtype=np.int64)
    cterms = np.empty(6)
    out = np.empty(6)
    for i in range(n):
        j = n - 1 - i if reverse else i
        y = j // w
        x = j - y * w
        role = roles[y, x]
        g = gov[y, x]
        bu, bv, b0, b1 = F[y, x, 0], F[y, x, 1], F[y, x, 2], F[y, x, 3]
        bc = C[y, x]
        _coords(x, y, bu, bv, b0, b1, cur)
        for t in range(6):
            cterms[t] = T[y, x, t]
        for k in range(4 + 3 * radii.shape[0]):
            if k < 4:
                yy = y + ny[k]
                xx = x + nx[k]
                if yy < 0 or yy >= h or xx < 0 or xx >= w:
                    continue
                u, v, d0, d1 = F[yy, xx, 0], F[yy, xx, 1], F[yy, xx, 2], F[yy, xx, 3]
                if u == bu and v == bv and d1 == b1 and (d0 == b0 or role == 2):
                    continue
            else:
                kk = (k - 4) // 3
                kind = (k - 4) - 3 * kk
                rad = radii[kk]
                u, v, d0, d1 = bu, bv, b0, b1
                if kind == 0:
                    du = rint((2.0 * rnd[y, x, kk, 0] - 1.0) * rad)
                    dv = rint((2.0 * rnd[y, x, kk, 1] - 1.0) * rad)
                    if du == 0 and dv == 0:
                        continue
                    u += du
                    v += dv
                elif kind == 1:
                    dd = rint((2.0 * rnd[y, x, kk, 2] - 1.0) * rad)
                    if dd == 0 or role == 2:
                        continue
                    d0 += dd
                else:
                    dd = rint((2.0 * rnd[y, x, kk, 3] - 1.0) * rad)
                    if dd == 0:
                        continue
                    d1 += dd
            c, d0, d1 = _evaluate(L0, L1, R0, R1, lid0, lid1, x, y, u, v, d0, d1, role, g, tau, dmax, snap, r, bc,
                                  cur, cterms, out, ccoords)
            if c < bc:
                bc, bu, bv, b0, b1 = c, u, v, d0, d1
                for t in range(4):
                    cur[t] = ccoords[t]
                for t in range(6):
                    cterms[t] = out[t]
        F[y, x, 0] = bu
        F[y, x, 1] = bv
        F[y, x, 2] = b0
        F[y, x, 3] = b1
        C[y, x] = bc
        for t in range(6):
            T[y, x, t] = cterms[t]


def _level_roles(level: PyramidLevel, direction: str, window: SupportWindowConfig) -> SupportRoles:
    _, (seed_grid, _) = level.oriented(direction)
    return compute_support_roles(seed_grid, level_window_radius(window, level.level))


def _field_from(F: np.ndarray, roles: SupportRoles) -> SceneFlowField:
    h, w = roles.roles.shape
    return SceneFlowField(F, np.ones((h, w), dtype=bool), roles.roles == ROLE_SEED, roles.roles.copy())


def initialize_coarsest(
    level: PyramidLevel,
    window: SupportWindowConfig,
    cfg: MatchingConfig,
    direction: str = "forward",
    rng: np.random.Generator | None = None,
) -> SceneFlowField:
    """Seed-driven initialisation of a level without a coarser estimate.

    Window pixels take d0 from their closest seed; everything else is the
    cheapest of ``cfg.init_candidates`` uniform random hypotheses.
    """
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    (L0, L1, R0, R1), (lid0, lid1) = level.oriented(direction)
    roles = _level_roles(level, direction, window)
    h, w = level.shape
    F = np.zeros((h, w, 4))
    C = np.zeros((h, w))
    rnd = rng.random((h, w, cfg.init_candidates, 4))
    dmax = cfg.max_disparity * level.scale
    _initialize(F, C, roles.roles, roles.governing, lid0, lid1, L0, L1, R0, R1, cfg.patch.radius,
                float(cfg.tau_d), dmax, float(cfg.search_radius), cfg.snap_to_lidar1, rnd)
    return _field_from(F, roles)


def level_costs(field: SceneFlowField, level: PyramidLevel, cfg: MatchingConfig, direction: str = "forward") -> np.ndarray:
    """Per-pixel total matching cost of the hypotheses in ``field``."""
    (L0, L1, R0, R1), (lid0, lid1) = level.oriented(direction)
    return _field_costs(np.ascontiguousarray(field.data), field.roles, lid0, lid1, L0, L1, R0, R1, cfg.patch.radius)


def propagate_and_refine(
    field: SceneFlowField,
    level: PyramidLevel,
    roles: SupportRoles | None,
    cfg: MatchingConfig,
    direction: str = "forward",
    rng: np.random.Generator | None = None,
    iterations: int | None = None,
) -> SceneFlowField:
    """Run propagation + random search sweeps over one level.

    Even iterations scan top-left to bottom-right, odd ones in reverse.
    Updates are applied in place during a sweep, so later pixels already see
    earlier adoptions.
    """
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    if roles is None:
        roles = _level_roles(level, direction, SupportWindowConfig())
    (L0, L1, R0, R1), (lid0, lid1) = level.oriented(direction)
    F = np.ascontiguousarray(field.data.copy())
    C, T = _field_terms(F, lid0, lid1, L0, L1, R0, R1, cfg.patch.radius)
    radii = cfg.radii()
    dmax = cfg.max_disparity * level.scale
    n_iter = cfg.iterations_per_level if iterations is None else iterations
    h, w = level.shape
    for it in range(n_iter):
        rnd = rng.random((h, w, len(radii), 4))
        _propagate(F, C, T, roles.roles, roles.governing, lid0, lid1, L0, L1, R0, R1, cfg.patch.radius,
                   float(cfg.tau_d), dmax, cfg.snap_to_lidar1, radii, rnd, it % 2 == 1)
    return _field_from(F, roles)


def upsample_field(field: SceneFlowField, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour 2x upsampling with all components doubled."""
    h, w = shape
    ys = np.minimum(np.arange(h) // 2, field.height - 1)
    xs = np.minimum(np.arange(w) // 2, field.width - 1)
    return 2.0 * field.data[ys[:, None], xs[None, :]]


def enforce_seed_constraints(F: np.ndarray, roles: SupportRoles, seed_grid: np.ndarray, tau: float) -> None:
    """Reset seed d0 to LiDAR and pull window disparities into the seed band (in place)."""
    r = roles.roles
    seeds = r == ROLE_SEED
    F[..., 2][seeds] = seed_grid[seeds]
    banded = r != ROLE_FREE
    lo, hi = roles.governing - tau, roles.governing + tau
    win = r == ROLE_WINDOW
    F[..., 2][win] = np.clip(F[..., 2][win], lo[win], hi[win])
    F[..., 3][banded] = np.clip(F[..., 3][banded], lo[banded], hi[banded])


def run_matcher(
    frames: CalibratedFrameSet | None,
    direction: str,
    cfg: MatchingConfig = MatchingConfig(),
    window: SupportWindowConfig = SupportWindowConfig(),
    pyramid: list[PyramidLevel] | None = None,
) -> SceneFlowField:
    """Dense scene flow matches for the forward or backward direction.

    Backward matching uses left1 as reference and D1 as seeds; its
    (u, v) point from t1 to t0 and its (d0, d1) are the disparities at t1 and
    t0 respectively.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if pyramid is None:
        pyramid = build_pyramids(frames, cfg)
    rng = np.random.default_rng([cfg.rng_seed, 0 if direction == "forward" else 1])
    field = None
    for level in reversed(pyramid):
        roles = _level_roles(level, direction, window)
        if field is None:
            field = initialize_coarsest(level, window, cfg, direction, rng)
        else:
            F = upsample_field(field, level.shape)
            _, (seed_grid, _) = level.oriented(direction)
            enforce_seed_constraints(F, roles, seed_grid, cfg.tau_d)
            field = _field_from(F, roles)
        field = propagate_and_refine(field, level, roles, cfg, direction, rng)
    return field
