"""Sparse-to-dense interpolation with LiDAR-constrained piecewise models.

Every superpixel carries three linear models, each written as a (3, k)
matrix ``P`` evaluated as ``[x, y, 1] @ P``:

* geometry: d0 over reference coordinates (k = 1)
* motion: (u, v) over reference coordinates (k = 2, an affine flow)
* future geometry: d1 over the target coordinates ``p + (u, v)`` (k = 1)

Models start as weighted least-squares fits over the matches of the
superpixel's geodesic neighbourhood and are then refined by testing the
models of adjacent superpixels and random perturbations. A superpixel with
an associated LiDAR datum only ever holds models that reproduce it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from ..core import ROLE_FREE, ROLE_SEED, SceneFlowField
from ..filtering import MatchSet
from ..io_kitti import MIN_DISPARITY
from .edges import EdgeMap, compute_edge_map
from .geodesic import nearest_anchor_neighbourhoods, pairwise_geodesic
from .superpixels import segment_superpixels

FAMILIES = ("geometry", "motion", "future")
_WIDTH = {"geometry": 1, "motion": 2, "future": 1}


@dataclass(frozen=True)
class InterpConfig:
    superpixel_count: int = 1000
    compactness: float = 10.0
    anchor_proximity: float = 10.0
    neighborhood_size: int = 32
    geodesic_lambda: float = 40.0
    lidar_consistency: float = 1.0
    refinement_iterations: int = 4
    rng_seed: int = 0
    residual_truncation: float = 3.0
    perturbations: int = 4
    value_step: float = 1.0  # initial perturbation scale of the value at the anchor
    slope_step: float = 0.02  # initial perturbation scale of the slopes
    slic_iterations: int = 10

    def __post_init__(self):
        positive = ("superpixel_count", "compactness", "anchor_proximity", "neighborhood_size",
                    "lidar_consistency", "residual_truncation", "value_step", "slope_step", "slic_iterations")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.geodesic_lambda < 0 or self.refinement_iterations < 0 or self.perturbations < 0:
            raise ValueError("geodesic_lambda, refinement_iterations and perturbations must be >= 0")


@dataclass
class SuperpixelGraph:
    labels: np.ndarray  # (H, W) int64, 0..n-1
    centroids: np.ndarray  # (n, 2) float (x, y)
    anchors: np.ndarray  # (n, 2) int (x, y)
    adjacency: list  # per superpixel: sorted array of adjacent ids
    member_order: np.ndarray  # flat pixel indices grouped by label
    member_start: np.ndarray  # (n + 1,)
    lidar_match: np.ndarray | None = None  # (n,) index into the MatchSet, -1 = none
    motion_match: np.ndarray | None = None
    motion_from_lidar: np.ndarray | None = None
    model_less: np.ndarray | None = None
    neighbors: np.ndarray | None = None  # (n, k) ids, -1 padded, nearest first
    neighbor_dist: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.centroids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def members(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(xs, ys) of superpixel ``i``."""
        flat = self.member_order[self.member_start[i]:self.member_start[i + 1]]
        w = self.labels.shape[1]
        return flat % w, flat // w


@dataclass
class PiecewiseModel:
    """Models of one superpixel in absolute pixel coordinates."""

    geometry: np.ndarray  # (a, b, c): d0 = a x + b y + c
    motion: np.ndarray  # (a11, a12, a21, a22, t1, t2): (u, v) = A (x, y) + t
    future: np.ndarray  # (a, b, c): d1 = a xt + b yt + c at target (xt, yt)

    def d0(self, x, y):
        a, b, c = self.geometry
        return a * np.asarray(x) + b * np.asarray(y) + c

    def flow(self, x, y):
        a11, a12, a21, a22, t1, t2 = self.motion
        x, y = np.asarray(x), np.asarray(y)
        return a11 * x + a12 * y + t1, a21 * x + a22 * y + t2

    def d1(self, xt, yt):
        a, b, c = self.future
        return a * np.asarray(xt) + b * np.asarray(yt) + c

    def evaluate(self, x, y):
        u, v = self.flow(x, y)
        return u, v, self.d0(x, y), self.d1(np.asarray(x) + u, np.asarray(y) + v)


@dataclass
class ModelSet:
    """Per-superpixel parameter matrices plus bookkeeping from the fit."""

    params: dict  # family -> (n, 3, k)
    inherited: dict  # family -> (n,) bool, True where the model was copied from a neighbour
    residual: dict  # family -> (n,) weighted truncated residual after refinement
    history: dict = field(default_factory=dict)  # family -> list of (n,) residuals per round

    def __len__(self) -> int:
        return len(self.params["geometry"])

    def __getitem__(self, i: int) -> PiecewiseModel:
        g = self.params["geometry"][i][:, 0]
        m = self.params["motion"][i]
        f = self.params["future"][i][:, 0]
        return PiecewiseModel(g.copy(), np.array([m[0, 0], m[1, 0], m[0, 1], m[1, 1], m[2, 0], m[2, 1]]), f.copy())


@dataclass
class InterpolationResult:
    field: SceneFlowField
    graph: SuperpixelGraph
    models: ModelSet
    diagnostics: dict


# -- graph ------------------------------------------------------------------------


def build_superpixel_graph(image: np.ndarray, cfg: InterpConfig = InterpConfig(),
                           labels: np.ndarray | None = None) -> SuperpixelGraph:
    """Segment ``image`` (unless ``labels`` are given) and collect per-superpixel geometry.

    The default anchor is the member pixel nearest to the centroid.
    """
    if labels is None:
        labels = segment_superpixels(image, cfg.superpixel_count, cfg.compactness, cfg.slic_iterations)
    labels = np.asarray(labels, dtype=np.int64)
    h, w = labels.shape
    n = int(labels.max()) + 1
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    start = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(flat, minlength=n), out=start[1:])
    if np.any(np.diff(start) == 0):
        raise ValueError("superpixel labels must be contiguous 0..n-1")
    ys, xs = order // w, order % w
    counts = np.diff(start).astype(np.float64)
    cx = np.add.reduceat(xs.astype(np.float64), start[:-1]) / counts
    cy = np.add.reduceat(ys.astype(np.float64), start[:-1]) / counts
    d2 = (xs - np.repeat(cx, np.diff(start))) ** 2 + (ys - np.repeat(cy, np.diff(start))) ** 2
    anchors = np.zeros((n, 2), dtype=np.int64)
    for i in range(n):
        j = start[i] + int(np.argmin(d2[start[i]:start[i + 1]]))
        anchors[i] = xs[j], ys[j]

    pairs = np.concatenate([
        np.stack([labels[:, :-1].ravel(), labels[:, 1:].ravel()], axis=1),
        np.stack([labels[:-1].ravel(), labels[1:].ravel()], axis=1),
    ])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(np.concatenate([pairs, pairs[:, ::-1]]), axis=0)
    split = np.searchsorted(pairs[:, 0], np.arange(n + 1))
    adjacency = [pairs[split[i]:split[i + 1], 1] for i in range(n)]
    return SuperpixelGraph(labels, np.stack([cx, cy], axis=1), anchors, adjacency, order, start)


def assign_anchors(graph: SuperpixelGraph, matches: MatchSet, cfg: InterpConfig = InterpConfig(),
                   edges: EdgeMap | None = None) -> SuperpixelGraph:
    """Attach the closest LiDAR seed (or failing that an image match) to each superpixel.

    A seed is associated when it lies inside the superpixel or within
    ``anchor_proximity`` of the centroid; the anchor then moves onto the seed.
    With an edge map, a seed outside the superpixel must also be within that
    geodesic distance of the default anchor, so seeds beyond an image edge do
    not count as close. The seed supplies geometry always and motion only
    when its motion survived filtering. Without a usable seed, motion falls
    back to the image match closest to the centroid (Euclidean proximity).
    A superpixel with neither is flagged model-less.
    """
    n = graph.n
    lidar = -np.ones(n, dtype=np.int64)
    motion = -np.ones(n, dtype=np.int64)
    from_lidar = np.zeros(n, dtype=bool)
    anchors = graph.anchors.copy()
    seeds = np.nonzero(matches.is_seed)[0]
    image_only = np.nonzero(~matches.is_seed)[0]
    pts = np.stack([matches.xs, matches.ys], axis=1).astype(np.float64)
    match_label = graph.labels[matches.ys, matches.xs] if len(matches) else np.zeros(0, dtype=np.int64)

    def closest(pool, geodesic):
        if len(pool) == 0:
            return np.zeros(n, dtype=bool), -np.ones(n, dtype=np.int64)
        d, j = cKDTree(pts[pool]).query(graph.centroids)
        j = pool[j]
        inside = match_label[j] == np.arange(n)
        ok = inside | (d <= cfg.anchor_proximity)
        if geodesic and edges is not None:
            check = ok & ~inside
            if check.any():
                g = pairwise_geodesic(edges, graph.anchors[check], pts[j[check]].astype(np.int64),
                                      cfg.geodesic_lambda, cfg.anchor_proximity)
                ok[np.nonzero(check)[0][g > cfg.anchor_proximity]] = False
        return ok, j

    s_ok, si = closest(seeds, True)
    m_ok, mi = closest(image_only, False)
    for i in range(n):
        if s_ok[i]:
            s = si[i]
            lidar[i] = s
            anchors[i] = matches.xs[s], matches.ys[s]
            if not matches.geometry_only[s]:
                motion[i] = s
                from_lidar[i] = True
        if motion[i] < 0 and m_ok[i]:
            motion[i] = mi[i]
    model_less = (lidar < 0) & (motion < 0)
    return replace(graph, anchors=anchors, lidar_match=lidar, motion_match=motion,
                   motion_from_lidar=from_lidar, model_less=model_less)


def edge_aware_neighborhoods(graph: SuperpixelGraph, edges: EdgeMap, cfg: InterpConfig = InterpConfig()) -> SuperpixelGraph:
    """The ``neighborhood_size`` superpixels nearest to each one by anchor-to-anchor geodesic distance."""
    if edges.shape != graph.shape:
        raise ValueError("edge map and label grid differ in size")
    k = min(cfg.neighborhood_size, graph.n)
    idx, dist = nearest_anchor_neighbourhoods(edges.strength, graph.anchors, k, cfg.geodesic_lambda)
    return replace(graph, neighbors=idx, neighbor_dist=dist)


# -- fitting ----------------------------------------------------------------------


@dataclass
class _FamilyData:
    coords: np.ndarray  # (N, 2) sample positions in the family's domain
    values: np.ndarray  # (N, k)
    usable: np.ndarray  # (N,) bool
    label: np.ndarray  # (N,) superpixel of the match


def _family_data(matches: MatchSet, labels: np.ndarray, family: str) -> _FamilyData:
    v = matches.vectors
    x, y = matches.xs.astype(np.float64), matches.ys.astype(np.float64)
    label = labels[matches.ys, matches.xs] if len(matches) else np.zeros(0, dtype=np.int64)
    if family == "geometry":
        return _FamilyData(np.stack([x, y], 1), v[:, 2:3], np.ones(len(x), dtype=bool), label)
    motion_ok = ~matches.geometry_only
    if family == "motion":
        return _FamilyData(np.stack([x, y], 1), v[:, 0:2], motion_ok, label)
    return _FamilyData(np.stack([x + v[:, 0], y + v[:, 1]], 1), v[:, 3:4], motion_ok, label)


def _constraint(matches: MatchSet, graph: SuperpixelGraph, family: str, i: int):
    """(coords (2,), value (k,)) of the LiDAR datum bound to superpixel ``i``, or None."""
    if family == "geometry":
        s = graph.lidar_match[i]
        if s < 0:
            return None
        return np.array([matches.xs[s], matches.ys[s]], dtype=np.float64), matches.vectors[s, 2:3]
    if not graph.motion_from_lidar[i]:
        return None
    s = graph.motion_match[i]
    vec = matches.vectors[s]
    if family == "motion":
        return np.array([matches.xs[s], matches.ys[s]], dtype=np.float64), vec[0:2]
    return np.array([matches.xs[s] + vec[0], matches.ys[s] + vec[1]]), vec[3:4]


def _weighted_fit(X, T, w, origin, through=None):
    """Least squares of T on [X - origin, 1]; with ``through`` = (point, value) the
    fit passes exactly through it. Returns absolute (3, k) parameters or None."""
    if through is not None:
        p, val = through
        A = X - p
        B = T - val
        sw = np.sqrt(w)[:, None]
        Aw = A * sw
        if len(A) < 2 or np.linalg.matrix_rank(Aw, tol=1e-9 * max(1.0, np.abs(Aw).max())) < 2:
            return None
        slopes, *_ = np.linalg.lstsq(Aw, B * sw, rcond=None)
        return np.vstack([slopes, val - p @ slopes])
    A = np.hstack([X - origin, np.ones((len(X), 1))])
    sw = np.sqrt(w)[:, None]
    Aw = A * sw
    if len(A) < 3 or np.linalg.matrix_rank(Aw, tol=1e-9 * max(1.0, np.abs(Aw).max())) < 3:
        return None
    P, *_ = np.linalg.lstsq(Aw, T * sw, rcond=None)
    return np.vstack([P[:2], P[2] - origin @ P[:2]])


def _predict(P, X):
    """P (..., 3, k), X (N, 2) -> (..., N, k)."""
    return X @ P[..., :2, :] + P[..., 2:3, :]


def _errors(P, X, T):
    d = _predict(P, X) - T
    return np.sqrt(np.sum(d * d, axis=-1))


class _Fitter:
    """Per-family fitting state shared by the initial fit and the refinement."""

    def __init__(self, graph: SuperpixelGraph, matches: MatchSet, cfg: InterpConfig, family: str):
        self.graph, self.matches, self.cfg, self.family = graph, matches, cfg, family
        self.k = _WIDTH[family]
        data = _family_data(matches, graph.labels, family)
        self.data = data
        n = graph.n
        # matches of each superpixel (usable for this family)
        use = np.nonzero(data.usable)[0]
        by_label = [[] for _ in range(n)]
        for j in use:
            by_label[data.label[j]].append(j)
        self.by_label = [np.array(b, dtype=np.int64) for b in by_label]
        self.rows, self.weights, self.constraints = [], [], []
        for i in range(n):
            nb = graph.neighbors[i]
            dist = graph.neighbor_dist[i]
            ok = nb >= 0
            nb, dist = nb[ok], dist[ok]
            sigma = float(np.mean(dist)) if len(dist) and np.mean(dist) > 0 else 1.0
            rows = [self.by_label[j] for j in nb]
            wts = [np.full(len(r), np.exp(-d / sigma)) for r, d in zip(rows, dist)]
            self.rows.append(np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64))
            self.weights.append(np.concatenate(wts) if wts else np.zeros(0))
            self.constraints.append(_constraint(matches, graph, family, i))

    def cost(self, i, P):
        r = self.rows[i]
        if len(r) == 0:
            return np.zeros(P.shape[:-2]) if P.ndim > 2 else 0.0
        e = _errors(P, self.data.coords[r], self.data.values[r])
        return np.sum(self.weights[i] * np.minimum(e, self.cfg.residual_truncation), axis=-1)

    def initial(self, i):
        if self.graph.model_less[i]:
            return None
        r = self.rows[i]
        if len(r) == 0:
            return None
        X, T, w = self.data.coords[r], self.data.values[r], self.weights[i].copy()
        con = self.constraints[i]
        origin = self.graph.anchors[i].astype(np.float64)
        P = _weighted_fit(X, T, w, origin, con)
        # two reweighting passes drop samples beyond the truncation
        for _ in range(2):
            if P is None:
                return None
            keep = _errors(P, X, T) <= self.cfg.residual_truncation
            if keep.all():
                break
            P2 = _weighted_fit(X[keep], T[keep], w[keep], origin, con)
            if P2 is None:
                break
            P = P2
        return P

    def consistent(self, i, P, tol=None):
        """Mask over candidates (leading axis) that honour the LiDAR datum."""
        con = self.constraints[i]
        P = P.reshape((-1, 3, self.k))
        if con is None:
            return np.ones(len(P), dtype=bool)
        tol = self.cfg.lidar_consistency if tol is None else tol
        pred = _predict(P, con[0][None, :])[:, 0, :]
        return np.all(np.abs(pred - con[1]) <= tol, axis=1)

    def through_constraint(self, i, P):
        """Shift the intercept so the model reproduces the associated datum exactly."""
        con = self.constraints[i]
        if con is None:
            return P
        P = P.copy()
        P[..., 2, :] += con[1] - _predict(P, con[0][None, :])[..., 0, :]
        return P


def _positive_over(P, xs, ys):
    X = np.stack([xs, ys], 1).astype(np.float64)
    return np.all(_predict(P.reshape(-1, 3, 1), X)[..., 0] > 0, axis=-1)


def fit_and_refine_models(graph: SuperpixelGraph, matches: MatchSet, cfg: InterpConfig = InterpConfig()) -> ModelSet:
    """Initial weighted fits, inheritance for degenerate superpixels, then refinement.

    Refinement rounds read the models of the previous round. A candidate
    (an adjacent superpixel's model, the same shifted through this
    superpixel's LiDAR datum, or a Gaussian perturbation whose scale halves
    every round) replaces the current model only if it lowers the weighted
    truncated residual and reproduces the associated LiDAR datum within
    ``lidar_consistency``.
    """
    if graph.neighbors is None or graph.lidar_match is None:
        raise ValueError("anchors and neighbourhoods must be computed first")
    n = graph.n
    rng = np.random.default_rng(cfg.rng_seed)
    members = [graph.members(i) for i in range(n)]
    fitters = {f: _Fitter(graph, matches, cfg, f) for f in FAMILIES}
    params, inherited, residual, history = {}, {}, {}, {}

    for family in FAMILIES:
        fit = fitters[family]
        k = fit.k
        P = np.zeros((n, 3, k))
        ok = np.zeros(n, dtype=bool)
        for i in range(n):
            Pi = fit.initial(i)
            if Pi is None or not np.all(np.isfinite(Pi)):
                continue
            if not _feasible(family, Pi[None], members[i], params, i)[0]:
                continue
            P[i], ok[i] = Pi, True
        if not ok.any():
            raise ValueError(f"no superpixel has enough matches to fit a {family} model")
        inh = ~ok
        _inherit(P, ok, graph, fit)
        params[family] = P
        inherited[family] = inh

        cur = np.array([fit.cost(i, P[i]) for i in range(n)])
        hist = [cur.copy()]
        for it in range(cfg.refinement_iterations):
            prev = P.copy()
            scale = 0.5 ** it
            for i in range(n):
                cands = [prev[j] for j in graph.adjacency[i]]
                cands += [fit.through_constraint(i, prev[j]) for j in graph.adjacency[i]]
                base = P[i]
                ax, ay = graph.anchors[i].astype(np.float64)
                for _ in range(cfg.perturbations):
                    q = base.copy()
                    q[:2] += rng.normal(0.0, cfg.slope_step * scale, size=(2, k))
                    # keep the value at the anchor independent of the slope change
                    q[2] = base[2] + (base[0] - q[0]) * ax + (base[1] - q[1]) * ay
                    q[2] += rng.normal(0.0, cfg.value_step * scale, size=k)
                    cands.append(fit.through_constraint(i, q))
                if not cands:
                    continue
                C = np.stack(cands)
                good = np.all(np.isfinite(C), axis=(1, 2)) & fit.consistent(i, C)
                good &= _feasible(family, C, members[i], params, i)
                if not good.any():
                    continue
                costs = fit.cost(i, C[good])
                b = int(np.argmin(costs))
                if costs[b] < cur[i]:
                    P[i] = C[good][b]
                    cur[i] = costs[b]
            hist.append(cur.copy())
        residual[family] = cur
        history[family] = hist
    return ModelSet(params, inherited, residual, history)


def _feasible(family, C, member_xy, params, i):
    """Disparity models must stay positive over the superpixel."""
    xs, ys = member_xy
    if family == "motion":
        return np.ones(len(C), dtype=bool)
    if family == "future" and "motion" in params:
        M = params["motion"][i]
        X = np.stack([xs, ys], 1).astype(np.float64)
        uv = _predict(M, X)
        xs, ys = xs + uv[:, 0], ys + uv[:, 1]
    return _positive_over(C, xs, ys)


def _inherit(P, ok, graph: SuperpixelGraph, fit: _Fitter) -> None:
    """Give every superpixel without a model the model of its nearest fitted neighbour."""
    fitted = np.nonzero(ok)[0]
    tree = cKDTree(graph.centroids[fitted])
    for i in np.nonzero(~ok)[0]:
        src = -1
        for j in graph.neighbors[i]:
            if j >= 0 and ok[j]:
                src = j
                break
        if src < 0:
            src = fitted[tree.query(graph.centroids[i])[1]]
        P[i] = fit.through_constraint(i, P[src])


# -- densification ----------------------------------------------------------------


def densify_field(graph: SuperpixelGraph, models: ModelSet, matches: MatchSet) -> tuple[SceneFlowField, dict]:
    """Evaluate each pixel's superpixel models; seeds keep their measured d0."""
    h, w = graph.shape
    lab = graph.labels
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    def ev(P, X, Y):
        return X[..., None] * P[lab, 0] + Y[..., None] * P[lab, 1] + P[lab, 2]

    d0 = ev(models.params["geometry"], xs, ys)[..., 0]
    uv = ev(models.params["motion"], xs, ys)
    d1 = ev(models.params["future"], xs + uv[..., 0], ys + uv[..., 1])[..., 0]
    seeds = matches.is_seed
    sx, sy = matches.xs[seeds], matches.ys[seeds]
    d0[sy, sx] = matches.vectors[seeds, 2]
    bad0 = ~(d0 > 0)
    bad1 = ~(d1 > 0)
    d0[bad0] = MIN_DISPARITY
    d1[bad1] = MIN_DISPARITY
    data = np.stack([uv[..., 0], uv[..., 1], d0, d1], axis=-1)
    seed_mask = np.zeros((h, w), dtype=bool)
    seed_mask[sy, sx] = True
    roles = np.where(seed_mask, ROLE_SEED, ROLE_FREE).astype(np.int8)
    out = SceneFlowField(data, np.ones((h, w), dtype=bool), seed_mask, roles)
    diag = {"clamped_d0": int(bad0.sum()), "clamped_d1": int(bad1.sum())}
    return out, diag


def interpolate_matches(matches: MatchSet, image: np.ndarray, cfg: InterpConfig = InterpConfig(),
                        edges: EdgeMap | None = None, labels: np.ndarray | None = None) -> InterpolationResult:
    """Dense scene flow from sparse matches on the reference ``image``."""
    if image.shape[:2] != (matches.height, matches.width):
        raise ValueError("image and matches differ in size")
    if len(matches) == 0:
        raise ValueError("cannot interpolate without matches")
    edges = compute_edge_map(image) if edges is None else edges
    graph = build_superpixel_graph(image, cfg, labels)
    graph = assign_anchors(graph, matches, cfg, edges)
    graph = edge_aware_neighborhoods(graph, edges, cfg)
    models = fit_and_refine_models(graph, matches, cfg)
    dense, diag = densify_field(graph, models, matches)
    diag.update({
        "superpixels": graph.n,
        "model_less": int(graph.model_less.sum()),
        "lidar_anchored": int((graph.lidar_match >= 0).sum()),
        **{f"inherited_{f}": int(models.inherited[f].sum()) for f in FAMILIES},
    })
    return InterpolationResult(dense, graph, models, diag)
