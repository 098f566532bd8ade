import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from lidarflow.core import ROLE_FREE, ROLE_SEED
from lidarflow.filtering import MatchSet
from lidarflow.interpolation import (
    EdgeMap,
    InterpConfig,
    assign_anchors,
    build_superpixel_graph,
    compute_edge_map,
    edge_aware_neighborhoods,
    fit_and_refine_models,
    geodesic_distance,
    interpolate_matches,
    load_edge_map,
    nearest_anchor_neighbourhoods,
    pairwise_geodesic,
    segment_superpixels,
)


def _blocks(h, w, b):
    ys, xs = np.mgrid[0:h, 0:w]
    return (ys // b) * (-(-w // b)) + xs // b


def _matches(h, w, points, fn, seeds=(), geometry_only=()):
    """MatchSet with vectors fn(x, y) at ``points``; ``seeds`` is a subset."""
    pts = sorted(set(points) | set(seeds), key=lambda p: (p[1], p[0]))
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    vec = np.array([fn(x, y) for x, y in pts], dtype=float).reshape(-1, 4)
    roles = np.array([ROLE_SEED if p in seeds else ROLE_FREE for p in pts], np.int8)
    geo = np.array([p in geometry_only for p in pts], bool)
    return MatchSet(w, h, xs, ys, vec, roles, np.zeros(len(pts)), geo)


def _plane(x, y):
    u = 0.01 * x - 0.02 * y + 1.5
    v = 0.005 * x + 0.01 * y - 0.5
    return (u, v, 0.05 * x + 0.1 * y + 10, 0.05 * (x + u) + 0.1 * (y + v) + 12)


def _prepared(labels, matches, cfg, edges=None):
    h, w = labels.shape
    edges = EdgeMap(np.zeros((h, w))) if edges is None else edges
    g = build_superpixel_graph(None, cfg, labels)
    g = assign_anchors(g, matches, cfg, edges)
    return edge_aware_neighborhoods(g, edges, cfg)


# -- edges --------------------------------------------------------------------------


def test_constant_image_has_no_edges():
    assert not compute_edge_map(np.full((20, 30), 100, np.uint8)).strength.any()


def test_step_gives_ridge():
    img = np.zeros((20, 40), np.uint8)
    img[:, 20:] = 200
    e = compute_edge_map(img).strength
    assert e.min() >= 0 and e.max() <= 1
    assert set(np.argmax(e, axis=1)) <= {19, 20}
    assert e[:, :15].max() == 0 and e[:, 25:].max() == 0


def test_edge_map_png(tmp_path):
    cv2.imwrite(str(tmp_path / "e.png"), np.array([[0, 255]], np.uint8))
    assert load_edge_map(tmp_path / "e.png").strength.tolist() == [[0.0, 1.0]]
    with pytest.raises(ValueError):
        EdgeMap(np.array([[1.5]]))


# -- superpixels --------------------------------------------------------------------


def test_slic_follows_block_image():
    img = np.kron(np.array([[20, 200], [120, 60]], np.uint8), np.ones((16, 16), np.uint8))
    lab = segment_superpixels(img, 4)
    assert np.array_equal(lab, _blocks(32, 32, 16))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(4, 60))
def test_slic_is_connected_partition(seed, count):
    rng = np.random.default_rng(seed)
    img = cv2.GaussianBlur(rng.uniform(0, 255, (40, 50)), (0, 0), 2.0)
    lab = segment_superpixels(img, count)
    n = lab.max() + 1
    assert set(np.unique(lab)) == set(range(n))
    for i in range(n):
        assert ndimage.label(lab == i)[1] == 1


def test_slic_count_near_request(scene):
    n = segment_superpixels(scene.left0, 1000).max() + 1
    assert 800 <= n <= 1200


# -- geodesic -----------------------------------------------------------------------


def test_zero_edges_give_manhattan_distance():
    d = geodesic_distance(np.zeros((7, 9)), [(2, 3)])
    ys, xs = np.mgrid[0:7, 0:9]
    assert np.array_equal(d, np.abs(xs - 2) + np.abs(ys - 3))


def test_wall_adds_penalty():
    e = np.zeros((5, 9))
    e[:, 4] = 1.0
    d = geodesic_distance(e, [(0, 2)], lam=40)
    # crossing the wall enters and leaves a ridge pixel
    assert d[2, 8] == 8 + 2 * 40


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_geodesic_triangle_inequality_and_pairs(seed):
    rng = np.random.default_rng(seed)
    e = rng.integers(0, 5, (8, 10)) / 4
    a, b, c = [tuple(int(v) for v in rng.integers(0, (10, 8))) for _ in range(3)]
    da, db = geodesic_distance(e, [a]), geodesic_distance(e, [b])
    assert da[c[1], c[0]] <= da[b[1], b[0]] + db[c[1], c[0]] + 1e-9
    assert da[b[1], b[0]] == db[a[1], a[0]]
    pair = pairwise_geodesic(e, [a, b], [c, c])
    assert pair.tolist() == [da[c[1], c[0]], db[c[1], c[0]]]
    lim = pairwise_geodesic(e, [a], [c], limit=da[c[1], c[0]] - 0.5)
    assert lim[0] == np.inf or da[c[1], c[0]] == 0


def test_neighbourhoods_sorted_nearest_first():
    anchors = np.array([[0, 0], [3, 0], [9, 0], [1, 4]])
    idx, dist = nearest_anchor_neighbourhoods(np.zeros((5, 10)), anchors, 3)
    assert idx[0].tolist() == [0, 1, 3] and dist[0].tolist() == [0, 3, 5]


# -- anchors ------------------------------------------------------------------------


def test_seed_inside_moves_anchor():
    labels = _blocks(40, 40, 20)
    m = _matches(40, 40, [], _plane, seeds=[(5, 3)])
    g = _prepared(labels, m, InterpConfig())
    assert g.lidar_match[0] == 0 and tuple(g.anchors[0]) == (5, 3) and g.motion_from_lidar[0]


def test_far_seed_ignored_image_match_used():
    labels = np.zeros((60, 60), np.int64)
    labels[:, 30:] = 1
    # superpixel 0 centroid (14.5, 29.5); seed lies in superpixel 1, 25 px away
    m = _matches(60, 60, [(12, 28)], _plane, seeds=[(39, 29)])
    g = _prepared(labels, m, InterpConfig())
    assert g.lidar_match[0] == -1 and g.motion_match[0] == m.xs.tolist().index(12)
    assert not g.motion_from_lidar[0] and not g.model_less[0]


def test_superpixel_without_matches_is_model_less():
    labels = _blocks(60, 60, 30)
    m = _matches(60, 60, [(5, 5)], _plane)
    g = _prepared(labels, m, InterpConfig(anchor_proximity=2))
    assert g.model_less.tolist() == [False, True, True, True]


def test_geometry_only_seed_gives_no_motion():
    labels = _blocks(40, 40, 20)
    m = _matches(40, 40, [], _plane, seeds=[(5, 3)], geometry_only=[(5, 3)])
    g = _prepared(labels, m, InterpConfig())
    assert g.lidar_match[0] == 0 and g.motion_match[0] == -1


def test_seed_behind_edge_not_associated():
    labels = np.zeros((30, 30), np.int64)
    labels[:, 15:] = 1
    e = np.zeros((30, 30))
    e[:, 15] = 1.0
    m = _matches(30, 30, [], _plane, seeds=[(16, 14)])
    cfg = InterpConfig(anchor_proximity=10)
    assert _prepared(labels, m, cfg).lidar_match[0] == 0
    assert _prepared(labels, m, cfg, EdgeMap(e)).lidar_match[0] == -1


# -- fitting and densification ------------------------------------------------------


def _grid_points(h, w, step):
    return [(x, y) for y in range(1, h, step) for x in range(1, w, step)]


def test_exact_plane_recovered():
    h, w = 48, 64
    m = _matches(h, w, _grid_points(h, w, 3), _plane, seeds=[(10, 10), (40, 30)])
    cfg = InterpConfig(superpixel_count=12)
    res = interpolate_matches(m, np.zeros((h, w), np.uint8), cfg, labels=_blocks(h, w, 16))
    ys, xs = np.mgrid[0:h, 0:w]
    want = np.stack(_plane(xs, ys), axis=-1)
    assert np.abs(res.field.data - want).max() < 1e-6
    assert res.field.valid.all() and res.field.density() == 1.0
    P = res.models.params["geometry"]
    assert np.allclose(P[:, :, 0], [0.05, 0.1, 10], atol=1e-3)


def test_seed_d0_exact_and_models_honour_lidar(rng):
    h, w = 48, 64
    seeds = [(8, 8), (40, 20), (25, 40)]

    def noisy(x, y):
        return np.array(_plane(x, y)) + rng.normal(0, 0.3, 4)

    m = _matches(h, w, _grid_points(h, w, 3), noisy, seeds=seeds)
    labels = _blocks(h, w, 16)
    cfg = InterpConfig(lidar_consistency=1.0)
    g = _prepared(labels, m, cfg)
    models = fit_and_refine_models(g, m, cfg)
    for i in np.nonzero(g.lidar_match >= 0)[0]:
        s = g.lidar_match[i]
        pred = models[i].d0(m.xs[s], m.ys[s])
        assert abs(pred - m.vectors[s, 2]) <= cfg.lidar_consistency
    res = interpolate_matches(m, np.zeros((h, w), np.uint8), cfg, labels=labels)
    for x, y in seeds:
        j = np.nonzero((m.xs == x) & (m.ys == y))[0][0]
        assert res.field.d0[y, x] == m.vectors[j, 2]


def test_model_violating_seed_is_not_kept():
    h, w = 40, 40
    seed = (10, 10)

    def fn(x, y):
        d = 20.0 if (x, y) == seed else 10.0 + 0.0 * x
        return (0.0, 0.0, d, d)

    m = _matches(h, w, _grid_points(h, w, 2), fn, seeds=[seed])
    g = _prepared(_blocks(h, w, 20), m, InterpConfig())
    models = fit_and_refine_models(g, m, InterpConfig())
    # the plane of the surrounding matches (d0 = 10) misses the seed by 10 px
    assert abs(models[0].d0(*seed) - 20.0) <= 1.0


def test_sparse_superpixel_inherits():
    h, w = 40, 80
    labels = _blocks(h, w, 40)
    pts = [p for p in _grid_points(h, w, 3) if p[0] < 40] + [(50, 10), (60, 30)]
    m = _matches(h, w, pts, _plane)
    cfg = InterpConfig(neighborhood_size=1)
    g = _prepared(labels, m, cfg)
    models = fit_and_refine_models(g, m, cfg)
    assert models.inherited["geometry"].tolist() == [False, True]


def test_refinement_monotone(rng):
    h, w = 48, 64

    def noisy(x, y):
        return np.array(_plane(x, y)) + rng.normal(0, 1.0, 4)

    m = _matches(h, w, _grid_points(h, w, 2), noisy, seeds=[(8, 8)])
    cfg = InterpConfig(refinement_iterations=5)
    g = _prepared(_blocks(h, w, 8), m, cfg)
    models = fit_and_refine_models(g, m, cfg)
    for fam, hist in models.history.items():
        for a, b in zip(hist, hist[1:]):
            assert (b <= a + 1e-12).all(), fam


def test_interpolation_requires_matches():
    empty = MatchSet(8, 8, [], [], np.zeros((0, 4)), [], [], [])
    with pytest.raises(ValueError):
        interpolate_matches(empty, np.zeros((8, 8), np.uint8))


def test_config_validation():
    with pytest.raises(ValueError):
        InterpConfig(superpixel_count=0)
