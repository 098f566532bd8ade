import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from lidarflow.core import ROLE_FREE, ROLE_SEED, ROLE_WINDOW, SceneFlowField
from lidarflow.filtering import (
    FilterConfig,
    MatchSet,
    SgmConfig,
    census_transform,
    cluster_filter,
    compute_reference_disparities,
    compute_reference_disparity,
    filter_matches,
    forward_backward_residual,
    similarity_components,
    sparsify_matches,
    stage1_geometry_check,
    stage2_forward_backward_check,
)
from lidarflow.io_kitti import DisparityImage


def _field(data, valid=None, seeds=None, roles=None):
    h, w = data.shape[:2]
    valid = np.ones((h, w), bool) if valid is None else valid
    seeds = np.zeros((h, w), bool) if seeds is None else seeds
    if roles is None:
        roles = np.where(seeds, ROLE_SEED, ROLE_FREE).astype(np.int8)
    return SceneFlowField(data.astype(float), valid, seeds, roles)


def _const(h, w, vec):
    return np.broadcast_to(np.asarray(vec, float), (h, w, 4)).copy()


def _texture(rng, h, w):
    img = cv2.GaussianBlur(rng.uniform(0, 255, (h, w)), (0, 0), 1.0)
    return np.clip((img - img.mean()) * 3 + 128, 0, 255).astype(np.uint8)


# -- SGM ----------------------------------------------------------------------------


def test_sgm_recovers_constant_shift(rng):
    big = _texture(rng, 60, 107)
    left, right = big[:, :100], big[:, 7:107]
    d = compute_reference_disparity(left, right, SgmConfig(max_disparity=32))
    inner = d.valid[:, 40:]
    assert inner.mean() > 0.9
    assert (np.abs(d.values[:, 40:][inner] - 7) <= 1).all()
    assert (d.values[d.valid] >= 1).all() and (d.values[d.valid] <= 32).all()


def test_sgm_constant_image_is_invalid():
    img = np.full((30, 50), 90, np.uint8)
    left, right = compute_reference_disparities(img, img, SgmConfig(max_disparity=16))
    assert not left.valid.any() and not right.valid.any()


def test_census_bits(rng):
    img = np.zeros((5, 5))
    img[2, 2] = 10
    c = census_transform(img, 1)
    # every neighbour of the bright centre is darker
    assert bin(int(c[2, 2])).count("1") in (0, 8)


# -- stage 1 ------------------------------------------------------------------------


def test_stage1_drops_only_free_pixels():
    data = _const(5, 5, (0, 0, 10, 10))
    roles = np.zeros((5, 5), np.int8)
    seeds = np.zeros((5, 5), bool)
    seeds[2, 2] = True
    roles[2, 2] = ROLE_SEED
    roles[2, 3] = ROLE_WINDOW
    f = _field(data, seeds=seeds, roles=roles)
    ref = DisparityImage(np.full((5, 5), 20.0), np.ones((5, 5), bool))
    out = stage1_geometry_check(f, ref)
    assert out.valid[2, 2] and out.valid[2, 3]
    assert out.valid.sum() == 2


def test_stage1_tolerance_and_invalid_reference():
    f = _field(_const(3, 3, (0, 0, 10, 10)))
    vals = np.full((3, 3), 12.9)
    valid = np.ones((3, 3), bool)
    vals[0, 0], valid[1, 1] = 13.5, False
    vals[1, 1] = 50
    out = stage1_geometry_check(f, DisparityImage(vals, valid), FilterConfig(stage1_tolerance=3))
    assert not out.valid[0, 0] and out.valid[1, 1] and out.valid.sum() == 8


# -- stage 2 ------------------------------------------------------------------------


def test_exact_inverse_passes():
    fwd = _field(_const(6, 8, (2, 1, 5, 6)))
    bwd = _field(_const(6, 8, (-2, -1, 6, 5)))
    out = stage2_forward_backward_check(fwd, bwd)
    assert out.valid[:4, :6].all()
    # targets outside the image cannot be verified
    assert not out.valid[5, 7]


def test_inconsistent_flow_invalidated():
    fwd = _field(_const(4, 20, (10, 0, 5, 5)))
    bwd = _field(_const(4, 20, (-4, 0, 5, 5)))
    res = forward_backward_residual(fwd, bwd)
    assert res[0, 0] == 6
    assert not stage2_forward_backward_check(fwd, bwd).valid[0, 0]


def test_failing_seed_keeps_geometry():
    seeds = np.zeros((4, 20), bool)
    seeds[1, 1] = True
    fwd = _field(_const(4, 20, (10, 0, 5, 5)), seeds=seeds)
    bwd = _field(_const(4, 20, (-4, 0, 5, 5)))
    out = stage2_forward_backward_check(fwd, bwd)
    assert out.valid[1, 1] and out.geometry_only[1, 1] and not out.motion_valid[1, 1]
    assert out.d0[1, 1] == 5


# -- clustering ---------------------------------------------------------------------


def test_small_blob_removed_unless_seeded():
    data = _const(20, 20, (0, 0, 5, 5))
    data[2:4, 2:7] = (9, 9, 20, 20)  # 10-pixel outlier blob
    f = _field(data)
    out = cluster_filter(f)
    assert not out.valid[2:4, 2:7].any() and out.valid.sum() == 390
    seeds = np.zeros((20, 20), bool)
    seeds[3, 4] = True
    assert cluster_filter(_field(data, seeds=seeds)).valid[2:4, 2:7].all()


def test_two_large_regions_kept():
    data = _const(10, 10, (0, 0, 5, 5))
    data[:, 5:] = (8, 0, 12, 12)
    out = cluster_filter(_field(data), FilterConfig(min_cluster_size=50))
    assert out.valid.all()


def _components_oracle(data, valid, tol):
    h, w = valid.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols = [], []
    for y in range(h):
        for x in range(w):
            for yy, xx in ((y + 1, x), (y, x + 1)):
                if yy < h and xx < w and valid[y, x] and valid[yy, xx]:
                    if np.all(np.abs(data[y, x] - data[yy, xx]) <= tol):
                        rows.append(idx[y, x])
                        cols.append(idx[yy, xx])
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(h * w, h * w))
    _, lab = connected_components(g, directed=False)
    return lab.reshape(h, w)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_clustering_keeps_union_of_large_components(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(4, 16, size=2)
    data = rng.integers(0, 3, (h, w, 4)).astype(float) * 2.0
    valid = rng.random((h, w)) < 0.9
    f = _field(data, valid)
    tol, size = 2.0, int(rng.integers(1, 10))
    out = cluster_filter(f, FilterConfig(cluster_similarity=tol, min_cluster_size=size))
    lab = _components_oracle(data, valid, tol)
    counts = np.bincount(lab[valid], minlength=h * w)
    want = valid & (counts[lab] >= size)
    assert np.array_equal(out.valid, want)
    labels = similarity_components(f, tol)
    assert ((labels >= 0) == valid).all()


# -- sparsification -----------------------------------------------------------------


def test_sparsify_keeps_one_per_block():
    f = _field(_const(3, 3, (1, 1, 4, 4)))
    m = sparsify_matches(f)
    assert len(m) == 1 and (m.xs[0], m.ys[0]) == (0, 0)


def test_sparsify_keeps_all_seeds():
    seeds = np.zeros((3, 3), bool)
    seeds[0, 0] = seeds[2, 2] = True
    f = _field(_const(3, 3, (1, 1, 4, 4)), seeds=seeds)
    f.residual[1, 2] = 0.1
    f.residual[~seeds & (f.residual == np.inf)] = 0.5
    m = sparsify_matches(f)
    assert len(m) == 3 and m.is_seed.sum() == 2
    free = ~m.is_seed
    assert (m.xs[free][0], m.ys[free][0]) == (2, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_sparsify_bound_and_subset(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 20, size=2)
    valid = rng.random((h, w)) < 0.7
    seeds = valid & (rng.random((h, w)) < 0.05)
    f = _field(rng.normal(size=(h, w, 4)), valid, seeds)
    m = sparsify_matches(f)
    assert len(m) <= -(-h // 3) * -(-w // 3) + seeds.sum()
    assert valid[m.ys, m.xs].all() and np.array_equal(m.vectors, f.data[m.ys, m.xs])
    back = m.to_field()
    assert np.array_equal(back.seed_mask, seeds)


def test_match_set_round_trip():
    f = _field(_const(4, 4, (1, 2, 3, 4)))
    m = MatchSet.from_field(f, f.valid)
    assert len(m) == 16 and np.array_equal(m.to_field().data, f.data)


def test_filter_pipeline_densities_monotone(rng):
    data = _const(30, 30, (1, 0, 5, 5))
    data += rng.normal(0, 0.2, data.shape)
    bwd = _field(_const(30, 30, (-1, 0, 5, 5)))
    ref = DisparityImage(np.full((30, 30), 5.0), rng.random((30, 30)) < 0.8)
    res = filter_matches(_field(data), bwd, ref)
    d1, d2 = res.after_stage1.density(), res.after_stage2.density()
    assert 1.0 >= d1 >= d2 >= len(res.matches) / 900


def test_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(fb_tolerance=-1)
    with pytest.raises(ValueError):
        SgmConfig(p1=20, p2=10)
