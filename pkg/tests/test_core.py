import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lidarflow.core import (
    CalibratedFrameSet,
    SceneFlowField,
    SparseDepthMap,
    depth_to_disparity,
    disparity_to_depth,
    round_half_up,
    to_luminance,
)


def _calib(f=721.5, b=0.54, shape=(4, 5)):
    img = np.zeros(shape, dtype=np.uint8)
    empty = SparseDepthMap(shape[1], shape[0])
    return CalibratedFrameSet(img, img, img, img, empty, empty, baseline=b, focal_length=f)


def test_depth_of_focal_times_baseline_is_one():
    c = _calib()
    assert disparity_to_depth(c.focal_length * c.baseline, c) == pytest.approx(1.0, rel=1e-15)


def test_doubling_disparity_halves_depth():
    c = _calib()
    assert disparity_to_depth(20.0, c) == pytest.approx(2 * disparity_to_depth(40.0, c), rel=1e-15)


def test_kitti_like_depth_matches_hand_value():
    # 721.5 * 0.54 / 38.96 = 389.61 / 38.96
    c = _calib(721.5, 0.54)
    assert disparity_to_depth(38.96, c) == pytest.approx(10.000256673511294, rel=1e-12)


def test_non_positive_disparity_rejected():
    with pytest.raises(ValueError):
        disparity_to_depth(0.0, _calib())
    with pytest.raises(ValueError):
        depth_to_disparity(np.array([1.0, -2.0]), _calib())


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-3, max_value=1e4, allow_nan=False))
def test_depth_disparity_round_trip(z):
    c = _calib()
    assert disparity_to_depth(depth_to_disparity(z, c), c) == pytest.approx(z, rel=1e-9)


def test_round_half_up_goes_up_on_halves():
    assert round_half_up([-1.5, -0.5, 0.5, 1.5, 2.49]).tolist() == [-1, 0, 1, 2, 2]


@settings(max_examples=100, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_density_is_valid_fraction(valid):
    h, w = valid.shape
    f = SceneFlowField(np.zeros((h, w, 4)), valid, np.zeros((h, w), dtype=bool))
    assert f.density() == np.count_nonzero(valid) / (h * w)


def test_seed_must_be_valid():
    valid = np.zeros((3, 3), dtype=bool)
    seeds = valid.copy()
    seeds[1, 1] = True
    with pytest.raises(ValueError):
        SceneFlowField(np.zeros((3, 3, 4)), valid, seeds)


def test_field_shape_checked():
    with pytest.raises(ValueError):
        SceneFlowField(np.zeros((3, 3, 3)), np.ones((3, 3), bool), np.zeros((3, 3), bool))
    with pytest.raises(ValueError):
        SceneFlowField(np.zeros((3, 3, 4)), np.ones((3, 4), bool), np.zeros((3, 3), bool))


def test_geometry_only_requires_seed():
    valid = np.ones((2, 2), dtype=bool)
    geo = np.zeros((2, 2), dtype=bool)
    geo[0, 0] = True
    with pytest.raises(ValueError):
        SceneFlowField(np.zeros((2, 2, 4)), valid, np.zeros((2, 2), bool), geometry_only=geo)
    f = SceneFlowField(np.zeros((2, 2, 4)), valid, geo.copy(), geometry_only=geo)
    assert not f.motion_valid[0, 0] and f.motion_valid[1, 1]


def test_sparse_map_grid_round_trip():
    m = SparseDepthMap.from_entries(6, 4, [(1, 2, 3.5), (5, 0, 10.0)])
    g = m.to_grid()
    assert g[2, 1] == 3.5 and g[0, 5] == 10.0 and np.count_nonzero(g) == 2
    back = SparseDepthMap.from_grid(g)
    assert sorted(back.entries()) == sorted(m.entries())
    assert m.density() == 2 / 24


@pytest.mark.parametrize("entries", [[(6, 0, 1.0)], [(0, 4, 1.0)], [(0, 0, 0.0)], [(1, 1, 2.0), (1, 1, 3.0)]])
def test_sparse_map_rejects_bad_entries(entries):
    with pytest.raises(ValueError):
        SparseDepthMap.from_entries(6, 4, entries)


def test_frame_set_checks_sizes():
    img = np.zeros((4, 5), dtype=np.uint8)
    with pytest.raises(ValueError):
        CalibratedFrameSet(img, img, img, np.zeros((4, 6), np.uint8), SparseDepthMap(5, 4), SparseDepthMap(5, 4))
    with pytest.raises(ValueError):
        CalibratedFrameSet(img, img, img, img, SparseDepthMap(5, 4), SparseDepthMap(4, 4))


def test_luminance_weights():
    rgb = np.zeros((1, 3, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 0)
    rgb[0, 1] = (0, 255, 0)
    rgb[0, 2] = (0, 0, 255)
    assert np.allclose(to_luminance(rgb)[0], [0.299 * 255, 0.587 * 255, 0.114 * 255])
    gray = np.arange(6, dtype=np.uint8).reshape(2, 3)
    assert np.array_equal(to_luminance(gray), gray.astype(float))
