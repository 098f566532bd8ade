import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarflow.features import (
    DESCRIPTOR_DIM,
    DescriptorField,
    PatchSpec,
    compute_dense_descriptors,
    patch_match_cost,
)


def _texture(rng, h=40, w=48):
    img = cv2.GaussianBlur(rng.uniform(0, 255, (h, w)), (0, 0), 1.5)
    return np.clip(img, 0, 255).astype(np.uint8)


def _cost_oracle(A, B, pa, pb, r):
    h, w, _ = A.shape
    xb, yb = int(np.floor(pb[0] + 0.5)), int(np.floor(pb[1] + 0.5))
    total = 0.0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            a = A[min(max(pa[1] + dy, 0), h - 1), min(max(pa[0] + dx, 0), w - 1)].astype(np.float64)
            b = B[min(max(yb + dy, 0), h - 1), min(max(xb + dx, 0), w - 1)].astype(np.float64)
            total += np.sqrt(np.sum((a - b) ** 2))
    return total


def test_descriptor_shape_and_dtype(rng):
    d = compute_dense_descriptors(_texture(rng))
    assert d.data.shape == (40, 48, DESCRIPTOR_DIM) and d.data.dtype == np.uint8 and d.dim == 128


def test_constant_image_gives_identical_descriptors():
    d = compute_dense_descriptors(np.full((12, 15), 77, np.uint8)).data
    assert (d == d[0, 0]).all()


def test_shift_moves_interior_descriptors(rng):
    img = _texture(rng, 40, 60)
    shifted = np.zeros_like(img)
    shifted[:, 3:] = img[:, :-3]
    a = compute_dense_descriptors(img).data
    b = compute_dense_descriptors(shifted).data
    # away from the left border, where the shift introduced new content
    assert np.array_equal(b[6:-6, 12:-6], a[6:-6, 9:-9])


def test_rgb_input_accepted(rng):
    gray = _texture(rng)
    d1 = compute_dense_descriptors(gray).data
    d2 = compute_dense_descriptors(np.repeat(gray[..., None], 3, axis=2)).data
    assert np.abs(d1.astype(int) - d2.astype(int)).max() <= 1


def test_identical_positions_cost_zero(rng):
    d = compute_dense_descriptors(_texture(rng))
    assert patch_match_cost(d, d, (10, 10), (10, 10)) == 0.0


def test_radius_zero_is_single_norm(rng):
    d = compute_dense_descriptors(_texture(rng))
    a = d.data[5, 7].astype(float)
    b = d.data[9, 20].astype(float)
    assert patch_match_cost(d, d, (7, 5), (20, 9), PatchSpec(0)) == pytest.approx(np.linalg.norm(a - b), rel=1e-6)


def test_subpixel_target_rounds_half_up(rng):
    d = compute_dense_descriptors(_texture(rng))
    assert patch_match_cost(d, d, (10, 10), (10.5, 9.5)) == patch_match_cost(d, d, (10, 10), (11, 10))


def test_out_of_image_reference_rejected(rng):
    d = compute_dense_descriptors(_texture(rng))
    with pytest.raises(IndexError):
        patch_match_cost(d, d, (48, 0), (0, 0))


def test_descriptor_field_validation():
    with pytest.raises(ValueError):
        DescriptorField(np.zeros((3, 3, 8), np.float32))
    with pytest.raises(ValueError):
        PatchSpec(-1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_cost_matches_direct_summation(seed):
    rng = np.random.default_rng(seed)
    A = DescriptorField(rng.integers(0, 256, (9, 11, 128), dtype=np.uint8))
    B = DescriptorField(rng.integers(0, 256, (9, 11, 128), dtype=np.uint8))
    pa = (int(rng.integers(0, 11)), int(rng.integers(0, 9)))
    pb = tuple(rng.uniform(-4, 14, 2))
    r = int(rng.integers(0, 4))
    got = patch_match_cost(A, B, pa, pb, PatchSpec(r))
    want = _cost_oracle(A.data, B.data, pa, pb, r)
    assert got == pytest.approx(want, rel=1e-9)
    assert got >= 0
    # symmetric when both positions are integers
    pbi = (int(np.floor(pb[0] + 0.5)), int(np.floor(pb[1] + 0.5)))
    if 0 <= pbi[0] < 11 and 0 <= pbi[1] < 9:
        assert patch_match_cost(B, A, pbi, pa, PatchSpec(r)) == pytest.approx(got, rel=1e-12)


def test_descriptors_deterministic(rng):
    img = _texture(rng)
    assert np.array_equal(compute_dense_descriptors(img).data, compute_dense_descriptors(img).data)
