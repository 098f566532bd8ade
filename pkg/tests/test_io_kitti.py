import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarflow.core import SparseDepthMap
from lidarflow.io_kitti import (
    DisparityImage,
    FlowImage,
    KittiFormatError,
    decode_disparity,
    decode_flow,
    dewarp_future_depth,
    encode_disparity,
    encode_flow,
    extract_sparse_measurements,
    read_disparity,
    read_flow,
    read_image,
    read_sparse,
    sparsify_depth,
    write_disparity,
    write_flow,
    write_image,
    write_sparse,
)


def _png(raw: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", raw)
    assert ok
    return buf.tobytes()


def _flow_raw(r, g, b):
    # OpenCV stores channels as B, G, R
    return np.stack([b, g, r], axis=-1).astype(np.uint16)


def test_disparity_raw_value_scaling():
    raw = np.array([[12800, 0]], dtype=np.uint16)
    img = decode_disparity(_png(raw))
    assert img.values[0, 0] == 50.0 and img.valid[0, 0]
    assert not img.valid[0, 1]


def test_flow_zero_code_point_and_unit_step():
    r = np.array([[2 ** 15, 2 ** 15 + 64]])
    g = np.array([[2 ** 15, 2 ** 15]])
    b = np.array([[1, 1]])
    img = decode_flow(_png(_flow_raw(r, g, b)))
    assert (img.u[0, 0], img.v[0, 0]) == (0.0, 0.0) and img.valid[0, 0]
    assert img.u[0, 1] == 1.0


def test_flow_validity_flag():
    img = decode_flow(_png(_flow_raw(np.full((1, 2), 2 ** 15), np.full((1, 2), 2 ** 15), np.array([[0, 1]]))))
    assert img.valid.tolist() == [[False, True]]


def test_codec_rejects_wrong_layout():
    with pytest.raises(KittiFormatError):
        decode_disparity(_png(np.zeros((2, 2), dtype=np.uint8)))
    with pytest.raises(KittiFormatError):
        decode_flow(_png(np.zeros((2, 2), dtype=np.uint16)))
    with pytest.raises(KittiFormatError):
        decode_disparity(b"not a png")


def test_full_range_files_round_trip_byte_identically(rng):
    raw = rng.integers(0, 65536, size=(37, 53), dtype=np.uint16)
    raw[0, :4] = [0, 1, 65534, 65535]
    data = _png(raw)
    assert encode_disparity(decode_disparity(data)) == data
    r = rng.integers(0, 65536, size=(29, 41))
    g = rng.integers(0, 65536, size=(29, 41))
    b = rng.integers(0, 2, size=(29, 41))
    r[0, :2], g[0, :2], b[0, :2] = [0, 65535], [65535, 0], [1, 1]
    r[b == 0] = 0
    g[b == 0] = 0
    data = _png(_flow_raw(r, g, b))
    assert encode_flow(decode_flow(data)) == data


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_codecs_preserve_raw_pixels(seed):
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 65536, size=(5, 7), dtype=np.uint16)
    out = cv2.imdecode(np.frombuffer(encode_disparity(decode_disparity(_png(raw))), np.uint8), cv2.IMREAD_UNCHANGED)
    assert np.array_equal(out, raw)
    fr = _flow_raw(rng.integers(0, 65536, (5, 7)), rng.integers(0, 65536, (5, 7)), np.ones((5, 7)))
    out = cv2.imdecode(np.frombuffer(encode_flow(decode_flow(_png(fr))), np.uint8), cv2.IMREAD_UNCHANGED)
    assert np.array_equal(out, fr)


def test_tiny_valid_disparity_stays_valid():
    img = DisparityImage(np.array([[1e-4, 3.0]]), np.array([[True, True]]))
    back = decode_disparity(encode_disparity(img))
    assert back.valid.all() and back.values[0, 0] == 1 / 256


def test_file_helpers_round_trip(tmp_path, rng):
    d = DisparityImage.from_array(np.round(rng.uniform(-5, 80, (6, 9)) * 256) / 256)
    write_disparity(tmp_path / "d.png", d)
    back = read_disparity(tmp_path / "d.png")
    assert np.array_equal(back.valid, d.valid) and np.array_equal(back.values, d.values)
    f = FlowImage(np.round(rng.uniform(-100, 100, (6, 9)) * 64) / 64, np.round(rng.uniform(-100, 100, (6, 9)) * 64) / 64,
                  rng.random((6, 9)) > 0.3)
    write_flow(tmp_path / "f.png", f)
    back = read_flow(tmp_path / "f.png")
    assert np.array_equal(back.u, f.u) and np.array_equal(back.v, f.v) and np.array_equal(back.valid, f.valid)
    sparse = SparseDepthMap.from_entries(9, 6, [(1, 1, 12.5), (8, 5, 3.25)])
    write_sparse(tmp_path / "s.png", sparse)
    assert read_sparse(tmp_path / "s.png").entries() == sparse.entries()
    rgb = rng.integers(0, 256, (6, 9, 3), dtype=np.uint8)
    write_image(tmp_path / "i.png", rgb)
    assert np.array_equal(read_image(tmp_path / "i.png"), rgb)
    with pytest.raises(FileNotFoundError):
        read_image(tmp_path / "missing.png")


def test_extract_counts_valid_pixels():
    v = np.zeros((4, 4))
    v[0, 1], v[2, 2], v[3, 0] = 5.0, 6.0, 7.0
    m = extract_sparse_measurements(DisparityImage.from_array(v))
    assert len(m) == 3 and m.entries() == [(1, 0, 5.0), (2, 2, 6.0), (0, 3, 7.0)]
    assert len(extract_sparse_measurements(DisparityImage.from_array(np.zeros((3, 3))))) == 0


def _sparsify_oracle(values, valid, win):
    h, w = values.shape
    out = []
    for cy in range(0, h, win):
        for cx in range(0, w, win):
            best = None
            for y in range(cy, min(cy + win, h)):
                for x in range(cx, min(cx + win, w)):
                    if valid[y, x]:
                        d2 = (y - cy - win // 2) ** 2 + (x - cx - win // 2) ** 2
                        if best is None or d2 < best[0]:
                            best = (d2, x, y)
            if best is not None:
                out.append((best[1], best[2], values[best[2], best[1]]))
    return sorted(out, key=lambda e: (e[1], e[0]))


def test_sparsify_keeps_pixel_nearest_cell_center():
    v = np.zeros((5, 5))
    v[0, 0] = 4.0  # offset (0, 0)
    v[3, 2] = 9.0  # offset (2, 3): distance 1 from the center (2, 2)
    m = sparsify_depth(DisparityImage.from_array(v), 5)
    assert m.entries() == [(2, 3, 9.0)]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([3, 5, 7]))
def test_sparsify_matches_rule_oracle(seed, win):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 30, size=2)
    values = rng.uniform(1, 90, (h, w))
    valid = rng.random((h, w)) < rng.uniform(0, 1)
    m = sparsify_depth(DisparityImage(values, valid), win)
    assert m.entries() == [(int(x), int(y), float(d)) for x, y, d in _sparsify_oracle(values, valid, win)]
    assert len(m) <= -(-h // win) * -(-w // win)
    for x, y, d in m.entries():
        assert valid[y, x] and values[y, x] == d


def test_sparsify_rejects_even_window():
    with pytest.raises(ValueError):
        sparsify_depth(DisparityImage.from_array(np.ones((4, 4))), 4)


def _flow(h, w, entries):
    u, v, valid = np.zeros((h, w)), np.zeros((h, w)), np.zeros((h, w), bool)
    for x, y, fu, fv in entries:
        u[y, x], v[y, x], valid[y, x] = fu, fv, True
    return FlowImage(u, v, valid)


def test_dewarp_moves_measurement_along_flow():
    d = np.zeros((20, 20))
    d[10, 10] = 20.0
    out = dewarp_future_depth(DisparityImage.from_array(d), _flow(20, 20, [(10, 10, 5.0, 0.0)]))
    assert out.values[10, 15] == 20.0 and np.count_nonzero(out.valid) == 1


def test_dewarp_collision_keeps_nearer_surface():
    d = np.zeros((20, 20))
    d[10, 10], d[10, 12] = 20.0, 35.0
    out = dewarp_future_depth(DisparityImage.from_array(d), _flow(20, 20, [(10, 10, 5.0, 0.0), (12, 10, 3.0, 0.0)]))
    assert out.values[10, 15] == 35.0 and np.count_nonzero(out.valid) == 1


def test_dewarp_ignores_invalid_flow():
    d = np.zeros((8, 8))
    d[3, 3] = 9.0
    out = dewarp_future_depth(DisparityImage.from_array(d), _flow(8, 8, []))
    assert not out.valid.any()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dewarp_matches_rule_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 25, size=2)
    values = rng.uniform(1, 60, (h, w))
    valid = rng.random((h, w)) < 0.4
    flow = FlowImage(rng.uniform(-6, 6, (h, w)), rng.uniform(-6, 6, (h, w)), rng.random((h, w)) < 0.8)
    out = dewarp_future_depth(DisparityImage(values, valid), flow)
    expect = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if valid[y, x] and flow.valid[y, x]:
                tx = int(np.floor(x + flow.u[y, x] + 0.5))
                ty = int(np.floor(y + flow.v[y, x] + 0.5))
                if 0 <= tx < w and 0 <= ty < h:
                    expect[ty, tx] = max(expect[ty, tx], values[y, x])
    assert np.array_equal(out.values, expect)
    assert np.count_nonzero(out.valid) <= np.count_nonzero(valid)
