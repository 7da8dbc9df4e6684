import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpdg.image_core import (
    PPMHeaderError,
    PPMMaxvalError,
    PPMTruncatedError,
    decode_ppm,
    encode_ppm,
    load_mask_ppms,
    load_ppm,
    quantize,
    resize_bilinear,
    save_mask_ppms,
    save_ppm,
)


def ppm_bytes(w, h, payload, maxval=255):
    return b"P6\n%d %d\n%d\n" % (w, h, maxval) + bytes(payload)


def test_load_white_and_black(tmp_path):
    p = tmp_path / "w.ppm"
    p.write_bytes(ppm_bytes(1, 1, [255, 255, 255]))
    assert load_ppm(p).tolist() == [[[1.0, 1.0, 1.0]]]
    p.write_bytes(ppm_bytes(1, 1, [0, 0, 0]))
    assert load_ppm(p).tolist() == [[[0.0, 0.0, 0.0]]]


def test_load_exact_rationals():
    img = decode_ppm(ppm_bytes(2, 1, [128, 64, 32, 10, 20, 30]))
    assert img.shape == (1, 2, 3)
    expected = np.array([[[128, 64, 32], [10, 20, 30]]]) / 255
    assert np.array_equal(img, expected)


def test_header_comments_are_skipped():
    buf = b"P6\n# made by hand\n1 1\n255\n" + bytes([1, 2, 3])
    assert np.array_equal(decode_ppm(buf)[0, 0] * 255, [1, 2, 3])


@pytest.mark.parametrize(
    "buf, exc",
    [
        (b"P3\n1 1\n255\n\x00\x00\x00", PPMHeaderError),
        (b"P6\n1 x\n255\n\x00\x00\x00", PPMHeaderError),
        (b"P6\n1 1\n65535\n\x00\x00\x00", PPMMaxvalError),
        (b"P6\n2 2\n255\n\x00\x00\x00", PPMTruncatedError),
        (b"P6\n1", PPMHeaderError),
    ],
)
def test_malformed_inputs(buf, exc):
    with pytest.raises(exc):
        decode_ppm(buf)


def test_save_quantization(tmp_path):
    img = np.array([[[1.0, 0.5, -0.2]]])
    p = tmp_path / "q.ppm"
    save_ppm(img, p)
    assert p.read_bytes()[-3:] == bytes([255, 128, 0])


def test_quantize_round_half_up():
    assert quantize(np.array([0.5, 1.5 / 255, 2.5 / 255])).tolist() == [128, 2, 3]


def test_round_trip_on_grid_is_exact():
    grid = np.arange(256) / 255.0
    img = np.stack([grid, grid[::-1], grid], axis=-1)[None]
    assert np.array_equal(decode_ppm(encode_ppm(img)), img)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_error_bound(seed):
    img = np.random.default_rng(seed).random((3, 5, 3))
    back = decode_ppm(encode_ppm(img))
    assert np.max(np.abs(back - img)) <= 1 / 510 + 1e-15


def test_mask_ppm_round_trip(tmp_path):
    mask = (np.random.default_rng(0).random((4, 6, 3)) > 0.5).astype(float)
    save_mask_ppms(mask, tmp_path / "m")
    assert np.array_equal(load_mask_ppms(tmp_path / "m"), mask)


def test_resize_constant_and_identity():
    img = np.full((5, 7, 3), 0.3)
    assert np.allclose(resize_bilinear(img, 11, 2), 0.3)
    rnd = np.random.default_rng(1).random((6, 4, 3))
    assert np.array_equal(resize_bilinear(rnd, 6, 4), rnd)


def test_resize_checkerboard_centre():
    board = np.array([[0.0, 1.0], [1.0, 0.0]])[:, :, None]
    out = resize_bilinear(board, 3, 3)
    assert out[1, 1, 0] == pytest.approx(0.5)


def test_resize_range_preserved():
    rnd = np.random.default_rng(2).random((9, 5, 3))
    out = resize_bilinear(rnd, 13, 17)
    assert out.min() >= rnd.min() - 1e-15 and out.max() <= rnd.max() + 1e-15


def test_resize_zero_dimension():
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((2, 2, 3)), 0, 3)
