import hashlib
import math

import cv2
import numpy as np
import png
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays
from skimage.metrics import structural_similarity

from irlsrecon import fixtures
from irlsrecon.tensors_io import (ImageMeta, TensorFormatError, psnr, quantize, read_image,
                                  read_tensor, ssim, write_image, write_tensor)


def _write_png(path, rows, bitdepth, greyscale=True):
    rows = np.asarray(rows)
    w = rows.shape[1] if greyscale else rows.shape[1] // 3
    png.Writer(width=w, height=rows.shape[0], greyscale=greyscale, bitdepth=bitdepth).write(
        open(path, "wb"), rows.tolist())


def test_read_image_8bit_endpoints(tmp_path):
    path = tmp_path / "e.png"
    _write_png(path, [[0, 255], [255, 0]], 8)
    img = read_image(path)
    assert img.shape == (1, 2, 2)
    assert img[0, 0, 0] == 0.0 and img[0, 0, 1] == 1.0


def test_read_image_16bit_midpoint(tmp_path):
    path = tmp_path / "m.png"
    _write_png(path, [[32768, 0]], 16)
    assert read_image(path)[0, 0, 0] == 32768 / 65535


def test_read_image_16bit_matches_independent_decoder():
    path = fixtures.data_path("gray32_16bit.png")
    ours = read_image(path)[0]
    theirs = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    assert theirs.dtype == np.uint16
    np.testing.assert_array_equal(ours, theirs / 65535.0)


def test_read_image_rgb_channel_order(tmp_path):
    path = tmp_path / "rgb.png"
    _write_png(path, [[255, 0, 0, 0, 0, 255]], 8, greyscale=False)
    img = read_image(path)
    assert img.shape == (3, 1, 2)
    np.testing.assert_array_equal(img[:, 0, 0], [1, 0, 0])
    np.testing.assert_array_equal(img[:, 0, 1], [0, 0, 1])


def test_read_image_missing_file(tmp_path):
    with pytest.raises(OSError):
        read_image(tmp_path / "nope.png")


def test_write_zero_image_is_black(tmp_path):
    path = tmp_path / "z.png"
    write_image(np.zeros((1, 3, 4)), path)
    assert np.all(read_image(path) == 0)


def test_write_half_rounds_up():
    assert quantize(np.array([0.5]), 8)[0] == 128
    assert quantize(np.array([0.5]), 16)[0] == 32768


def test_write_clamps_out_of_range(tmp_path):
    path = tmp_path / "c.png"
    write_image(np.array([[[-0.3, 1.7]]]), path)
    np.testing.assert_array_equal(read_image(path), [[[0.0, 1.0]]])


@pytest.mark.parametrize("bit_depth", [8, 16])
@pytest.mark.parametrize("channels", [1, 3])
def test_image_round_trip_on_quantized_tensor(tmp_path, rng, bit_depth, channels):
    maxval = (1 << bit_depth) - 1
    t = rng.integers(0, maxval + 1, size=(channels, 5, 7)) / maxval
    path = tmp_path / "r.png"
    write_image(t, path, ImageMeta(bit_depth, channels))
    np.testing.assert_array_equal(read_image(path), t)


def test_image_meta_validation():
    with pytest.raises(ValueError):
        ImageMeta(12, 1)
    with pytest.raises(ValueError):
        ImageMeta(8, 2)


def test_scalar_tensor_size_matches_layout(tmp_path):
    # magic + rank + payload; the rank-0 header has no extents
    path = tmp_path / "s.ltsr"
    write_tensor(3.5, path)
    assert path.stat().st_size == 16
    back = read_tensor(path)
    assert back.shape == () and back == 3.5


def test_identity_round_trip(tmp_path):
    path = tmp_path / "i.ltsr"
    write_tensor(np.eye(2), path)
    np.testing.assert_array_equal(read_tensor(path), np.eye(2))


def test_tensor_bytes_deterministic(tmp_path, rng):
    k = rng.standard_normal((3, 5, 5))
    a, b = tmp_path / "a.ltsr", tmp_path / "b.ltsr"
    write_tensor(k, a)
    write_tensor(k, b)
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()


@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_tensor_round_trip_property(tmp_path_factory, t):
    path = tmp_path_factory.mktemp("t") / "x.ltsr"
    write_tensor(t, path)
    back = read_tensor(path)
    assert back.shape == t.shape
    np.testing.assert_array_equal(back, t)


@pytest.mark.parametrize("blob", [
    b"XXXX" + bytes(4),
    b"LTSR" + (1).to_bytes(4, "little") + (3).to_bytes(8, "little") + bytes(8),
    b"LTSR" + (1).to_bytes(4, "little") + (2 ** 62).to_bytes(8, "little"),
    b"LTSR" + (99).to_bytes(4, "little"),
    b"LTSR" + (1).to_bytes(4, "little") + (1).to_bytes(8, "little") + np.float64(np.nan).tobytes(),
])
def test_malformed_tensor_files_rejected(tmp_path, blob):
    path = tmp_path / "bad.ltsr"
    path.write_bytes(blob)
    with pytest.raises(TensorFormatError):
        read_tensor(path)


def test_psnr_identical_is_infinite():
    x = np.ones((1, 4, 4)) * 0.3
    assert psnr(x, x) == math.inf


def test_psnr_analytic():
    ref = np.zeros((1, 10, 10))
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-12)


def test_psnr_matches_scalar_loop(rng):
    x, ref = rng.random((2, 3, 6, 5))
    total = 0.0
    for a, b in zip(x.ravel().tolist(), ref.ravel().tolist()):
        total += (a - b) ** 2
    expected = 10 * math.log10(1.0 / (total / x.size))
    assert abs(psnr(x, ref) - expected) <= 1e-12


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


def test_ssim_identical_and_constant():
    x = np.random.default_rng(0).random((1, 16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    c = np.full((1, 16, 16), 0.4)
    assert ssim(c, c) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("image", ["gray", "color"])
def test_ssim_matches_reference_implementation(image):
    ref = fixtures.gray32() if image == "gray" else fixtures.color32()
    noisy = np.clip(ref + 0.05 * np.random.default_rng(3).standard_normal(ref.shape), 0, 1)
    theirs = structural_similarity(noisy, ref, channel_axis=0, gaussian_weights=True, sigma=1.5,
                                   use_sample_covariance=False, data_range=1.0)
    assert abs(ssim(noisy, ref) - theirs) <= 1e-6


def test_ssim_too_small_image():
    with pytest.raises(ValueError):
        ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


def test_psnr_decreases_with_noise_level():
    ref = fixtures.gray32()
    noise = np.random.default_rng(5).standard_normal(ref.shape)
    values = [psnr(ref + s * noise, ref) for s in np.linspace(0.01, 0.3, 10)]
    assert all(a > b for a, b in zip(values, values[1:]))


@given(st.integers(0, 2 ** 32 - 1))
def test_ssim_symmetric_and_below_one_when_different(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((2, 1, 12, 12))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, b) < 1 - 1e-12
