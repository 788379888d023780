from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays, array_shapes

from ufafuse import imageio as io
from ufafuse.imageio import ImageFormatError

FIXTURES = Path(__file__).parent / "fixtures"
MALFORMED = sorted(FIXTURES.glob("malformed_*"))
TINY = np.array([[[255, 0, 0], [0, 255, 0]], [[0, 0, 255], [10, 20, 30]]], np.uint8)


def test_tiny_fixture_decodes():
    np.testing.assert_array_equal(io.read_image(FIXTURES / "tiny_2x2.ppm"), TINY)


def test_header_comments_are_skipped():
    np.testing.assert_array_equal(io.read_image(FIXTURES / "comment_2x2.ppm"), TINY)


def test_encode_matches_fixture_bytes():
    assert io.encode_pnm(TINY) == (FIXTURES / "tiny_2x2.ppm").read_bytes()


@pytest.mark.parametrize("path", MALFORMED, ids=lambda p: p.stem)
def test_malformed_files_raise_diagnostics(path):
    with pytest.raises(ImageFormatError) as err:
        io.read_image(path)
    assert str(path) in str(err.value)
    assert err.value.offset is not None


def test_truncation_reports_sizes():
    with pytest.raises(ImageFormatError, match="need 12 bytes, found 7"):
        io.decode_pnm((FIXTURES / "malformed_truncated.ppm").read_bytes())


def test_trailing_bytes_are_ignored():
    img = io.decode_pnm((FIXTURES / "tiny_2x2.ppm").read_bytes() + b"junk")
    np.testing.assert_array_equal(img, TINY)


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=9)))
def test_gray_round_trip(img):
    np.testing.assert_array_equal(io.decode_pnm(io.encode_pnm(img)), img)


def test_file_round_trip(rng, tmp_path):
    rgb = rng.integers(0, 256, (7, 5, 3), dtype=np.uint8)
    io.write_image(rgb, tmp_path / "x.ppm")
    io.write_image(rgb[..., 1], tmp_path / "x.pgm")
    np.testing.assert_array_equal(io.read_image(tmp_path / "x.ppm"), rgb)
    np.testing.assert_array_equal(io.read_image(tmp_path / "x.pgm"), rgb[..., 1])
    assert io.read_image(tmp_path / "x.pgm", "rgb").shape == (7, 5, 3)


def test_encode_rejects_bad_arrays():
    with pytest.raises(TypeError):
        io.encode_pnm(np.zeros((2, 2), np.float32))
    with pytest.raises(ValueError):
        io.encode_pnm(np.zeros((2, 2, 4), np.uint8))
    single = io.encode_pnm(np.zeros((2, 2, 1), np.uint8))
    assert single.startswith(b"P5")


def test_gray_mode_uses_rounded_luma():
    img = io.read_image(FIXTURES / "tiny_2x2.ppm", mode="gray")
    expected = np.rint(np.array([[0.299, 0.587], [0.114, 0.299 * 10 + 0.587 * 20 + 0.114 * 30 / 255]]) * 255)
    assert img[0, 0] == expected[0, 0] and img[0, 1] == expected[0, 1] and img[1, 0] == expected[1, 0]
    assert img[1, 1] == 18
    with pytest.raises(ValueError):
        io.read_image(FIXTURES / "tiny_2x2.ppm", mode="cmyk")


def test_unit_conversion_round_trip(rng):
    img = rng.integers(0, 256, (4, 6, 3), dtype=np.uint8)
    unit = io.to_unit(img)
    assert unit.shape == (1, 3, 4, 6) and unit.dtype == np.float32
    np.testing.assert_array_equal(io.from_unit(unit), img)
    np.testing.assert_array_equal(io.from_unit(np.array([[[-0.2]], [[0.5]], [[1.7]]])), [[[0, 128, 255]]])


def test_png_round_trip(rng, tmp_path):
    pytest.importorskip("PIL")
    img = rng.integers(0, 256, (5, 4, 3), dtype=np.uint8)
    io.write_image(img, tmp_path / "x.png")
    np.testing.assert_array_equal(io.read_image(tmp_path / "x.png"), img)
