import struct

import numpy as np
import pytest

from activenerf.image_io import read_png, read_raw, write_png, write_raw, write_variance_map


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(7, 5, 3))
    write_png(tmp_path / "a.png", img)
    back = read_png(tmp_path / "a.png")
    assert back.shape == (7, 5, 3)
    np.testing.assert_allclose(back, img, atol=0.5 / 255 + 1e-12)


def test_raw_header_and_round_trip(tmp_path):
    img = np.random.default_rng(1).uniform(size=(3, 4, 2)).astype(np.float32)
    write_raw(tmp_path / "a.raw", img)
    data = (tmp_path / "a.raw").read_bytes()
    assert data[:4] == b"ANRW"
    assert struct.unpack_from("<III", data, 4) == (4, 3, 2)
    np.testing.assert_array_equal(read_raw(tmp_path / "a.raw"), img)


def test_raw_rejects_bad_files(tmp_path):
    (tmp_path / "x.raw").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        read_raw(tmp_path / "x.raw")


def test_variance_map_sidecar(tmp_path):
    var = np.array([[0.5, 1.0], [2.0, 4.5]])
    lo, hi = write_variance_map(tmp_path / "v", var)
    assert (lo, hi) == (0.5, 4.5)
    assert (tmp_path / "v.txt").read_text() == "min 0.5\nmax 4.5\n"
    np.testing.assert_allclose(read_raw(tmp_path / "v.raw")[..., 0], var)
    png = read_png(tmp_path / "v.png")
    np.testing.assert_allclose(png[..., 0], (var - 0.5) / 4.0, atol=0.5 / 255 + 1e-12)
