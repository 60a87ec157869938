from __future__ import annotations

import numpy as np
import pytest

from neused.errors import DatasetError
from neused.images import contact_sheet, read_image, read_pfm, read_png, to_uint8, write_image, write_pfm


def _gradient_image(h=5, w=7):
    y, x = np.mgrid[0:h, 0:w]
    return np.stack([x / (w - 1), y / (h - 1), np.full((h, w), 0.25)], axis=-1)


def test_png_round_trip_quantises_to_8_bits(tmp_path):
    img = _gradient_image()
    write_image(tmp_path / "a.png", img)
    back = read_image(tmp_path / "a.png")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_pfm_round_trip_keeps_floats_and_row_order(tmp_path):
    img = _gradient_image().astype(np.float32)
    write_image(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"PF\n7 5\n-1.0\n")
    back = read_image(tmp_path / "a.pfm")
    assert np.array_equal(back, img.astype(np.float64))
    # first stored row is the bottom image row
    first = np.frombuffer(raw[len(b"PF\n7 5\n-1.0\n"):][: 7 * 3 * 4], dtype="<f4").reshape(7, 3)
    assert np.array_equal(first, img[-1])


def test_grayscale_pfm_is_replicated(tmp_path):
    write_pfm(tmp_path / "g.pfm", np.full((2, 3), 0.5))
    assert read_pfm(tmp_path / "g.pfm").shape == (2, 3, 3)


def test_bad_files_raise_dataset_errors(tmp_path):
    (tmp_path / "bad.pfm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(DatasetError):
        read_pfm(tmp_path / "bad.pfm")
    (tmp_path / "short.pfm").write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 8)
    with pytest.raises(DatasetError):
        read_pfm(tmp_path / "short.pfm")
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError):
        read_png(tmp_path / "bad.png")


def test_to_uint8_clips_and_rounds():
    assert to_uint8(np.array([-1.0, 0.0, 0.5, 1.0, 2.0])).tolist() == [0, 0, 128, 255, 255]


def test_contact_sheet_layout():
    a = np.zeros((4, 6, 3))
    sheet = contact_sheet([[a, a, a], [a]], pad=2)
    assert sheet.shape == (2 * 6 + 2, 3 * 8 + 2, 3)
    assert sheet[0, 0, 0] == 1.0 and sheet[2, 2, 0] == 0.0
    # missing cells in short rows stay white
    assert sheet[8, 10, 0] == 1.0
