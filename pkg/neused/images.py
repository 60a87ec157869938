"""Image files: 8-bit PNG through Pillow and little-endian float PFM."""

from __future__ import annotations

import pathlib
from typing import List

import numpy as np
from PIL import Image

from .errors import DatasetError


def to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path: str | pathlib.Path, img: np.ndarray) -> None:
    """Write an H x W x 3 (or H x W) float image in [0, 1]."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_png(path: str | pathlib.Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise DatasetError(f"{path}: unreadable image: {e}") from e
    return arr / 255.0


def write_pfm(path: str | pathlib.Path, img: np.ndarray) -> None:
    """Colour PFM, little-endian float32, rows stored bottom to top."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    h, w = img.shape[:2]
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def read_pfm(path: str | pathlib.Path) -> np.ndarray:
    try:
        with pathlib.Path(path).open("rb") as f:
            header = f.readline().strip()
            if header not in (b"PF", b"Pf"):
                raise DatasetError(f"{path}: not a PFM file")
            channels = 3 if header == b"PF" else 1
            w, h = (int(v) for v in f.readline().split())
            scale = float(f.readline().strip())
            data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
    except (OSError, ValueError) as e:
        raise DatasetError(f"{path}: unreadable PFM: {e}") from e
    if data.size != w * h * channels:
        raise DatasetError(f"{path}: PFM payload has {data.size} values, expected {w * h * channels}")
    img = data.reshape(h, w, channels)[::-1].astype(np.float64)
    return np.repeat(img, 3, axis=-1) if channels == 1 else img


def read_image(path: str | pathlib.Path) -> np.ndarray:
    return read_pfm(path) if pathlib.Path(path).suffix.lower() == ".pfm" else read_png(path)


def write_image(path: str | pathlib.Path, img: np.ndarray) -> None:
    if pathlib.Path(path).suffix.lower() == ".pfm":
        write_pfm(path, img)
    else:
        write_png(path, img)


def contact_sheet(rows: List[List[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Tile equally sized H x W x 3 images into a grid with white padding."""
    h, w = rows[0][0].shape[:2]
    n_cols = max(len(r) for r in rows)
    sheet = np.ones((len(rows) * (h + pad) + pad, n_cols * (w + pad) + pad, 3))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            sheet[y : y + h, x : x + w] = img
    return sheet
