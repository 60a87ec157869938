"""Calibrated multi-view datasets: loading, writing and self-rendered oracle fixtures.

Two on-disk layouts are understood:

``blender_transforms``
    ``transforms.json`` with ``camera_angle_x`` (or ``fl_x``/``fl_y``/``cx``/``cy``)
    and ``frames`` holding ``file_path`` and a 4x4 camera-to-world
    ``transform_matrix``.

``pose_txt``
    ``poses.txt`` whose first line is ``fx fy cx cy`` followed by one row-major
    3x4 camera-to-world matrix (12 floats) per line, and an ``images/``
    directory whose files, sorted by name, match the pose lines one to one.
"""

from __future__ import annotations

import json
import logging
import pathlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .cameras import Camera, Intrinsics, check_rigid, look_at, orbit_positions
from .config import RenderConfig
from .errors import ConfigError, CountMismatchError, DatasetError, MissingFilesError
from .images import read_image, write_image
from .rendering import AnalyticForeground, Background, ConstantBackground, render_camera, to_image
from .scenes import AnalyticSDF, sphere


logger = logging.getLogger(__name__)

FORMATS = ("blender_transforms", "pose_txt")
IMAGE_SUFFIXES = (".png", ".pfm", ".jpg", ".jpeg")


@dataclass
class CalibratedDataset:
    images: List[np.ndarray]  # H x W x 3 in [0, 1]
    cameras: List[Camera]
    names: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.images) != len(self.cameras):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.cameras)} poses")
        for i, cam in enumerate(self.cameras):
            check_rigid(cam.pose, what=f"camera {i}")
            h, w = self.images[i].shape[:2]
            if (w, h) != (cam.intrinsics.width, cam.intrinsics.height):
                raise CountMismatchError(f"image {i} is {w}x{h}, intrinsics say {cam.intrinsics.width}x{cam.intrinsics.height}")
        if not self.names:
            self.names = [f"r_{i}" for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)

    def split(self, holdout: Sequence[int]) -> Tuple["CalibratedDataset", "CalibratedDataset"]:
        held = set(int(i) for i in holdout)
        if any(i < 0 or i >= len(self) for i in held):
            raise ConfigError(f"holdout indices {sorted(held)} outside [0, {len(self)})")
        train = [i for i in range(len(self)) if i not in held]
        if not train:
            raise ConfigError("holdout leaves no training views")

        def subset(idx):
            return CalibratedDataset([self.images[i] for i in idx], [self.cameras[i] for i in idx], [self.names[i] for i in idx])

        return subset(train), subset(sorted(held))


# -- loading ------------------------------------------------------------------


def _find_image(root: pathlib.Path, file_path: str) -> pathlib.Path:
    p = (root / file_path).resolve()
    if p.suffix.lower() in IMAGE_SUFFIXES and p.exists():
        return p
    for suffix in IMAGE_SUFFIXES:
        cand = p.with_name(p.name + suffix)
        if cand.exists():
            return cand
    raise MissingFilesError(f"image for frame {file_path!r} not found under {root}")


def _load_blender(root: pathlib.Path) -> CalibratedDataset:
    meta_path = root / "transforms.json"
    if not meta_path.exists():
        raise MissingFilesError(f"{meta_path} not found")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        frames = meta["frames"]
    except (ValueError, KeyError) as e:
        raise DatasetError(f"{meta_path}: malformed transforms file: {e}") from e

    images, cameras, names = [], [], []
    for i, frame in enumerate(frames):
        try:
            img_path = _find_image(root, frame["file_path"])
            pose = check_rigid(np.asarray(frame["transform_matrix"], dtype=np.float64), what=f"frame {i}")
        except KeyError as e:
            raise DatasetError(f"{meta_path}: frame {i} lacks {e}") from e
        img = read_image(img_path)
        h, w = img.shape[:2]
        if "fl_x" in meta:
            intr = Intrinsics(
                float(meta["fl_x"]),
                float(meta.get("fl_y", meta["fl_x"])),
                float(meta.get("cx", w / 2.0)),
                float(meta.get("cy", h / 2.0)),
                w,
                h,
            )
        elif "camera_angle_x" in meta:
            intr = Intrinsics.from_fov(w, h, float(meta["camera_angle_x"]))
        else:
            raise DatasetError(f"{meta_path}: needs camera_angle_x or fl_x")
        images.append(img)
        cameras.append(Camera(intr, pose))
        names.append(img_path.stem)
    return CalibratedDataset(images, cameras, names)


def _load_pose_txt(root: pathlib.Path) -> CalibratedDataset:
    pose_path = root / "poses.txt"
    img_dir = root / "images"
    if not pose_path.exists():
        raise MissingFilesError(f"{pose_path} not found")
    if not img_dir.is_dir():
        raise MissingFilesError(f"{img_dir} not found")

    lines = [ln.split() for ln in pose_path.read_text(encoding="utf-8").splitlines() if ln.strip() and not ln.startswith("#")]
    try:
        fx, fy, cx, cy = (float(v) for v in lines[0])
        rows = [np.asarray([float(v) for v in ln], dtype=np.float64) for ln in lines[1:]]
    except (IndexError, ValueError) as e:
        raise DatasetError(f"{pose_path}: malformed header or pose line: {e}") from e
    if any(r.size != 12 for r in rows):
        raise DatasetError(f"{pose_path}: every pose line needs 12 values")

    files = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if len(files) != len(rows):
        raise CountMismatchError(f"{len(files)} images in {img_dir} but {len(rows)} poses in {pose_path}")

    images, cameras = [], []
    for i, (f, row) in enumerate(zip(files, rows)):
        img = read_image(f)
        h, w = img.shape[:2]
        images.append(img)
        cameras.append(Camera(Intrinsics(fx, fy, cx, cy, w, h), check_rigid(row.reshape(3, 4), what=f"pose line {i + 1}")))
    return CalibratedDataset(images, cameras, [f.stem for f in files])


def load_dataset(path: str | pathlib.Path, format: str = "blender_transforms") -> CalibratedDataset:
    root = pathlib.Path(path)
    if format not in FORMATS:
        raise ConfigError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    if not root.is_dir():
        raise MissingFilesError(f"dataset directory {root} not found")
    ds = _load_blender(root) if format == "blender_transforms" else _load_pose_txt(root)
    if len(ds) == 0:
        raise MissingFilesError(f"{root}: dataset has no views")
    logger.info("loaded %d views from %s (%s)", len(ds), root, format)
    return ds


# -- writing ------------------------------------------------------------------


def save_dataset(ds: CalibratedDataset, path: str | pathlib.Path, format: str = "blender_transforms", suffix: str = ".png") -> None:
    root = pathlib.Path(path)
    if format not in FORMATS:
        raise ConfigError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    (root / "images").mkdir(parents=True, exist_ok=True)
    names = [f"r_{i:03d}" for i in range(len(ds))]
    for name, img in zip(names, ds.images):
        write_image(root / "images" / f"{name}{suffix}", img)

    K = ds.cameras[0].intrinsics
    if format == "blender_transforms":
        meta = {
            "fl_x": K.fx,
            "fl_y": K.fy,
            "cx": K.cx,
            "cy": K.cy,
            "frames": [
                {"file_path": f"images/{name}", "transform_matrix": np.asarray(cam.pose).tolist()}
                for name, cam in zip(names, ds.cameras)
            ],
        }
        (root / "transforms.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    else:
        lines = [f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}"]
        lines += [" ".join(repr(float(v)) for v in np.asarray(cam.pose)[:3].reshape(-1)) for cam in ds.cameras]
        (root / "poses.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- oracle fixtures ------------------------------------------------------------


def orbit_cameras(n_views: int, size: int, radius: float = 3.0, fov_x: float = 0.7) -> List[Camera]:
    intr = Intrinsics.from_fov(size, size, fov_x)
    up = np.array([0.0, 0.0, 1.0])
    return [Camera(intr, look_at(p, np.zeros(3), up)) for p in orbit_positions(n_views, radius)]


@torch.no_grad()
def render_oracle_dataset(
    scene: AnalyticSDF,
    cameras: Sequence[Camera],
    color=(0.8, 0.4, 0.2),
    background: Optional[Background] = None,
    sharpness: float = 64.0,
    cfg: RenderConfig = RenderConfig(),
) -> CalibratedDataset:
    """Ground-truth views rendered by this engine from a closed-form scene."""
    fg = AnalyticForeground(scene, color, sharpness)
    bg = background or ConstantBackground()
    images = []
    for cam in cameras:
        out = render_camera(fg, bg, cam, cfg, dtype=torch.float64)
        images.append(to_image(out.rgb, cam.intrinsics.height, cam.intrinsics.width))
    return CalibratedDataset(images, list(cameras))


def sphere_fixture(n_views: int = 16, size: int = 64, radius: float = 0.5, cfg: RenderConfig = RenderConfig()) -> CalibratedDataset:
    return render_oracle_dataset(sphere(radius), orbit_cameras(n_views, size), cfg=cfg)


def write_sphere_fixture(
    path: str | pathlib.Path,
    n_views: int = 16,
    size: int = 64,
    radius: float = 0.5,
    format: str = "blender_transforms",
    suffix: str = ".png",
) -> CalibratedDataset:
    ds = sphere_fixture(n_views, size, radius)
    save_dataset(ds, path, format, suffix)
    return ds
