"""Pinhole cameras, rigid-pose checks, look-at frames and the spherical render path.

Poses are camera-to-world 4x4 matrices in the OpenGL/Blender convention: the camera
looks down its -z axis with +y up.
"""

from __future__ import annotations

import json
import logging
import pathlib
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import ConfigError, NonRigidPoseError
from .logging_utils import debug_flags


logger = logging.getLogger(__name__)

RIGID_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x: float) -> "Intrinsics":
        f = 0.5 * width / np.tan(0.5 * fov_x)
        return cls(float(f), float(f), width / 2.0, height / 2.0, int(width), int(height))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: np.ndarray  # 4x4 camera-to-world

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3]


def check_rigid(pose: np.ndarray, tol: float = RIGID_TOL, what: str = "pose") -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape not in ((3, 4), (4, 4)):
        raise NonRigidPoseError(f"{what}: expected a 3x4 or 4x4 matrix, got {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise NonRigidPoseError(f"{what}: non-finite entries")
    R = pose[:3, :3]
    err = np.abs(R.T @ R - np.eye(3)).max()
    det = np.linalg.det(R)
    if err > tol or abs(det - 1.0) > tol:
        raise NonRigidPoseError(f"{what}: rotation not orthonormal with det +1 (|RtR-I|={err:.2e}, det={det:.6f})")
    if pose.shape == (3, 4):
        pose = np.vstack([pose, [0.0, 0.0, 0.0, 1.0]])
    return pose


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def look_at(cam_pos: np.ndarray, center: np.ndarray, up: np.ndarray) -> np.ndarray:
    cam_pos = np.asarray(cam_pos, dtype=np.float64)
    look_dir = _normalize(np.asarray(center, dtype=np.float64) - cam_pos)
    side = np.cross(look_dir, up)
    if np.linalg.norm(side) < 1e-9:
        debug_flags.flag("look_at_up_parallel")
        for alt in (np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0])):
            side = np.cross(look_dir, alt)
            if np.linalg.norm(side) >= 1e-9:
                break
    side = _normalize(side)
    up_vec = _normalize(np.cross(side, look_dir))
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = side, up_vec, -look_dir, cam_pos
    return pose


@dataclass
class CameraPath:
    poses: np.ndarray  # n, 4, 4
    intrinsics: Intrinsics

    def __len__(self) -> int:
        return len(self.poses)

    def cameras(self) -> List[Camera]:
        return [Camera(self.intrinsics, p) for p in self.poses]

    def save(self, path: str | pathlib.Path) -> None:
        data = {"intrinsics": self.intrinsics.to_dict(), "poses": self.poses.tolist()}
        pathlib.Path(path).write_text(json.dumps(data, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | pathlib.Path) -> "CameraPath":
        try:
            data = json.loads(pathlib.Path(path).read_text(encoding="utf-8"))
            intr = Intrinsics(**data["intrinsics"])
            poses = np.stack([check_rigid(p, what=f"path pose {i}") for i, p in enumerate(data["poses"])])
        except (OSError, KeyError, TypeError, ValueError) as e:
            if isinstance(e, NonRigidPoseError):
                raise
            raise ConfigError(f"{path}: invalid camera path file: {e}") from e
        return cls(poses, intr)


def up_vector(cams: np.ndarray) -> np.ndarray:
    """Second eigenvector of cams^T cams (raw positions, eigenvalues descending), oriented to +z."""
    evals, evecs = np.linalg.eigh(cams.T @ cams)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evals[0] <= 0 or evals[1] <= 1e-10 * evals[0]:
        logger.info("camera positions are collinear with the origin; using +z as up")
        return np.array([0.0, 0.0, 1.0])
    up = evecs[:, 1]
    return -up if up[2] < 0 else up


def spherical_poses(positions: Sequence[Sequence[float]], n_steps: int, intrinsics: Intrinsics) -> CameraPath:
    cams = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(cams) < 1 or n_steps < 1:
        raise ConfigError("spherical path needs at least one camera and one step")

    center = np.zeros(3)
    cam_center = cams.mean(axis=0)
    up = up_vector(cams)
    rot_dir = np.cross(up, cam_center)

    norms = np.linalg.norm(cams, axis=1) * np.linalg.norm(cam_center)
    cos = np.divide(cams @ cam_center, norms, out=np.ones(len(cams)), where=norms > 0)
    max_angle = float(np.max(np.arccos(np.clip(cos, -1.0, 1.0))))

    poses = []
    for theta in np.linspace(-max_angle, max_angle, n_steps):
        cam_pos = cam_center * np.cos(theta) + rot_dir * np.sin(theta)
        poses.append(look_at(cam_pos, center, up))
    return CameraPath(np.stack(poses), intrinsics)


def orbit_positions(n: int, radius: float = 3.0, elevations: Sequence[float] = (-20.0, 15.0, 45.0)) -> np.ndarray:
    """Cameras on rings around the origin, used by the synthetic fixtures."""
    pts = []
    for i in range(n):
        elev = np.deg2rad(elevations[i % len(elevations)])
        azim = 2.0 * np.pi * i / n
        pts.append(radius * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)]))
    return np.stack(pts)
