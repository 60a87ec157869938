"""Zero-level-set extraction with marching cubes, OBJ/PLY export and import,
and vertex colour baking from a field's colour network."""

from __future__ import annotations

import logging
import pathlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import mcubes
import numpy as np
import torch
import torch.nn.functional as F
import trimesh
from plyfile import PlyData, PlyElement

from .errors import ConfigError, DatasetError
from .fields import FieldBundle, sdf_and_gradient


logger = logging.getLogger(__name__)

MIN_RESOLUTION = 8
QUERY_CHUNK = 64
OBJ_DIGITS = 17


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # V, 3 float64
    faces: np.ndarray  # F, 3 int64
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None  # V, 3 in [0, 1]

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ConfigError("face index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.faces)

    def to_trimesh(self) -> trimesh.Trimesh:
        colors = None
        if self.colors is not None:
            colors = (np.clip(self.colors, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        return trimesh.Trimesh(
            vertices=self.vertices,
            faces=self.faces,
            vertex_normals=self.normals,
            vertex_colors=colors,
            process=False,
            validate=False,
        )

    def face_areas(self) -> np.ndarray:
        return np.asarray(self.to_trimesh().area_faces, dtype=np.float64)

    def area(self) -> float:
        return float(self.to_trimesh().area)

    def edges(self) -> np.ndarray:
        return np.asarray(self.to_trimesh().edges_unique, dtype=np.int64)

    def euler_characteristic(self) -> int:
        return int(self.to_trimesh().euler_number)


def sample_grid(
    sdf: Callable[[torch.Tensor], torch.Tensor],
    bbox: Tuple[Sequence[float], Sequence[float]],
    resolution: int,
    dtype: torch.dtype = torch.float64,
) -> np.ndarray:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    axes = [torch.linspace(lo[i], hi[i], resolution, dtype=dtype).split(QUERY_CHUNK) for i in range(3)]
    u = np.zeros((resolution,) * 3, dtype=np.float64)
    with torch.no_grad():
        for xi, xs in enumerate(axes[0]):
            for yi, ys in enumerate(axes[1]):
                for zi, zs in enumerate(axes[2]):
                    xx, yy, zz = torch.meshgrid(xs, ys, zs, indexing="ij")
                    pts = torch.stack([xx.reshape(-1), yy.reshape(-1), zz.reshape(-1)], dim=-1)
                    val = sdf(pts).reshape(len(xs), len(ys), len(zs)).to(torch.float64).cpu().numpy()
                    u[
                        xi * QUERY_CHUNK : xi * QUERY_CHUNK + len(xs),
                        yi * QUERY_CHUNK : yi * QUERY_CHUNK + len(ys),
                        zi * QUERY_CHUNK : zi * QUERY_CHUNK + len(zs),
                    ] = val
    return u


def _orient_and_clean(mesh: TriangleMesh, sdf, cell: float) -> TriangleMesh:
    """Wind every face toward increasing sdf, drop zero-area faces and unused vertices."""
    faces = mesh.faces
    faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 2] != faces[:, 0])]
    v = mesh.vertices[faces]
    cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    twice_area = np.linalg.norm(cross, axis=-1)
    keep = twice_area > 1e-12 * cell * cell
    faces, cross, twice_area = faces[keep], cross[keep], twice_area[keep]
    if len(faces) == 0:
        return TriangleMesh.empty()

    n = cross / twice_area[:, None]
    centroid = mesh.vertices[faces].mean(axis=1)
    h = 0.25 * cell
    pts = torch.as_tensor(np.concatenate([centroid + h * n, centroid - h * n]), dtype=torch.float64)
    with torch.no_grad():
        vals = sdf(pts).to(torch.float64).cpu().numpy()
    inward = vals[: len(faces)] < vals[len(faces) :]
    faces = faces.copy()
    faces[inward] = faces[inward][:, [0, 2, 1]]

    used, remap = np.unique(faces, return_inverse=True)
    return TriangleMesh(mesh.vertices[used], remap.reshape(-1, 3))


def marching_cubes(
    sdf: Callable[[torch.Tensor], torch.Tensor],
    bbox: Tuple[Sequence[float], Sequence[float]] = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
    resolution: int = 128,
) -> TriangleMesh:
    """Zero level set of ``sdf`` sampled on a resolution^3 lattice spanning ``bbox``."""
    if resolution < MIN_RESOLUTION:
        raise ConfigError(f"marching cubes resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    u = sample_grid(sdf, bbox, resolution)
    if u.min() > 0.0 or u.max() < 0.0:
        logger.info("no zero crossing in the sampled field; mesh is empty")
        return TriangleMesh.empty()

    vertices, triangles = mcubes.marching_cubes(u, 0.0)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    vertices = vertices / (resolution - 1.0) * (hi - lo)[None, :] + lo[None, :]
    cell = float(np.max(hi - lo)) / (resolution - 1.0)
    mesh = _orient_and_clean(TriangleMesh(vertices, triangles), sdf, cell)
    logger.info("marching cubes: %d vertices, %d faces", len(mesh.vertices), len(mesh.faces))
    return mesh


def field_sdf(bundle: FieldBundle, which: str) -> Callable[[torch.Tensor], torch.Tensor]:
    if which not in ("source", "target"):
        raise ConfigError(f"unknown field {which!r}; expected source or target")
    fn = bundle.sdf_source if which == "source" else bundle.sdf_target

    def sdf(x: torch.Tensor) -> torch.Tensor:
        return fn(x.to(torch.float32))[0]

    return sdf


def bake_vertex_colors(bundle: FieldBundle, mesh: TriangleMesh, which: str = "target") -> TriangleMesh:
    """Colour each vertex as seen by a camera sitting on its outward normal."""
    if len(mesh.vertices) == 0:
        return mesh
    x = torch.as_tensor(mesh.vertices, dtype=torch.float32)
    b = bundle
    with torch.no_grad():
        (_, feat_src), grad_src = sdf_and_gradient(b.sdf_source, x)
        n_src = F.normalize(grad_src, dim=-1)
        src_rgb, src_logits = b.source_color(feat_src, -n_src, n_src)
        if which == "source":
            rgb, n = src_rgb, n_src
        else:
            (_, feat), grad = sdf_and_gradient(b.sdf_target, x)
            n = F.normalize(grad, dim=-1)
            rgb = b.target_color(feat, -n, n, src_rgb, src_logits)
    mesh.normals = n.to(torch.float64).numpy()
    mesh.colors = rgb.to(torch.float64).clamp(0.0, 1.0).numpy()
    return mesh


def extract_mesh(bundle: FieldBundle, which: str = "target", resolution: int = 128, colored: bool = True) -> TriangleMesh:
    mesh = marching_cubes(field_sdf(bundle, which), resolution=resolution)
    return bake_vertex_colors(bundle, mesh, which) if colored else mesh


# -- files ---------------------------------------------------------------------


def _format(path: pathlib.Path, format: Optional[str]) -> str:
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in ("obj", "ply"):
        raise ConfigError(f"unknown mesh format {fmt!r}; expected obj or ply")
    return fmt


def _write_obj(mesh: TriangleMesh, path: pathlib.Path) -> None:
    if len(mesh) == 0:
        path.write_text("# empty mesh\n", encoding="ascii")
        return
    text = trimesh.exchange.obj.export_obj(
        mesh.to_trimesh(),
        include_normals=mesh.normals is not None,
        include_color=mesh.colors is not None,
        include_texture=False,
        digits=OBJ_DIGITS,
    )
    path.write_text(text, encoding="ascii")


def _write_ply(mesh: TriangleMesh, path: pathlib.Path) -> None:
    props = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if mesh.normals is not None:
        props += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
    if mesh.colors is not None:
        props += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    verts = np.empty(len(mesh.vertices), dtype=props)
    verts["x"], verts["y"], verts["z"] = mesh.vertices.T
    if mesh.normals is not None:
        verts["nx"], verts["ny"], verts["nz"] = mesh.normals.T
    if mesh.colors is not None:
        rgb = (np.clip(mesh.colors, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        verts["red"], verts["green"], verts["blue"] = rgb.T
    faces = np.empty(len(mesh.faces), dtype=[("vertex_indices", "<i4", (3,))])
    faces["vertex_indices"] = mesh.faces.astype(np.int32)
    PlyData(
        [PlyElement.describe(verts, "vertex"), PlyElement.describe(faces, "face")],
        text=False,
        byte_order="<",
    ).write(str(path))


def export_mesh(mesh: TriangleMesh, path: str | pathlib.Path, format: Optional[str] = None) -> pathlib.Path:
    path = pathlib.Path(path)
    fmt = _format(path, format)
    path.parent.mkdir(parents=True, exist_ok=True)
    (_write_obj if fmt == "obj" else _write_ply)(mesh, path)
    logger.info("wrote %s (%d vertices, %d faces)", path, len(mesh.vertices), len(mesh.faces))
    return path


def _read_obj(path: pathlib.Path) -> TriangleMesh:
    """Vertex order may differ from the written file; face order and corners do not."""
    tags = {line.split(maxsplit=1)[0] for line in path.read_text(encoding="ascii").splitlines() if line.strip()}
    if "f" not in tags:
        return TriangleMesh.empty()
    try:
        tm = trimesh.load(str(path), file_type="obj", force="mesh", process=False, maintain_order=True)
    except (ValueError, IndexError) as e:
        raise DatasetError(f"{path}: unreadable OBJ: {e}") from e
    colors = None
    if tm.visual.kind == "vertex":
        colors = np.asarray(tm.visual.vertex_colors[:, :3], dtype=np.float64) / 255.0
    normals = np.asarray(tm.vertex_normals, dtype=np.float64) if "vn" in tags else None
    return TriangleMesh(np.asarray(tm.vertices), np.asarray(tm.faces), normals, colors)


def _read_ply(path: pathlib.Path) -> TriangleMesh:
    ply = PlyData.read(str(path))
    v = ply["vertex"].data
    names = v.dtype.names
    vertices = np.stack([v["x"], v["y"], v["z"]], axis=-1).astype(np.float64)
    normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=-1).astype(np.float64) if "nx" in names else None
    colors = np.stack([v["red"], v["green"], v["blue"]], axis=-1) / 255.0 if "red" in names else None
    if "face" in ply and ply["face"].count:
        faces = np.stack([np.asarray(f, dtype=np.int64) for f in ply["face"].data["vertex_indices"]])
    else:
        faces = np.zeros((0, 3), dtype=np.int64)
    return TriangleMesh(vertices, faces, normals, colors)


def load_mesh(path: str | pathlib.Path, format: Optional[str] = None) -> TriangleMesh:
    path = pathlib.Path(path)
    if not path.exists():
        raise DatasetError(f"mesh file {path} not found")
    return _read_obj(path) if _format(path, format) == "obj" else _read_ply(path)
