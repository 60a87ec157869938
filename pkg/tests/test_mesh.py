from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from neused import scenes
from neused.errors import ConfigError, DatasetError
from neused.mesh import (
    TriangleMesh,
    _orient_and_clean,
    export_mesh,
    extract_mesh,
    field_sdf,
    load_mesh,
    marching_cubes,
)


def _radial_error(mesh, center=(0.0, 0.0, 0.0), radius=0.5):
    return np.abs(np.linalg.norm(mesh.vertices - np.asarray(center), axis=1) - radius)


@pytest.fixture(scope="module")
def sphere_mesh():
    return marching_cubes(scenes.sphere(0.5), resolution=64)


def test_sphere_vertices_lie_on_surface(sphere_mesh):
    cell = 2.0 / 63
    assert _radial_error(sphere_mesh).max() < cell * math.sqrt(3)


def test_sphere_area_and_topology(sphere_mesh):
    assert sphere_mesh.area() == pytest.approx(4 * math.pi * 0.25, rel=0.05)
    assert sphere_mesh.euler_characteristic() == 2


def test_faces_wind_outward(sphere_mesh):
    v = sphere_mesh.vertices[sphere_mesh.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    assert bool(np.all((n * v.mean(axis=1)).sum(axis=1) > 0))


def test_error_shrinks_when_resolution_doubles():
    coarse = _radial_error(marching_cubes(scenes.sphere(0.5), resolution=24)).mean()
    fine = _radial_error(marching_cubes(scenes.sphere(0.5), resolution=48)).mean()
    assert fine <= 0.6 * coarse


def test_off_centre_sphere_maps_back_to_world():
    mesh = marching_cubes(scenes.sphere(0.3, center=(0.2, -0.1, 0.3)), resolution=48)
    assert np.allclose(mesh.vertices.mean(axis=0), [0.2, -0.1, 0.3], atol=0.02)


def test_torus_has_genus_one():
    mesh = marching_cubes(scenes.torus(0.5, 0.2), resolution=64)
    assert mesh.euler_characteristic() == 0


def test_no_crossing_gives_empty_mesh():
    mesh = marching_cubes(lambda x: torch.ones(len(x), dtype=x.dtype), resolution=8)
    assert len(mesh) == 0 and mesh.vertices.shape == (0, 3)


def test_resolution_floor():
    with pytest.raises(ConfigError):
        marching_cubes(scenes.sphere(0.5), resolution=4)


def test_clean_drops_degenerate_faces_and_unused_vertices():
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 0.0, 0.0], [9.0, 9.0, 9.0]])
    faces = np.array([[0, 1, 2], [0, 0, 1], [0, 1, 3]])
    plane = scenes.plane((0.0, 0.0, 1.0))
    mesh = _orient_and_clean(TriangleMesh(vertices, faces), plane, cell=0.1)
    assert len(mesh) == 1 and len(mesh.vertices) == 3
    # sdf grows along +z, so the single face must wind counter-clockwise seen from +z
    v = mesh.vertices[mesh.faces[0]]
    assert np.cross(v[1] - v[0], v[2] - v[0])[2] > 0


def test_fresh_source_and_target_meshes_match(tiny_bundle):
    src = marching_cubes(field_sdf(tiny_bundle, "source"), resolution=24)
    tgt = marching_cubes(field_sdf(tiny_bundle, "target"), resolution=24)
    assert len(src) > 0
    assert np.array_equal(src.faces, tgt.faces)
    assert np.abs(src.vertices - tgt.vertices).max() < 1e-6


def test_extract_mesh_bakes_colours(tiny_bundle):
    mesh = extract_mesh(tiny_bundle, "target", resolution=16)
    assert mesh.colors.shape == mesh.vertices.shape
    assert mesh.colors.min() >= 0.0 and mesh.colors.max() <= 1.0
    assert np.allclose(np.linalg.norm(mesh.normals, axis=1), 1.0, atol=1e-5)
    with pytest.raises(ConfigError):
        field_sdf(tiny_bundle, "middle")


def _small_mesh():
    mesh = marching_cubes(scenes.sphere(0.5), resolution=12)
    mesh.normals = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    mesh.colors = np.tile([0.1, 0.5, 0.9], (len(mesh.vertices), 1))
    return mesh


def _corners(mesh, attr="vertices"):
    return getattr(mesh, attr)[mesh.faces]


def test_obj_round_trip_keeps_geometry(tmp_path):
    mesh = _small_mesh()
    path = export_mesh(mesh, tmp_path / "m.obj")
    back = load_mesh(path)
    assert len(back) == len(mesh) and len(back.vertices) == len(mesh.vertices)
    assert np.allclose(_corners(back), _corners(mesh), rtol=0.0, atol=1e-15)
    assert np.allclose(_corners(back, "normals"), _corners(mesh, "normals"), atol=1e-12)
    assert np.abs(_corners(back, "colors") - _corners(mesh, "colors")).max() <= 0.5 / 255 + 1e-12


def test_unit_triangle_obj_is_exact(tmp_path):
    mesh = TriangleMesh(np.eye(3), [[0, 1, 2]])
    back = load_mesh(export_mesh(mesh, tmp_path / "t.obj"))
    assert np.array_equal(_corners(back), _corners(mesh))


def test_empty_mesh_files(tmp_path):
    for name in ("e.obj", "e.ply"):
        back = load_mesh(export_mesh(TriangleMesh.empty(), tmp_path / name))
        assert len(back) == 0


def test_topology_queries_on_a_single_triangle():
    mesh = TriangleMesh(np.eye(3), [[0, 1, 2]])
    assert mesh.area() == pytest.approx(math.sqrt(3) / 2)
    assert mesh.face_areas().shape == (1,)
    assert len(mesh.edges()) == 3
    assert mesh.euler_characteristic() == 1


def test_ply_keeps_double_positions(tmp_path):
    mesh = _small_mesh()
    back = load_mesh(export_mesh(mesh, tmp_path / "m.ply"))
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)
    assert np.abs(back.colors - mesh.colors).max() <= 0.5 / 255 + 1e-12


def test_plain_mesh_without_attributes(tmp_path):
    mesh = TriangleMesh(np.eye(3), [[0, 1, 2]])
    for name in ("t.obj", "t.ply"):
        back = load_mesh(export_mesh(mesh, tmp_path / name))
        assert back.normals is None and back.colors is None
        assert np.array_equal(back.vertices[back.faces], mesh.vertices[mesh.faces])


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        export_mesh(TriangleMesh.empty(), tmp_path / "m.stl")
    with pytest.raises(DatasetError):
        load_mesh(tmp_path / "absent.obj")
    with pytest.raises(ConfigError):
        TriangleMesh(np.zeros((2, 3)), [[0, 1, 2]])
