from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eikonal_twin.anatomy import cube_mesh
from eikonal_twin.mesh import (GeometryError, TetMesh, VelocityField, read_mesh, sample_triangles,
                               triangle_areas, write_mesh, write_vtk)


# ----------------------------------------------------------------- oracles

def _seg_closest(p, a, b):
    ab = b - a
    t = np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0)
    return a + t * ab


def tri_distance_oracle(p, a, b, c):
    """Plane projection when inside, otherwise the best of the three edges."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - ((p - a) @ n) * n
    # barycentric test of q in the plane
    v0, v1, v2 = b - a, c - a, q - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    if v >= 0 and w >= 0 and v + w <= 1:
        return float(np.linalg.norm(p - q))
    return min(float(np.linalg.norm(p - _seg_closest(p, x, y))) for x, y in ((a, b), (b, c), (c, a)))


def plane_grid(n=10, size=10.0):
    """Triangulated square in z = 0 with 2 n^2 triangles."""
    xs = np.linspace(0.0, size, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    tris = []
    for i in range(n):
        for j in range(n):
            a, b, c, d = i * (n + 1) + j, (i + 1) * (n + 1) + j, (i + 1) * (n + 1) + j + 1, i * (n + 1) + j + 1
            tris += [[a, b, c], [a, c, d]]
    return verts, np.array(tris)


def single_tet():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    return TetMesh(v, [[0, 1, 2, 3]], {"face": [[1, 2, 3]]})


# ------------------------------------------------------------ construction

def test_unit_cube_volume_is_one():
    m = cube_mesh(5, 1.0)
    assert abs(m.total_volume - 1.0) < 1e-9
    assert abs(m.lumped_volumes.sum() - 1.0) < 1e-9


def test_all_tets_positive_volume(cube8):
    assert np.all(cube8.volumes > 0)


def test_negative_volume_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    with pytest.raises(GeometryError):
        TetMesh(v, [[0, 2, 1, 3]])


def test_missing_vertex_rejected():
    v = np.zeros((3, 3))
    with pytest.raises(GeometryError):
        TetMesh(v, [[0, 1, 2, 3]])
    with pytest.raises(GeometryError):
        TetMesh(single_tet().vertices, [[0, 1, 2, 3]], {"bad": [[0, 1, 9]]})


def test_adjacency_is_inverse_of_incidence(cube8):
    indptr, tets = cube8.vertex_to_tet
    for v in range(0, cube8.n_vertices, 17):
        expect = np.nonzero((cube8.tets == v).any(axis=1))[0]
        assert np.array_equal(np.sort(tets[indptr[v]:indptr[v + 1]]), expect)


def test_boundary_area_of_cube(cube8):
    assert abs(triangle_areas(cube8.vertices, cube8.boundary_faces).sum() - 6 * 64.0) < 1e-9


# ------------------------------------------------------------ point location

def test_locate_vertex_of_tet():
    m = single_tet()
    loc = m.locate_point(m.vertices[0])
    assert loc.inside and loc.tet == 0
    assert np.allclose(loc.coords, [1, 0, 0, 0], atol=1e-12)


def test_locate_centroid(cube8):
    k = 123
    loc = cube8.locate_point(cube8.centroids[k])
    assert loc.inside and loc.tet == k
    assert np.allclose(loc.coords, 0.25, atol=1e-12)


def test_locate_outside_reports_distance():
    m = cube_mesh(4, 1.0)
    p = np.array([0.5, 0.5, 2.0])
    loc = m.locate_point(p)
    assert not loc.inside
    V, F = m.vertices, m.boundary_faces
    brute = min(tri_distance_oracle(p, *V[f]) for f in F)
    assert abs(loc.distance - 1.0) < 1e-12
    assert abs(loc.distance - brute) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 7.99), min_size=3, max_size=3))
def test_located_coords_reconstruct_point(xyz):
    m = cube_mesh(8, 8.0)
    p = np.array(xyz)
    loc = m.locate_point(p)
    assert loc.inside
    assert loc.coords.min() >= -1e-9 and abs(loc.coords.sum() - 1) < 1e-12
    assert np.allclose(loc.coords @ m.vertices[m.tets[loc.tet]], p, atol=1e-10)


def test_locate_points_matches_scalar(cube8, rng):
    pts = rng.uniform(-1, 9, (50, 3))
    tets, coords = cube8.locate_points(pts)
    for p, t in zip(pts, tets):
        assert (t >= 0) == cube8.locate_point(p).inside


# ------------------------------------------------------------ surfaces

def test_surface_distance_on_surface_is_zero():
    v, t = plane_grid()
    m = TetMesh(np.vstack([v, [[0, 0, -1.0]]]), np.zeros((0, 4)), {"plane": t})
    assert m.surface_distance(v[37], "plane") == 0.0


def test_surface_distance_plane_height():
    v, t = plane_grid()
    m = TetMesh(v, np.zeros((0, 4)), {"plane": t})
    assert abs(m.surface_distance([3.3, 4.1, 2.5], "plane") - 2.5) < 1e-12


def test_surface_distance_matches_brute_force(rng):
    v, t = plane_grid(n=7)  # 98 triangles
    v = v + np.column_stack([np.zeros((len(v), 2)), 0.4 * np.sin(v[:, 0]) * np.cos(v[:, 1])])
    m = TetMesh(v, np.zeros((0, 4)), {"bumpy": t})
    for p in rng.uniform(-2, 12, (25, 3)):
        brute = min(tri_distance_oracle(p, *v[f]) for f in t)
        assert abs(m.surface_distance(p, "bumpy") - brute) < 1e-9


def test_unknown_surface_raises(cube8):
    with pytest.raises(KeyError):
        cube8.surface_distance([0, 0, 0], "nope")


def test_witness_point_lies_on_surface_triangle(cube8, rng):
    q, d, k = cube8.closest_on_surface(rng.uniform(-3, 11, (10, 3)), "boundary")
    tri = cube8.surface("boundary")[k]
    for qi, f in zip(q, tri):
        assert tri_distance_oracle(qi, *cube8.vertices[f]) < 1e-9
        assert cube8.locate_point(qi).inside


# ------------------------------------------------------------ sampling

def test_single_triangle_sample_centroid():
    v = np.array([[0, 0, 0], [3, 0, 0], [0, 2, 0]], dtype=float)
    pts = sample_triangles(v, np.array([[0, 1, 2]]), 10000, 5)
    c = v.mean(axis=0)
    assert np.all(np.abs(pts.mean(axis=0) - c)[:2] < 0.02 * np.abs(c[:2]))


def test_area_weighted_choice_binomial():
    v = np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]], dtype=float)
    tris = np.array([[0, 1, 2], [3, 4, 5]])  # areas 4.5 and 0.5
    pts = sample_triangles(v, tris, 10000, 11)
    hits = int((pts[:, 0] < 5).sum())
    mean, sd = 9000, np.sqrt(10000 * 0.9 * 0.1)
    assert abs(hits - mean) < 3 * sd


def test_sampling_deterministic(cube8):
    a = cube8.sample_surface_uniform("boundary", 1, 3)
    b = cube8.sample_surface_uniform("boundary", 1, 3)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        cube8.sample_surface_uniform("boundary", 0, 3)


def test_empty_surface_sampling_raises():
    with pytest.raises(GeometryError):
        sample_triangles(np.zeros((3, 3)), np.zeros((0, 3), dtype=int), 3, 0)


# ------------------------------------------------------------ velocity tensors

def test_isotropic_tensor_is_identity():
    R = np.linalg.qr(np.random.default_rng(1).normal(size=(3, 3)))[0]
    vf = VelocityField.uniform(1, R, [1.0, 1.0, 1.0])
    M, Minv = vf.element_tensor(0)
    assert np.allclose(M, np.eye(3), atol=1e-12)


def test_reference_tensor_values():
    vf = VelocityField.uniform(1, np.eye(3), [0.61, 0.225, 0.225])
    M, Minv = vf.element_tensor(0)
    assert np.allclose(M, np.diag([0.3721, 0.050625, 0.050625]), atol=1e-15)
    assert np.allclose(M @ Minv, np.eye(3), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_tensor_rotation_covariance(seed):
    r = np.random.default_rng(seed)
    F = np.linalg.qr(r.normal(size=(3, 3)))[0]
    R = np.linalg.qr(r.normal(size=(3, 3)))[0]
    speeds = r.uniform(0.1, 1.0, 3)
    M = VelocityField.uniform(1, F, speeds).tensors[0]
    # frame rows rotate as f -> R f
    M2 = VelocityField.uniform(1, F @ R.T, speeds).tensors[0]
    assert np.allclose(M2, R @ M @ R.T, atol=1e-12)
    assert np.allclose(M, M.T, atol=1e-15) and np.all(np.linalg.eigvalsh(M) > 0)


def test_non_orthonormal_frame_rejected():
    with pytest.raises(GeometryError):
        VelocityField.uniform(1, [[1, 0, 0], [1, 1, 0], [0, 0, 1]], [1, 1, 1])
    with pytest.raises(ValueError):
        VelocityField.uniform(1, np.eye(3), [1, 0, 1])


# ------------------------------------------------------------ I/O

def test_mesh_roundtrip(tmp_path, cube8):
    R = np.linalg.qr(np.random.default_rng(2).normal(size=(3, 3)))[0]
    if np.linalg.det(R) < 0:
        R[2] *= -1
    vf = VelocityField.uniform(cube8.n_tets, R, [1, 1, 1])
    write_mesh(tmp_path / "c.mesh", cube8, vf)
    m2, frames = read_mesh(tmp_path / "c.mesh")
    assert np.array_equal(m2.vertices, cube8.vertices)
    assert np.array_equal(m2.tets, cube8.tets)
    assert np.array_equal(m2.surfaces["boundary"], cube8.surfaces["boundary"])
    assert np.allclose(frames, vf.frames, atol=1e-15)


def test_vtk_writer(tmp_path, cube8):
    write_vtk(tmp_path / "c.vtk", cube8, point_data={"tau": np.arange(cube8.n_vertices, dtype=float)})
    text = (tmp_path / "c.vtk").read_text()
    assert f"CELLS {cube8.n_tets}" in text and "SCALARS tau" in text


def test_queries_are_pure(cube8, rng):
    p = rng.uniform(0, 8, (5, 3))
    a = cube8.locate_points(p)
    b = cube8.locate_points(p)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
