from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarfield.body import PosedBody, PoseShapeParams, icosphere_body
from avatarfield.fields import FieldSet, LatentCode
from avatarfield.tetmesh import (GridSDF, build_tet_grid, crossing_edges, euler_characteristic,
                                 interpolate_crossings, is_two_manifold, lattice_bounds,
                                 marching_tetrahedra, mesh_vertex_grad_to_sdf, mt_vertex_jacobian,
                                 populate_sdf)

from conftest import SMALL


def sphere_sdf(grid, r=0.6, center=(0.0, 0.0, 0.0)):
    return np.linalg.norm(grid.vertices - np.asarray(center), axis=1) - r


def tet_volumes(grid):
    v = grid.vertices[grid.tets]
    return np.einsum("td,td->t", np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), v[:, 3] - v[:, 0]) / 6


# -- lattice ---------------------------------------------------------------------

def test_r2_counts():
    g = build_tet_grid(2, (-1, 1))
    assert len(g.vertices) == 27
    assert len(g.tets) == 48


def test_tets_positive_and_fill_the_cube():
    g = build_tet_grid(4, (-1, 2))
    vol = tet_volumes(g)
    assert np.all(vol > 0)
    np.testing.assert_allclose(vol.sum(), 27.0)


def test_faces_are_conforming():
    g = build_tet_grid(3, (0, 1))
    faces = Counter()
    for t in g.tets:
        for drop in range(4):
            faces[tuple(sorted(np.delete(t, drop)))] += 1
    on_boundary = lambda f: any(  # noqa: E731
        np.all(np.isclose(g.vertices[list(f), k], b)) for k in range(3) for b in (0.0, 1.0))
    for f, n in faces.items():
        assert n == (1 if on_boundary(f) else 2)


def test_edge_table_consistent():
    g = build_tet_grid(3, (-1, 1))
    assert np.all(g.edges[:, 0] < g.edges[:, 1])
    assert len(np.unique(g.edges, axis=0)) == len(g.edges)
    from avatarfield.tetmesh import TET_EDGES
    recon = np.sort(g.tets[:, TET_EDGES], axis=2)
    np.testing.assert_array_equal(g.edges[g.tet_edges], recon)


def test_resolution_below_two_rejected():
    with pytest.raises(ValueError, match="resolution"):
        build_tet_grid(1, (-1, 1))


# -- populate ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def sphere_setup():
    body = icosphere_body(0.5, 3)
    fs = FieldSet.generate(body, SMALL, 1, 2).with_zero_offset()
    w = fs.map_latents(LatentCode.sample(8, 1, 2)).w_geo
    return body, fs, w


def test_rest_pose_zero_offset_is_template_distance(sphere_setup):
    body, fs, w = sphere_setup
    posed = PosedBody(body)
    g = build_tet_grid(8, lattice_bounds(posed))
    d = populate_sdf(g, posed, fs, w)
    np.testing.assert_array_equal(d.values, fs.template_signed_distance(g.vertices))
    assert d.provenance["degenerate_vertices"] == 0


def test_translation_pose_shifts_the_field(sphere_setup):
    body, fs, w = sphere_setup
    t = np.array([0.25, -0.1, 0.05])
    rest = PosedBody(body)
    moved = PosedBody(body, PoseShapeParams(np.zeros((1, 3)), t))
    g = build_tet_grid(8, (-1, 1))
    d_moved = populate_sdf(g, moved, fs, w).values
    expect = fs.sdf(w, rest.inverse_warp_batch(g.vertices - t)[0])
    np.testing.assert_allclose(d_moved, expect, atol=1e-12)


def test_populate_is_deterministic(small_fs, small_latents):
    posed = PosedBody(small_fs.body, PoseShapeParams(np.array([[0.1, 0, 0.2], [0, 0.3, 0]])))
    w = small_fs.map_latents(small_latents).w_geo
    g = build_tet_grid(10, lattice_bounds(posed))
    a = populate_sdf(g, posed, small_fs, w)
    b = populate_sdf(g, posed, small_fs, w)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.provenance == b.provenance


def test_grid_sdf_rejects_non_finite():
    with pytest.raises(ValueError):
        GridSDF(np.array([0.0, np.nan]))


# -- crossing edges --------------------------------------------------------------------

def test_crossing_edges_examples():
    g = build_tet_grid(2, (-1, 1))
    assert len(crossing_edges(g, np.ones(27))) == 0
    d = np.ones(27)
    d[13] = -1.0  # centre vertex
    ce = crossing_edges(g, d)
    incident = np.flatnonzero((g.edges == 13).any(axis=1))
    np.testing.assert_array_equal(ce, incident)
    d = np.ones(27)
    d[13] = 0.0
    assert len(crossing_edges(g, d)) == 0


# -- marching tetrahedra ---------------------------------------------------------------

def test_midpoint_crossing():
    v, t = interpolate_crossings(np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.array([1.0]), np.array([-1.0]))
    np.testing.assert_array_equal(v, [[0.5, 0, 0]])
    np.testing.assert_array_equal(t, [0.5])


def test_all_positive_gives_empty_mesh():
    g = build_tet_grid(3, (-1, 1))
    m = marching_tetrahedra(g, np.ones(len(g.vertices)))
    assert m.is_empty and len(m.vertices) == 0


@pytest.fixture(scope="module")
def sphere_mesh():
    g = build_tet_grid(32, (-1, 1))
    d = sphere_sdf(g)
    return g, d, marching_tetrahedra(g, d)


def test_sphere_vertices_near_radius(sphere_mesh):
    g, d, m = sphere_mesh
    h = 2 / 32
    assert np.abs(np.linalg.norm(m.vertices, axis=1) - 0.6).max() <= h**2 / (2 * 0.6) * 1.5


def test_zero_crossing_residual(sphere_mesh):
    g, d, m = sphere_mesh
    i, j = m.edge_vertices[:, 0], m.edge_vertices[:, 1]
    assert np.abs(d[i] + m.t * (d[j] - d[i])).max() < 1e-12


def test_watertight_sphere(sphere_mesh):
    _, _, m = sphere_mesh
    assert is_two_manifold(m)
    assert euler_characteristic(m) == 2


def test_faces_point_outward(sphere_mesh):
    _, _, m = sphere_mesh
    c = m.vertices[m.faces].mean(axis=1)
    assert np.all(np.einsum("fd,fd->f", m.face_normals(), c) > 0)


def test_translation_equivariance():
    t = np.array([0.125, -0.25, 0.375])
    g = build_tet_grid(12, (-1, 1))
    g2 = build_tet_grid(12, (-1 + t, 1 + t))
    m1 = marching_tetrahedra(g, sphere_sdf(g, 0.5))
    m2 = marching_tetrahedra(g2, sphere_sdf(g2, 0.5, t))
    np.testing.assert_array_equal(m1.faces, m2.faces)
    np.testing.assert_allclose(m2.vertices, m1.vertices + t, atol=1e-12)


def test_vertex_count_is_crossing_edge_count(sphere_mesh):
    g, d, m = sphere_mesh
    ce = crossing_edges(g, d)
    np.testing.assert_array_equal(m.edge_ids, ce)
    assert len(np.unique(m.faces)) == len(m.vertices)


def test_two_separate_spheres_have_euler_four():
    g = build_tet_grid(24, (-1, 1))
    d = np.minimum(sphere_sdf(g, 0.3, (-0.45, 0, 0)), sphere_sdf(g, 0.3, (0.45, 0, 0)))
    m = marching_tetrahedra(g, d)
    assert is_two_manifold(m) and euler_characteristic(m) == 4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_fields_extract_closed_meshes(seed):
    # a random field inside a positive shell: every component is closed and consistently wound
    g = build_tet_grid(6, (-1, 1))
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(len(g.vertices))
    d[np.any(np.abs(g.vertices) == 1.0, axis=1)] = 1.0
    m = marching_tetrahedra(g, d)
    if m.is_empty:
        return
    assert is_two_manifold(m)
    from avatarfield.meshdist import opposite_faces
    opposite_faces(m.faces, len(m.vertices))  # raises unless consistently oriented


# -- vertex jacobian ------------------------------------------------------------------------

def test_jacobian_example():
    g = build_tet_grid(2, (0, 2))  # unit cell edges
    d = -np.ones(len(g.vertices))
    d[0] = 1.0
    m = marching_tetrahedra(g, d)
    ji, jj = mt_vertex_jacobian(m, d, g)
    # edge from vertex 0 (d=1) to its +z neighbour (d=-1) along a unit step
    k = int(np.flatnonzero((m.edge_vertices[:, 0] == 0) & (m.edge_vertices[:, 1] == 1))[0])
    np.testing.assert_allclose(ji[k], [0, 0, 0.25])
    np.testing.assert_allclose(jj[k], [0, 0, 0.25])


def test_jacobian_homogeneity(sphere_mesh):
    g, d, m = sphere_mesh
    ji, jj = mt_vertex_jacobian(m, d, g)
    ji2, jj2 = mt_vertex_jacobian(m, 2 * d, g)
    np.testing.assert_allclose(ji2, ji / 2, rtol=1e-14)
    np.testing.assert_allclose(jj2, jj / 2, rtol=1e-14)


def test_jacobian_matches_finite_differences(sphere_mesh):
    g, d, m = sphere_mesh
    ji, jj = mt_vertex_jacobian(m, d, g)
    rng = np.random.default_rng(0)
    sel = rng.choice(len(m.vertices), 100, replace=False)
    h = 1e-7
    for k in sel:
        i, j = m.edge_vertices[k]
        for which, jac in ((i, ji[k]), (j, jj[k])):
            dp, dm = d.copy(), d.copy()
            dp[which] += h
            dm[which] -= h
            vp, _ = interpolate_crossings(g.vertices[[i]], g.vertices[[j]], dp[[i]], dp[[j]])
            vm, _ = interpolate_crossings(g.vertices[[i]], g.vertices[[j]], dm[[i]], dm[[j]])
            fd = (vp - vm)[0] / (2 * h)
            assert np.linalg.norm(fd - jac) / np.linalg.norm(fd) < 1e-6


def test_vertex_grad_pullback_is_chain_rule(sphere_mesh):
    g, d, m = sphere_mesh
    rng = np.random.default_rng(1)
    gv = rng.standard_normal(m.vertices.shape)
    pulled = mesh_vertex_grad_to_sdf(m, d, g, gv)
    k = int(m.edge_vertices[0, 0])
    h = 1e-7
    dp, dm = d.copy(), d.copy()
    dp[k] += h
    dm[k] -= h
    # vertices only move on edges that keep their sign pattern under a small step
    f = lambda dd: np.sum(gv * marching_tetrahedra(g, dd).vertices)  # noqa: E731
    assert abs((f(dp) - f(dm)) / (2 * h) - pulled[k]) < 1e-6 * max(1.0, abs(pulled[k]))
