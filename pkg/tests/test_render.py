import math

import numpy as np
import pytest

from avatarfield.body import PoseShapeParams, icosphere_body
from avatarfield.fields import DecoderMLP, FieldSet, LatentCode
from avatarfield.pipeline import extract, render_view
from avatarfield.render import (DEFAULT_FOV, DEFAULT_RADIUS, Camera, decode_normals, make_camera,
                                projected_disk_fraction, rasterize, recolor)
from avatarfield.tetmesh import ExtractedMesh

from conftest import SMALL


def mesh_from(vertices, faces):
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    m = len(vertices)
    return ExtractedMesh(vertices, faces, np.zeros((m, 2), np.int64), np.zeros(m), np.zeros(m, np.int64),
                         np.zeros(len(faces), np.int64))


def quad(z, half, offset=0):
    """Axis-aligned square facing +z (counter-clockwise seen from the camera)."""
    v = [[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]]
    f = np.array([[0, 1, 2], [0, 2, 3]]) + offset
    return v, f


# -- camera ----------------------------------------------------------------------------

def test_default_camera_position_and_axis():
    cam = make_camera(2.3, 0.0, 0.0)
    np.testing.assert_allclose(cam.position, [0, 0, 2.3], atol=1e-15)
    np.testing.assert_allclose(cam.rotation[2], [0, 0, 1], atol=1e-15)  # looks down -z
    np.testing.assert_allclose(cam.to_camera([[0, 0, 0]]), [[0, 0, -2.3]], atol=1e-15)


def test_azimuth_pi_moves_camera_behind():
    # the azimuth is snapped to a 1e-9 rad grid, which bounds the position error
    np.testing.assert_allclose(make_camera(2.3, math.pi).position, [0, 0, -2.3], atol=2.3e-9)


@pytest.mark.parametrize("kw", [dict(fov=0.0), dict(fov=180.0), dict(radius=0.0), dict(w=0),
                                dict(elevation=math.pi / 2)])
def test_bad_camera_rejected(kw):
    with pytest.raises(ValueError):
        make_camera(**kw)


def test_azimuth_wraps_bit_exactly():
    a = make_camera(2.3, 0.7)
    b = make_camera(2.3, 0.7 + 2 * math.pi)
    assert a.position.tobytes() == b.position.tobytes()
    assert make_camera(2.3, 2 * math.pi).wrapped_azimuth == 0.0


def test_projection_centre_and_corners():
    cam = make_camera(2.0, w=100, h=50, fov=90.0)
    xy, w = cam.project(np.array([[0.0, 0, 0], [0, 2, 0], [2 * 2, 0, 0]]))
    np.testing.assert_allclose(xy[0], [50, 25])
    np.testing.assert_allclose(w, 2.0)
    np.testing.assert_allclose(xy[1], [50, 0], atol=1e-12)  # top edge at tan(45 deg) * depth
    np.testing.assert_allclose(xy[2], [100, 25], atol=1e-12)  # aspect 2 widens the view


# -- rasterizer ---------------------------------------------------------------------------

def test_full_screen_quad():
    cam = make_camera(DEFAULT_RADIUS, w=64, h=48)
    v, f = quad(DEFAULT_RADIUS - 2.0, 5.0)
    buf = rasterize(mesh_from(v, f), cam)
    assert buf.mask.all()
    np.testing.assert_allclose(buf.depth, 2.0, rtol=1e-12)
    np.testing.assert_allclose(buf.coord_map[..., 2], DEFAULT_RADIUS - 2.0, atol=1e-12)


def test_empty_mesh():
    buf = rasterize(mesh_from(np.zeros((0, 3)), np.zeros((0, 3))), make_camera(w=16, h=16))
    assert not buf.mask.any()
    assert np.isinf(buf.depth).all() and np.isnan(buf.coord_map).all()
    assert (buf.face_id == -1).all()


def test_back_faces_are_culled():
    v, f = quad(0.0, 0.5)
    buf = rasterize(mesh_from(v, f[:, ::-1]), make_camera(w=32, h=32))
    assert not buf.mask.any()


def test_nearer_quad_wins():
    v1, f1 = quad(0.0, 0.5)
    v2, f2 = quad(0.3, 0.25, offset=4)
    buf = rasterize(mesh_from(v1 + v2, np.concatenate([f1, f2])), make_camera(w=64, h=64))
    near = np.isin(buf.face_id, [2, 3])
    assert near.any()
    np.testing.assert_allclose(buf.depth[near], DEFAULT_RADIUS - 0.3, rtol=1e-12)
    # wherever the small quad covers, it is the one recorded
    xy, _ = make_camera(w=64, h=64).project(np.array(v2))
    r0, r1 = int(np.ceil(xy[:, 1].min())), int(np.floor(xy[:, 1].max()))
    c0, c1 = int(np.ceil(xy[:, 0].min())), int(np.floor(xy[:, 0].max()))
    assert near[r0:r1, c0:c1].all()


def test_depth_tie_goes_to_lower_face_id():
    v, f = quad(0.0, 0.5)
    buf = rasterize(mesh_from(v + v, np.concatenate([f + 4, f])), make_camera(w=32, h=32))
    assert set(np.unique(buf.face_id[buf.mask])) == {0, 1}


def test_shared_edges_leave_no_cracks():
    # a fan of thin triangles around the centre: every pixel inside is hit exactly once
    n = 37
    ang = np.linspace(0, 2 * np.pi, n + 1)[:-1]
    ring = np.stack([0.6 * np.cos(ang), 0.6 * np.sin(ang), np.zeros(n)], 1)
    verts = np.vstack([[0, 0, 0], ring])
    faces = [[0, 1 + k, 1 + (k + 1) % n] for k in range(n)]
    cam = make_camera(w=96, h=96)
    buf = rasterize(mesh_from(verts, faces), cam)
    xy, _ = cam.project(verts)
    centre = xy[0]
    rr, cc = np.mgrid[0:96, 0:96]
    dist = np.hypot(cc + 0.5 - centre[0], rr + 0.5 - centre[1])
    inner = dist < 0.8 * np.linalg.norm(xy[1] - centre)
    assert buf.mask[inner].all()


def test_buffer_consistency():
    v, f = quad(0.0, 0.4)
    buf = rasterize(mesh_from(v, f), make_camera(w=40, h=40, azimuth=0.3))
    assert np.array_equal(buf.mask, np.isfinite(buf.depth))
    assert np.array_equal(buf.mask, np.isfinite(buf.coord_map).all(axis=2))
    assert np.array_equal(buf.mask, buf.face_id >= 0)
    np.testing.assert_allclose(buf.bary[buf.mask].sum(axis=1), 1.0, atol=1e-12)


# -- scene renders ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def sphere_scene():
    # the template gradient is the facet normal, so the normal oracle needs a fine
    # template: level 6 tilts the facet under the centre pixel by under 1e-2
    body = icosphere_body(0.5, 6)
    fs = FieldSet.generate(body, SMALL, 1, 2).with_zero_offset()
    lat = LatentCode.sample(SMALL.latent_dim, 1, 2)
    params = PoseShapeParams.rest(body)
    ex = extract(fs, params, fs.map_latents(lat).w_geo, 48)
    return fs, lat, ex


def test_sphere_mask_fraction(sphere_scene):
    fs, lat, ex = sphere_scene
    cam = make_camera(w=256, h=256)
    buf = rasterize(ex.mesh, cam)
    expect = projected_disk_fraction(0.5, DEFAULT_RADIUS, DEFAULT_FOV)
    assert abs(expect - 0.1865) < 5e-4
    assert abs(buf.covered / buf.mask.size - expect) / expect < 0.02


def test_sphere_centre_normal_faces_camera(sphere_scene):
    fs, lat, ex = sphere_scene
    # at low resolution the centre pixel sits far enough off-axis to tilt even an exact sphere
    buf = render_view(ex, fs, lat, make_camera(w=512, h=512))
    n = decode_normals(buf.normal_map[256, 256])
    np.testing.assert_allclose(n, [0, 0, 1], atol=1e-2)


def test_normal_map_decodes_to_unit_vectors(sphere_scene):
    fs, lat, ex = sphere_scene
    buf = render_view(ex, fs, lat, make_camera(w=96, h=96, azimuth=1.0, elevation=0.3))
    n = decode_normals(buf.normal_map[buf.mask])
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)
    q = np.round(buf.normal_map[buf.mask] * 255) / 255
    assert np.abs(np.linalg.norm(decode_normals(q), axis=1) - 1.0).max() < 0.02
    assert not buf.normal_map[~buf.mask].any() and not buf.rgb[~buf.mask].any()


def test_zero_texture_is_gray(sphere_scene):
    fs, lat, ex = sphere_scene
    dec = DecoderMLP.zeros(fs.tex_decoder.widths, fs.tex_decoder.cond_dim, "sigmoid")
    buf = render_view(ex, fs.replace(tex_decoder=dec), lat, make_camera(w=48, h=48))
    np.testing.assert_array_equal(buf.rgb[buf.mask], 0.5)


def test_rest_pose_shading_is_direct_query(sphere_scene):
    fs, lat, ex = sphere_scene
    buf = render_view(ex, fs, lat, make_camera(w=48, h=48, azimuth=2.0))
    w = fs.map_latents(lat)
    pts = buf.coord_map[buf.mask]
    np.testing.assert_allclose(buf.rgb[buf.mask], fs.color(w.w_geo, w.w_tex, pts), atol=1e-12)
    np.testing.assert_allclose(buf.canonical[buf.mask], pts, atol=1e-12)


def test_orbit_periodicity_and_determinism(sphere_scene):
    fs, lat, ex = sphere_scene
    a = render_view(ex, fs, lat, make_camera(w=48, h=48, azimuth=0.4))
    b = render_view(ex, fs, lat, make_camera(w=48, h=48, azimuth=0.4 + 2 * math.pi))
    c = render_view(ex, fs, lat, make_camera(w=48, h=48, azimuth=0.4))
    for buf in (b, c):
        for name in ("mask", "depth", "face_id", "rgb", "normal_map"):
            assert getattr(a, name).tobytes() == getattr(buf, name).tobytes()


def test_posed_render_uses_canonical_colours(small_fs, small_latents):
    params = PoseShapeParams(np.array([[0, 0, 0.3], [0.4, 0, 0]]), np.array([0.05, 0, 0]))
    ex = extract(small_fs, params, small_fs.map_latents(small_latents).w_geo, 24)
    buf = render_view(ex, small_fs, small_latents, make_camera(w=48, h=48))
    w = small_fs.map_latents(small_latents)
    ok = np.isfinite(buf.canonical[..., 0])
    assert ok.sum() > 0.9 * buf.covered
    np.testing.assert_allclose(buf.rgb[ok], small_fs.color(w.w_geo, w.w_tex, buf.canonical[ok]), atol=1e-12)


def test_recolor_matches_full_shade(small_fs, small_latents):
    params = PoseShapeParams.rest(small_fs.body)
    ex = extract(small_fs, params, small_fs.map_latents(small_latents).w_geo, 20)
    cam = make_camera(w=40, h=40)
    other = small_latents.with_texture(LatentCode.sample(8, 0, 77).z_tex)
    base = render_view(ex, small_fs, small_latents, cam)
    w = small_fs.map_latents(other)
    fresh = render_view(ex, small_fs, other, cam)
    re = recolor(base, small_fs, w.w_geo, w.w_tex)
    assert re.rgb.tobytes() == fresh.rgb.tobytes()
    assert re.normal_map.tobytes() == base.normal_map.tobytes()
    with pytest.raises(ValueError):
        recolor(rasterize(ex.mesh, cam), small_fs, w.w_geo, w.w_tex)


def test_camera_is_hashable_value():
    assert Camera() == make_camera()
