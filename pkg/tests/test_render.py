import math

import numpy as np
import pytest

from matforge.errors import DegenerateMesh, MissingChannel
from matforge.fixtures import cube, quad, uv_sphere
from matforge.mesh_io import Mesh, TextureMap
from matforge.render import (
    BACKGROUND_FACE,
    Camera,
    luminance,
    make_camera_ring,
    rasterize,
    rasterize_gbuffer,
    shade_preview,
    top_down_camera,
)


def _azimuth(cam):
    d = np.subtract(cam.eye, cam.target)
    return math.degrees(math.atan2(d[0], d[2])) % 360.0


def _flat_maps(shape=(8, 8), roughness=0.5, metalness=0.0):
    h, w = shape
    return {
        "normal": TextureMap(np.tile([0.5, 0.5, 1.0], (h, w, 1)), "normal"),
        "roughness": TextureMap(np.full((h, w), roughness), "roughness"),
        "metalness": TextureMap(np.full((h, w), metalness), "metalness"),
    }


def _diffuse(rgb, shape=(8, 8)):
    return TextureMap(np.broadcast_to(np.asarray(rgb, float), (*shape, 3)).copy(), "diffuse")


# ------------------------------------------------------------------ camera ring


def test_three_view_azimuths():
    cams = make_camera_ring(3, uv_sphere(), 64)
    assert [round(_azimuth(c), 6) for c in cams] == [0.0, 120.0, 240.0]


def test_single_view():
    cams = make_camera_ring(1, uv_sphere(), 64)
    assert len(cams) == 1 and round(_azimuth(cams[0]), 6) == 0.0


def test_ring_elevation_and_target():
    mesh = cube()
    center, _ = mesh.bounding_sphere()
    for cam in make_camera_ring(4, mesh, 64, elevation=math.radians(20)):
        d = np.subtract(cam.eye, cam.target)
        assert np.allclose(cam.target, center)
        assert math.degrees(math.asin(d[1] / np.linalg.norm(d))) == pytest.approx(20.0)


def test_unit_sphere_distance():
    cam = make_camera_ring(1, uv_sphere(), 64, fov=math.radians(60))[0]
    dist = np.linalg.norm(np.subtract(cam.eye, cam.target))
    assert dist == pytest.approx(1.0 / math.sin(math.radians(24.0)))
    assert dist == pytest.approx(2.459, abs=1e-3)


def test_unit_sphere_silhouette():
    # A sphere seen from distance d projects to a disc of angular radius asin(r/d);
    # on the image plane its height fraction is tan(asin(r/d)) / tan(fov/2).
    size = 512
    mesh = uv_sphere(64, 128)
    cam = make_camera_ring(1, mesh, size)[0]
    rows = np.flatnonzero(rasterize_gbuffer(mesh, cam).covered.any(axis=1))
    measured = (rows[-1] - rows[0] + 1) / size
    oracle = math.tan(math.radians(24.0)) / math.tan(math.radians(30.0))
    assert measured == pytest.approx(oracle, abs=3 / size)
    assert measured == pytest.approx(0.8, rel=0.05)


def test_degenerate_mesh():
    pts = np.zeros((3, 3))
    mesh = Mesh(pts, np.zeros((3, 2)), [[(0, 0), (1, 1), (2, 2)]])
    with pytest.raises(DegenerateMesh):
        make_camera_ring(3, mesh)


def test_top_down_camera_looks_down():
    cam = top_down_camera(cube(), 32)
    assert cam.basis()[2] == pytest.approx([0.0, -1.0, 0.0])


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(eye=(0, 0, 1), target=(0, 0, 0), fov=math.pi)
    with pytest.raises(ValueError):
        Camera(eye=(0, 0, 1), target=(0, 0, 0), near=2.0, far=1.0)
    with pytest.raises(ValueError):
        Camera(eye=(0, 1, 0), target=(0, 0, 0), up=(0, 1, 0))


# -------------------------------------------------------------------- rasterize


def test_single_triangle_fills_center():
    mesh = Mesh([[-50, -50, 0], [50, -50, 0], [0, 60, 0]], [[0, 0], [1, 0], [0.5, 1]],
                [[(0, 0), (1, 1), (2, 2)]])
    cam = Camera(eye=(0, 0, 1), target=(0, 0, 0), width=33, height=33, near=0.1, far=10)
    gb = rasterize_gbuffer(mesh, cam)
    assert gb.face_id[16, 16] == 0
    assert gb.bary[16, 16].sum() == pytest.approx(1.0, abs=1e-5)


def test_z_buffer_keeps_nearest():
    # camera at z=3 looking down -z: the z=1 triangle hides the larger z=0 one
    tri = [[-1, -1], [1, -1], [0, 1]]
    pos = [[x, y, 1.0] for x, y in tri] + [[x * 2, y * 2, 0.0] for x, y in tri]
    uvs = [[0, 0], [1, 0], [0.5, 1]]
    faces = [[(3, 0), (4, 1), (5, 2)], [(0, 0), (1, 1), (2, 2)]]
    mesh = Mesh(pos, uvs, faces)
    cam = Camera(eye=(0, 0, 3), target=(0, 0, 0), width=64, height=64, near=0.1, far=10)
    gb = rasterize_gbuffer(mesh, cam)
    near_only = rasterize_gbuffer(Mesh(pos, uvs, faces[1:]), cam).covered
    assert near_only.any()
    assert np.all(gb.face_id[near_only] == 1)
    assert np.all(gb.face_id[gb.covered & ~near_only] == 0)


def test_back_faces_culled():
    mesh = quad()
    cam = Camera(eye=(0, 0, -3), target=(0, 0, 0), width=32, height=32, near=0.1, far=10)
    assert not rasterize_gbuffer(mesh, cam).covered.any()


def test_checkerboard_center_block():
    # 4x4 checker on a full-atlas quad seen squarely: each pixel center's UV
    # is analytic, so the rendered color must equal the texel under it.
    checker = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    tex = TextureMap(np.repeat(checker[:, :, None], 3, axis=2), "diffuse")
    size = 64
    half = math.tan(math.radians(30.0)) * 2.0  # quad exactly fills the view at distance 2
    cam = Camera(eye=(0, 0, 2), target=(0, 0, 0), width=size, height=size, near=0.1, far=10)
    out = rasterize(quad(half=half), tex, cam)
    for row in (31, 32):
        for col in (31, 32):
            u = (col + 0.5) / size
            v = 1.0 - (row + 0.5) / size
            texel = checker[int((1 - v) * 4), int(u * 4)]
            assert out.color[row, col].tolist() == [texel] * 3
            assert out.gbuffer.uv[row, col] == pytest.approx([u, v], abs=1e-9)


def test_background_is_sentinel():
    mesh, tex = uv_sphere(), _diffuse([0.2, 0.3, 0.4])
    out = rasterize(mesh, tex, make_camera_ring(1, mesh, 64)[0])
    bg = ~out.foreground
    assert np.all(out.gbuffer.face_id[bg] == BACKGROUND_FACE)
    assert np.all(out.color[bg] == 1.0)
    assert np.allclose(out.color[out.foreground], [0.2, 0.3, 0.4])


@pytest.mark.parametrize("mesh", [uv_sphere(), cube()], ids=["sphere", "cube"])
def test_gbuffer_invariants(mesh):
    for cam in make_camera_ring(3, mesh, 96):
        gb = rasterize_gbuffer(mesh, cam)
        cov = gb.covered
        b = gb.bary[cov]
        assert np.allclose(b.sum(axis=1), 1.0, atol=1e-5)
        assert b.min() >= -1e-6
        fuv = mesh.face_uvs()[gb.face_id[cov]]
        assert np.allclose(np.einsum("nk,nkd->nd", b, fuv), gb.uv[cov], atol=1e-5)
        assert np.all((gb.depth[cov] >= cam.near) & (gb.depth[cov] <= cam.far))
        # re-project the interpolated surface point: lands within 0.5 px of the center
        pts = np.einsum("nk,nkd->nd", b, mesh.face_positions()[gb.face_id[cov]])
        xy, z = cam.project(pts)
        rows, cols = np.nonzero(cov)
        centers = np.stack([cols + 0.5, rows + 0.5], axis=1)
        assert np.abs(xy - centers).max() <= 0.5
        assert np.allclose(z, gb.depth[cov])


def test_depth_increases_away_from_camera():
    mesh = uv_sphere()
    cam = make_camera_ring(1, mesh, 64)[0]
    gb = rasterize_gbuffer(mesh, cam)
    dist = np.linalg.norm(np.subtract(cam.eye, cam.target))
    cov = gb.covered
    assert gb.depth[cov].min() == pytest.approx(dist - 1.0, abs=0.01)
    assert gb.depth[cov].max() < dist


def test_render_deterministic():
    mesh, tex = cube(), TextureMap(np.random.default_rng(0).random((32, 32, 3)), "diffuse")
    cam = make_camera_ring(3, mesh, 64)[1]
    a, b = rasterize(mesh, tex, cam), rasterize(mesh, tex, cam)
    assert np.array_equal(a.color, b.color)
    for field in ("face_id", "bary", "uv", "depth"):
        assert np.array_equal(getattr(a.gbuffer, field), getattr(b.gbuffer, field))


def test_coverage_shrinks_with_distance():
    mesh = uv_sphere()
    counts = []
    for dist in (2.5, 3.0, 4.0, 6.0, 10.0):
        cam = Camera(eye=(0, 0, dist), target=(0, 0, 0), width=96, height=96, near=0.1,
                     far=50)
        counts.append(int(rasterize_gbuffer(mesh, cam).covered.sum()))
    assert all(a > b for a, b in zip(counts, counts[1:]))


def test_offscreen_mesh_gives_empty_frame():
    cam = Camera(eye=(0, 0, 3), target=(0, 0, 0), width=16, height=16)
    far_away = Mesh(quad().positions + [100, 0, 0], quad().uvs, quad().faces)
    assert not rasterize_gbuffer(far_away, cam).covered.any()


# ---------------------------------------------------------------------- preview


def _facing_quad_camera(size=65):
    return Camera(eye=(0, 0, 3), target=(0, 0, 0), width=size, height=size, near=0.1, far=10)


def test_metal_highlight_beats_diffuse():
    cam = _facing_quad_camera()
    mesh = quad(half=1.5)
    tex = _diffuse([0.5, 0.5, 0.5])
    mirror = (0.0, 0.0, 1.0)  # light along the view axis: center pixel is the mirror point
    metal = shade_preview(mesh, _flat_maps(roughness=0.05, metalness=1.0), cam, mirror, tex)
    plain = shade_preview(mesh, _flat_maps(roughness=1.0, metalness=0.0), cam, mirror, tex)
    assert luminance(metal[32, 32]) > luminance(plain[32, 32])


def test_rough_lobe_is_wider():
    mesh = uv_sphere()
    cam = make_camera_ring(1, mesh, 96)[0]
    light = np.subtract(cam.eye, cam.target)

    def lobe(r):
        lum = luminance(shade_preview(mesh, _flat_maps(roughness=r, metalness=1.0), cam,
                                      light, TextureMap(np.ones((8, 8, 3)), "diffuse")))
        return int((lum >= 0.9 * lum.max()).sum())

    assert lobe(1.0) > lobe(0.1)


def test_black_dielectric_under_f0_floor():
    mesh = uv_sphere()
    cam = make_camera_ring(1, mesh, 96, elevation=0.0)[0]
    light = np.subtract(cam.eye, cam.target)
    black = _diffuse([0.0, 0.0, 0.0])
    intensity, ambient = 3.0, 0.03
    img = shade_preview(mesh, _flat_maps(roughness=1.0), cam, light, black,
                        light_intensity=intensity, ambient=ambient)
    assert luminance(img).max() <= 0.04 * intensity + ambient
    # with the light behind the viewer the Fresnel term is F0 (up to the tiny
    # perspective spread of v.h), so a black dielectric reflects 0.04 of what a
    # white metal (F0 = 1) reflects
    for r in (0.2, 0.6):
        white = _diffuse([1.0, 1.0, 1.0])
        metal = shade_preview(mesh, _flat_maps(roughness=r, metalness=1.0), cam, light, white,
                              ambient=0.0)
        diel = shade_preview(mesh, _flat_maps(roughness=r), cam, light, black, ambient=0.0)
        assert np.allclose(diel, 0.04 * metal, rtol=1e-6, atol=1e-9)


def test_preview_needs_maps():
    maps = _flat_maps()
    del maps["roughness"]
    with pytest.raises(MissingChannel):
        shade_preview(quad(), maps, _facing_quad_camera(), (0, 0, 1))
