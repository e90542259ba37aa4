"""Software rasterizer and local-raymarch tests.

Coverage oracles are hand-placed triangles in pixel coordinates; the local
march is checked against the same analytic constant-density slab identities
used for the full raymarcher.
"""

import math

import numpy as np
import pytest
import torch
from conftest import psnr

from volrig.field import BoundingBox, FactorizedField, GridDims
from volrig.rasterrender import (BenchReport, Framebuffer, LocalMarchConfig,
                                 RasterError, bench, interpolate_inverse,
                                 local_march, rasterize, render_realtime)
from volrig.raymarch import Camera, RenderConfig, render_deformed
from volrig.skinning import (Pose, Skeleton, SkinnedTemplate, bone_affines,
                             pose_mesh)
from volrig.synthetic import look_at_camera


def ortho_like_camera(size=8, z=10.0, f=None):
    """Camera at -z on the z axis looking +z; large focal approximates
    pixel-aligned screen coordinates at the z=0 plane."""
    f = f if f is not None else z  # 1 world unit -> 1 pixel at plane z=0
    return Camera(fx=f, fy=f, cx=0.0, cy=0.0,
                  rotation=torch.eye(3, dtype=torch.float64),
                  translation=torch.tensor([0.0, 0.0, z], dtype=torch.float64),
                  width=size, height=size)


def tri_verts(pts2d, z=0.0):
    """World-space triangle whose projection equals `pts2d` in pixels for
    ortho_like_camera (camera at (0,0,-z0), focal z0, principal point 0)."""
    return torch.tensor([[x, y, z] for x, y in pts2d], dtype=torch.float64)


class TestRasterizeCoverage:
    def test_covers_interior_pixels(self):
        cam = ortho_like_camera(8)
        v = tri_verts([(0.0, 0.0), (6.0, 0.0), (0.0, 6.0)])
        fb = rasterize(v, np.array([[0, 1, 2]]), cam, cull_backfaces=False)
        # pixel centers strictly inside x+y<6, x>=0, y>=0
        assert fb.face_id[1, 1] == 0
        assert fb.face_id[2, 3] == 0
        assert fb.face_id[7, 7] == -1
        assert not fb.covered[5, 5] or (5 + 5) < 6

    def test_shared_edge_no_double_no_gap(self):
        # split a square into two triangles along the diagonal; every pixel
        # inside the square is covered by exactly one triangle
        cam = ortho_like_camera(8)
        v = tri_verts([(0.0, 0.0), (7.0, 0.0), (7.0, 7.0), (0.0, 7.0)])
        faces = np.array([[0, 1, 2], [0, 2, 3]])
        fb = rasterize(v, faces, cam, cull_backfaces=False)
        fa = rasterize(v, faces[:1], cam, cull_backfaces=False)
        fc = rasterize(v, faces[1:], cam, cull_backfaces=False)
        inside = fb.covered
        both = fa.covered & fc.covered
        neither = inside & ~(fa.covered | fc.covered)
        assert not both.any()       # no double-shading on the shared diagonal
        assert not neither.any()    # no gap
        # interior pixels of the square are all covered
        assert inside[1:7, 1:7].all()

    def test_vertex_barycentrics(self):
        cam = ortho_like_camera(16)
        v = tri_verts([(1.0, 1.0), (9.0, 1.0), (1.0, 9.0)])
        fb = rasterize(v, np.array([[0, 1, 2]]), cam, cull_backfaces=False)
        # pixel at a vertex location carries that vertex's full weight
        assert fb.covered[1, 1]
        assert np.allclose(fb.barycentrics[1, 1], [1.0, 0.0, 0.0], atol=1e-9)
        # centroid pixel: equal thirds (flat triangle -> affine = perspective)
        cy, cx = 3, 3  # centroid of (1,1),(9,1),(1,9) is (11/3, 11/3)
        b = fb.barycentrics[4, 4]
        assert abs(b.sum() - 1.0) < 1e-12

    def test_barycentrics_reconstruct_position(self):
        cam = ortho_like_camera(16)
        pts = [(1.0, 1.0), (13.0, 2.0), (3.0, 12.0)]
        v = tri_verts(pts, z=0.0)
        fb = rasterize(v, np.array([[0, 1, 2]]), cam, cull_backfaces=False)
        ys, xs = np.nonzero(fb.covered)
        P = np.array(pts)
        for y, x in zip(ys, xs):
            rec = fb.barycentrics[y, x] @ P
            assert np.allclose(rec, [x, y], atol=1e-9)

    def test_depth_test_keeps_nearest(self):
        cam = ortho_like_camera(8)
        far = tri_verts([(0.0, 0.0), (7.0, 0.0), (0.0, 7.0)], z=2.0)
        near = tri_verts([(0.0, 0.0), (7.0, 0.0), (0.0, 7.0)], z=-2.0)
        v = torch.cat([far, near])
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        fb = rasterize(v, faces, cam, cull_backfaces=False)
        covered = fb.covered
        assert (fb.face_id[covered] == 1).all()
        assert np.allclose(fb.depth[covered], 8.0)  # camera z=10 -> plane -2

    def test_behind_camera_dropped(self):
        cam = ortho_like_camera(8)
        v = tri_verts([(0.0, 0.0), (7.0, 0.0), (0.0, 7.0)], z=-20.0)
        fb = rasterize(v, np.array([[0, 1, 2]]), cam)
        assert not fb.covered.any()

    def test_backface_cull(self):
        cam = ortho_like_camera(8)
        v = tri_verts([(0.0, 0.0), (7.0, 0.0), (0.0, 7.0)])
        # winding 0,1,2 has normal -z (towards camera at -z): front-facing
        front = rasterize(v, np.array([[0, 1, 2]]), cam, cull_backfaces=True)
        back = rasterize(v, np.array([[0, 2, 1]]), cam, cull_backfaces=True)
        assert front.covered.any() != back.covered.any()
        both = rasterize(v, np.array([[0, 2, 1]]), cam, cull_backfaces=False)
        assert both.covered.any()

    def test_empty_faces(self):
        cam = ortho_like_camera(4)
        fb = rasterize(torch.zeros(0, 3, dtype=torch.float64),
                       np.zeros((0, 3), dtype=np.int64), cam)
        assert not fb.covered.any()

    def test_deterministic(self):
        cam = ortho_like_camera(16)
        rng = np.random.default_rng(0)
        v = torch.from_numpy(rng.uniform(-6, 6, (30, 3)))
        faces = rng.integers(0, 30, (40, 3))
        a = rasterize(v, faces, cam, cull_backfaces=False)
        b = rasterize(v, faces, cam, cull_backfaces=False)
        assert np.array_equal(a.face_id, b.face_id)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.barycentrics, b.barycentrics)


class TestInterpolateInverse:
    def test_identity_at_rest(self, two_bone):
        # at the rest pose every vertex inverse is the identity affine, so any
        # barycentric mix is the identity too
        n = 3
        idx = np.zeros((n, 4), dtype=np.int64)
        idx[:, 1] = 1
        w = torch.tensor([[1.0, 0, 0, 0], [0.5, 0.5, 0, 0], [0, 1.0, 0, 0]],
                         dtype=torch.float64)
        tmpl = SkinnedTemplate(torch.eye(3, dtype=torch.float64),
                               np.array([[0, 1, 2]]), idx, w)
        posed = pose_mesh(tmpl, bone_affines(two_bone, Pose.identity(2)))
        bary = np.array([[0.2, 0.3, 0.5]])
        out = interpolate_inverse(bary, np.array([[0, 1, 2]]),
                                  posed.inverse_affines)
        expect = torch.cat([torch.eye(3, dtype=torch.float64),
                            torch.zeros(3, 1, dtype=torch.float64)], dim=1)
        assert torch.allclose(out[0], expect, atol=1e-12)

    def test_elementwise_mix(self):
        inv = torch.zeros(2, 3, 4, dtype=torch.float64)
        inv[0] = 1.0
        inv[1] = 3.0
        bary = np.array([[0.25, 0.75, 0.0]])
        out = interpolate_inverse(bary, np.array([[0, 1, 1]]), inv)
        assert torch.allclose(out, torch.full((1, 3, 4), 2.5,
                                              dtype=torch.float64))


def constant_density_field(raw=1.0, gain=1.0):
    bbox = BoundingBox(torch.tensor([-10.0, -10.0, -10.0]),
                       torch.tensor([10.0, 10.0, 10.0]))
    f = FactorizedField(GridDims(2, 2, 2), bbox, r_sigma=1, r_c=1, gain=gain,
                        dtype=torch.float64)
    with torch.no_grad():
        f.density.plane_yx.fill_(raw)
        f.density.line_z.fill_(1.0)
    return f


def identity_affines(n):
    out = torch.zeros(n, 3, 4, dtype=torch.float64)
    out[:, :, :3] = torch.eye(3, dtype=torch.float64)
    return out


class TestLocalMarch:
    def test_constant_slab_opacity(self):
        # raw=0 -> sigma = ln 2; opacity of a length-L segment is
        # 1 - exp(-L ln 2) = 1 - 2^-L
        f = constant_density_field(raw=0.0)
        origins = torch.tensor([[0.0, 0.0, -5.0]], dtype=torch.float64)
        dirs = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        t_hit = torch.tensor([5.0], dtype=torch.float64)
        for n_local in (4, 16, 64):
            _, resid = local_march(f, origins, dirs, t_hit,
                                   identity_affines(1), n_local, 1.0)
            # constant density: midpoint quadrature is exact, L = 2
            assert float(resid) == pytest.approx(2.0 ** -2.0, rel=1e-12)

    def test_zero_density_transparent(self):
        f = constant_density_field(raw=-80.0)
        origins = torch.zeros(1, 3, dtype=torch.float64)
        dirs = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        color, resid = local_march(f, origins, dirs,
                                   torch.tensor([1.0], dtype=torch.float64),
                                   identity_affines(1), 8, 0.5)
        assert float(resid) == pytest.approx(1.0)
        assert torch.allclose(color, torch.zeros(1, 3, dtype=torch.float64))

    def test_saturation_with_width(self):
        f = constant_density_field(raw=5.0)  # sigma = softplus(5) ~ 5.007
        origins = torch.zeros(1, 3, dtype=torch.float64)
        dirs = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        t = torch.tensor([5.0], dtype=torch.float64)
        resids = []
        for hw in (0.25, 0.5, 1.0, 2.0):
            _, r = local_march(f, origins, dirs, t, identity_affines(1), 16, hw)
            resids.append(float(r))
        # residual transmittance decreases monotonically with segment width
        assert all(a > b for a, b in zip(resids, resids[1:]))
        assert resids[-1] < 1e-8

    def test_clamps_segment_at_origin(self):
        # field occupies z >= 0 only (sigma = ln 2 inside); origin sits just
        # inside at z = 0.5 with t_hit = 0.  Samples at negative t clamp to
        # the origin, which is dense, so the full 2-unit optical length is
        # accumulated: residual 2^-2.  Unclamped sampling would put half the
        # segment in empty space (z < 0... outside the box) giving 2^-1.5.
        bbox = BoundingBox(torch.tensor([-10.0, -10.0, 0.0]),
                           torch.tensor([10.0, 10.0, 10.0]))
        f = FactorizedField(GridDims(2, 2, 2), bbox, r_sigma=1, r_c=1,
                            gain=1.0, dtype=torch.float64)
        with torch.no_grad():
            f.density.plane_yx.fill_(0.0)
            f.density.line_z.fill_(1.0)
        origins = torch.tensor([[0.0, 0.0, 0.5]], dtype=torch.float64)
        dirs = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        _, resid = local_march(f, origins, dirs,
                               torch.tensor([0.0], dtype=torch.float64),
                               identity_affines(1), 64, 1.0)
        assert float(resid) == pytest.approx(2.0 ** -2.0, rel=1e-9)

    def test_affine_maps_samples(self):
        # translate samples outside the field bbox -> fully transparent
        f = constant_density_field(raw=2.0)
        inv = identity_affines(1)
        inv[0, :, 3] = torch.tensor([100.0, 0.0, 0.0])
        origins = torch.zeros(1, 3, dtype=torch.float64)
        dirs = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        _, resid = local_march(f, origins, dirs,
                               torch.tensor([1.0], dtype=torch.float64),
                               inv, 8, 0.5)
        assert float(resid) == pytest.approx(1.0)


@pytest.fixture(scope="module")
def phantom_rt(sphere_phantom):
    """Single-bone rig around the phantom sphere for end-to-end RT tests."""
    skel = Skeleton(np.array([-1], dtype=np.int64),
                    torch.zeros(1, 3, dtype=torch.float64))
    # icosphere-ish template: subdivide an octahedron onto the iso sphere
    from volrig.synthetic import capsule_mesh
    r = sphere_phantom.iso_radius
    # near-degenerate capsule: two hemispherical caps ~ a sphere of radius r
    verts, faces = capsule_mesh(np.array([-1e-3, 0.0, 0.0]),
                                np.array([1e-3, 0.0, 0.0]), r,
                                n_seg=24, n_rings=2, n_cap=10)
    n = verts.shape[0]
    idx = np.zeros((n, 4), dtype=np.int64)
    w = torch.zeros(n, 4, dtype=torch.float64)
    w[:, 0] = 1.0
    tmpl = SkinnedTemplate(torch.as_tensor(verts, dtype=torch.float64),
                           faces, idx, w)
    cam = look_at_camera(np.array([0.0, 0.0, -2.5]), np.zeros(3), 96)
    return sphere_phantom, skel, tmpl, cam


class TestRenderRealtime:
    def test_matches_full_render(self, phantom_rt):
        phantom, skel, tmpl, cam = phantom_rt
        cfg = LocalMarchConfig(n_local=32, half_width=0.5)
        rt = render_realtime(phantom.field, tmpl, skel, Pose.identity(1),
                             cam, cfg)
        full = render_deformed(phantom.field, tmpl, skel, Pose.identity(1),
                               cam, RenderConfig(n_samples=256, tau=10.0))
        # the error floor is the silhouette ring: rays that miss the mesh but
        # clip the density tail outside the iso-surface get pure background
        assert psnr(rt.color, full.color) > 24.0

    def test_uncovered_pixels_background(self, phantom_rt):
        phantom, skel, tmpl, cam = phantom_rt
        cfg = LocalMarchConfig(n_local=8, background=(0.2, 0.4, 0.6))
        out = render_realtime(phantom.field, tmpl, skel, Pose.identity(1),
                              cam, cfg)
        assert np.allclose(out.color[0, 0], [0.2, 0.4, 0.6])
        assert out.opacity[0, 0] == 0.0

    def test_quality_improves_with_n_local(self, phantom_rt):
        phantom, skel, tmpl, cam = phantom_rt
        full = render_deformed(phantom.field, tmpl, skel, Pose.identity(1),
                               cam, RenderConfig(n_samples=256, tau=10.0))
        scores = []
        for n in (2, 8, 32):
            cfg = LocalMarchConfig(n_local=n, half_width=0.35)
            out = render_realtime(phantom.field, tmpl, skel, Pose.identity(1),
                                  cam, cfg)
            scores.append(psnr(out.color, full.color))
        assert scores[0] < scores[-1]

    def test_deterministic(self, phantom_rt):
        phantom, skel, tmpl, cam = phantom_rt
        a = render_realtime(phantom.field, tmpl, skel, Pose.identity(1), cam)
        b = render_realtime(phantom.field, tmpl, skel, Pose.identity(1), cam)
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.depth, b.depth)

    def test_config_validation(self):
        with pytest.raises(RasterError):
            LocalMarchConfig(n_local=0)
        with pytest.raises(RasterError):
            LocalMarchConfig(half_width=-1.0)


class TestBench:
    def test_report(self, phantom_rt):
        phantom, skel, tmpl, cam = phantom_rt
        rep = bench(phantom.field, tmpl, skel, [Pose.identity(1)], cam,
                    LocalMarchConfig(n_local=8, half_width=0.35),
                    RenderConfig(n_samples=64, tau=10.0), frames=3, warmup=1)
        assert isinstance(rep, BenchReport)
        assert rep.frames == 3
        assert rep.ms_full > 0 and rep.ms_local > 0
        assert rep.speedup == pytest.approx(rep.ms_full / rep.ms_local)
        assert math.isfinite(rep.psnr_vs_full)
        d = rep.record()
        assert set(d) == {"resolution", "n_local", "ms_full", "ms_local",
                          "speedup", "psnr_vs_full", "frames"}
        assert "speedup" in rep.text()

    def test_requires_pose(self, phantom_rt):
        phantom, skel, tmpl, cam = phantom_rt
        with pytest.raises(RasterError):
            bench(phantom.field, tmpl, skel, [], cam)
