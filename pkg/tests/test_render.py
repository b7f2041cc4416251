import math

import numpy as np
import pytest

from echotrace.bvh import build_accel
from echotrace.datasets import make_standard_scene, rel_l2_percent
from echotrace.render import (RenderOptions, coupling, footprint_level,
                              reference_render, render, triangle_irradiance)
from echotrace.scene import (BRDF, SceneConfig, TemporalAxis, TriangleMesh,
                             VolumeSpec)

from conftest import simple_scene


def one_triangle_scene():
    """Unit-area triangle, centroid (0,0,45), normal (0,0,-1); laser at
    (45,0,0), detector at (-45,0,0)."""
    scene = SceneConfig(
        wall_point=(0.0, 0.0, 0.0), wall_normal=(0.0, 0.0, 1.0),
        lasers=[[45.0, 0.0, 0.0]], detectors=[[-45.0, 0.0, 0.0]],
        axis=TemporalAxis(80.0, 0.4, 256),
        brdf=BRDF.make_lambertian(0.3),
        volume=VolumeSpec((-40.0, -40.0, 5.0), (40.0, 40.0, 85.0)))
    a = math.sqrt(2.0)
    verts = np.array([[0.0, 0.0, 45.0], [a, 0.0, 45.0], [0.0, a, 45.0]])
    verts[:, :2] -= a / 3.0  # centroid exactly at the origin in x,y
    mesh = TriangleMesh(verts, np.array([[0, 2, 1]], dtype=np.int32))
    return scene, mesh


class TestCoupling:
    def test_facing_points_quarter(self):
        c = coupling([0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, -1], True)
        assert c == pytest.approx(0.25, rel=1e-12)

    def test_invisible_is_zero(self):
        assert coupling([0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, -1],
                        visible=False) == 0.0

    def test_orthogonal_normal_zero(self):
        c = coupling([0, 0, 0], [1, 0, 0], [0, 0, 2], [0, 0, -1], True)
        assert c == 0.0

    def test_coincident_points_raise(self):
        with pytest.raises(ValueError):
            coupling([1, 2, 3], [0, 0, 1], [1, 2, 3], [0, 0, 1], True)


class TestTriangleIrradiance:
    def test_against_independent_scalar(self):
        # independent evaluation of the per-triangle transport product,
        # plain floats throughout (no shared code with the renderer)
        scene, mesh = one_triangle_scene()
        alpha, taus = triangle_irradiance(scene, mesh, build_accel(mesh),
                                          0, 0, 0)
        r_sq = 45.0 * 45.0 + 45.0 * 45.0
        cos_w = 45.0 / math.sqrt(r_sq)   # wall cosine at laser and detector
        eta = cos_w * cos_w / r_sq       # both segments are mirror images
        expected = (0.3 / math.pi) * cos_w * eta * eta * float(mesh.areas[0])
        assert alpha == pytest.approx(expected, rel=1e-9)
        assert alpha == pytest.approx(1.02917e-09, rel=1e-4)
        assert np.all(np.abs(taus - 2 * 45 * math.sqrt(2)) < 0.02)

    def test_back_facing_is_zero(self):
        scene, mesh = one_triangle_scene()
        flipped = TriangleMesh(mesh.vertices, mesh.triangles[:, ::-1])
        alpha, _ = triangle_irradiance(scene, flipped, build_accel(flipped),
                                       0, 0, 0)
        assert alpha == 0.0

    def test_occluded_triangle_is_zero(self):
        # a larger parallel triangle sits right in front of the far one,
        # covering both segment crossing points
        scene, near = one_triangle_scene()
        far = near.translated([0.0, 0.0, 3.0])
        scale = TriangleMesh(near.vertices * np.array([8.0, 8.0, 1.0]),
                             near.triangles)
        mesh = TriangleMesh(np.vstack([scale.vertices, far.vertices]),
                            np.vstack([scale.triangles, far.triangles + 3]))
        accel = build_accel(mesh)
        alpha_near, _ = triangle_irradiance(scene, mesh, accel, 0, 0, 0)
        alpha_far, _ = triangle_irradiance(scene, mesh, accel, 0, 0, 1)
        assert alpha_near > 0.0
        assert alpha_far == 0.0

    def test_degenerate_triangle_zero(self):
        scene, mesh = one_triangle_scene()
        mid = 0.5 * (mesh.vertices[0] + mesh.vertices[1])  # collinear corner
        verts = np.vstack([mesh.vertices, mid])
        tris = np.vstack([mesh.triangles, [[0, 1, 3]]]).astype(np.int32)
        bad = TriangleMesh(verts, tris)
        with np.errstate(all="ignore"):
            alpha, _ = triangle_irradiance(scene, bad, build_accel(bad),
                                           0, 0, 1)
        assert alpha == 0.0


class TestRender:
    def test_empty_mesh_zero_image(self, scene8):
        img = render(scene8, TriangleMesh.empty())
        assert img.values.shape == (1, 64, 128)
        assert not img.values.any()

    def test_single_triangle_total_matches_alpha(self):
        scene, mesh = one_triangle_scene()
        alpha, _ = triangle_irradiance(scene, mesh, build_accel(mesh), 0, 0, 0)
        for opts in (RenderOptions(), RenderOptions(use_filter=False)):
            img = render(scene, mesh, opts)
            assert img.values.sum() == pytest.approx(alpha, rel=1e-12)

    def test_filter_conserves_total_image_mass(self, scene8, blob_mesh):
        on = render(scene8, blob_mesh)
        off = render(scene8, blob_mesh, RenderOptions(use_filter=False))
        assert on.values.sum() == pytest.approx(off.values.sum(), rel=1e-9)

    def test_nonnegative(self, blob_image):
        assert (blob_image.values >= 0.0).all()

    def test_reciprocity(self):
        # swapping the laser spot and detector point yields the same row
        scene, mesh = one_triangle_scene()
        swapped = scene.replace(lasers=scene.detectors.copy(),
                                detectors=scene.lasers.copy())
        a = render(scene, mesh)
        b = render(swapped, mesh)
        assert np.allclose(a.values[0, 0], b.values[0, 0], rtol=1e-12)

    def test_thread_count_determinism(self, scene8, blob_mesh):
        imgs = [render(scene8, blob_mesh, RenderOptions(n_threads=n)).values
                for n in (1, 2, 4)]
        assert np.array_equal(imgs[0], imgs[1])
        assert np.array_equal(imgs[0], imgs[2])

    def test_shadows_off_adds_energy(self):
        scene, mesh = make_standard_scene("two-plates-1laser-8x8x256")
        full = render(scene, mesh)
        noshadow = render(scene, mesh, RenderOptions(use_shadows=False))
        assert noshadow.values.sum() > full.values.sum() * 1.05


class TestReferenceRender:
    def test_level0_equals_unfiltered_render(self, scene8, blob_mesh):
        ref = reference_render(scene8, blob_mesh, 0)
        off = render(scene8, blob_mesh, RenderOptions(use_filter=False))
        assert np.array_equal(ref.values, off.values)

    def test_cauchy_convergence(self):
        # doubling the subdivision changes the reference by a shrinking amount
        scene, mesh = make_standard_scene("unit-square-1laser-8x8x128-quads2")
        scene = scene.replace(axis=TemporalAxis(80.0, 0.1, 512))
        imgs = [reference_render(scene, mesh, lv).values for lv in (0, 1, 2, 3)]
        deltas = [np.linalg.norm((imgs[i + 1] - imgs[i]).ravel())
                  for i in range(3)]
        assert deltas[1] < deltas[0]
        assert deltas[2] < deltas[1]

    def test_render_matches_reference_on_square(self):
        # filtered fast render vs footprint-resolving reference: < 1% rel L2
        scene, mesh = make_standard_scene("plane-1laser-8x8x256-quads32")
        level = footprint_level(scene, mesh, scene.axis.dt / 4.0)
        ref = reference_render(scene, mesh, level)
        fast = render(scene, mesh)
        err = rel_l2_percent(fast.values, ref.values)
        assert err < 1.0

    def test_negative_level_rejected(self, scene8, blob_mesh):
        with pytest.raises(ValueError):
            reference_render(scene8, blob_mesh, -1)


class TestFootprintLevel:
    def test_halving_until_target(self):
        scene, mesh = make_standard_scene("unit-square-1laser-8x8x128")
        lvl_fine = footprint_level(scene, mesh, 0.01)
        lvl_coarse = footprint_level(scene, mesh, 10.0)
        assert lvl_coarse == 0
        assert lvl_fine > 0

    def test_empty_mesh(self, scene8):
        assert footprint_level(scene8, TriangleMesh.empty(), 0.1) == 0
