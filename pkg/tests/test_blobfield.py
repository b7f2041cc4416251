import math

import numpy as np
import pytest

from echotrace.blobfield import (BlobSet, eval_field, extract_mesh,
                                 iso_radius, sample_grid)
from echotrace.scene import VolumeSpec


def cube_grid(lo, hi, res):
    return VolumeSpec((lo,) * 3, (hi,) * 3, (res,) * 3)


class TestEvalField:
    def test_peak_is_one(self):
        blobs = BlobSet.from_blobs([((1.0, 2.0, 3.0), 2.0)])
        assert eval_field(blobs, [1.0, 2.0, 3.0]) == pytest.approx(1.0)

    def test_analytic_kernel_value(self):
        blobs = BlobSet.from_blobs([((0.0, 0.0, 0.0), 2.0)])
        val = eval_field(blobs, [2.0, 0.0, 0.0])
        assert val == pytest.approx(math.exp(-0.5), rel=1e-12)
        assert val == pytest.approx(0.606531, abs=1e-6)

    def test_superposition(self):
        blobs = BlobSet.from_blobs([((0.0, 0.0, 0.0), 1.5)] * 2)
        assert eval_field(blobs, [0.0, 0.0, 0.0]) == pytest.approx(2.0)

    def test_empty_set(self):
        assert eval_field(BlobSet(), [0.0, 0.0, 0.0]) == 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        rows = np.column_stack([rng.uniform(-5, 5, (6, 3)),
                                rng.uniform(0.5, 2.0, 6)])
        pts = rng.uniform(-6, 6, (50, 3))
        a = eval_field(BlobSet(rows), pts)
        b = eval_field(BlobSet(rows[rng.permutation(6)]), pts)
        assert np.allclose(a, b, rtol=1e-12)

    def test_sigma_floor_enforced(self):
        with pytest.raises(ValueError):
            BlobSet.from_blobs([((0.0, 0.0, 0.0), 1e-5)])


class TestExtractMesh:
    def test_empty_blobset(self):
        mesh = extract_mesh(BlobSet(), cube_grid(-10, 10, 32))
        assert mesh.is_empty()

    def test_sphere_radius(self):
        # iso crossing of a sigma=5 blob: r* = 5*sqrt(2*ln(4/3))
        blobs = BlobSet.from_blobs([((0.0, 0.0, 0.0), 5.0)])
        grid = cube_grid(-12.0, 12.0, 128)
        mesh = extract_mesh(blobs, grid)
        r = np.linalg.norm(mesh.vertices, axis=1)
        r_star = 5.0 * math.sqrt(2.0 * math.log(4.0 / 3.0))
        assert r_star == pytest.approx(3.7926, abs=1e-3)
        assert abs(r.mean() - r_star) / r_star < 0.02

    def test_blob_outside_grid(self):
        blobs = BlobSet.from_blobs([((100.0, 100.0, 100.0), 2.0)])
        mesh = extract_mesh(blobs, cube_grid(-10, 10, 24))
        assert mesh.is_empty()

    def test_vertices_on_level_set(self):
        # |field(v) - iso| small at 128^3 for sigma >= 2 voxel widths
        blobs = BlobSet.from_blobs([((1.0, -2.0, 0.5), 2.0),
                                    ((-2.0, 1.0, -1.0), 3.0)])
        grid = cube_grid(-10.0, 10.0, 128)  # voxel 0.157, sigma >> 2 voxels
        mesh = extract_mesh(blobs, grid)
        vals = eval_field(blobs, mesh.vertices)
        assert np.abs(vals - 0.75).max() <= 0.1

    def test_monotone_refinement(self):
        blobs = BlobSet.from_blobs([((0.5, 0.0, -0.3), 2.5)])
        residuals = []
        for res in (32, 64, 128):
            mesh = extract_mesh(blobs, cube_grid(-8.0, 8.0, res))
            vals = eval_field(blobs, mesh.vertices)
            residuals.append(np.abs(vals - 0.75).mean())
        assert residuals[1] <= residuals[0]
        assert residuals[2] <= residuals[1]

    def test_translation_equivariance(self):
        blobs = BlobSet.from_blobs([((0.0, 0.0, 0.0), 2.0),
                                    ((3.0, 1.0, 0.0), 1.5)])
        grid = cube_grid(-16.0, 16.0, 128)
        shift = np.array([0.5, -0.25, 0.125])  # fraction of the 0.25 voxel
        moved = BlobSet(np.column_stack([blobs.centers + shift, blobs.sigmas]))
        a = extract_mesh(blobs, grid)
        b = extract_mesh(moved, grid)
        # compare mean vertex position: re-gridding moves vertices < 1 voxel
        voxel = grid.step.max()
        assert np.linalg.norm((b.vertices.mean(axis=0)
                               - a.vertices.mean(axis=0)) - shift) < voxel

    def test_outward_normals(self):
        blobs = BlobSet.from_blobs([((0.0, 0.0, 0.0), 3.0)])
        mesh = extract_mesh(blobs, cube_grid(-8.0, 8.0, 64))
        dots = np.einsum("ij,ij->i", mesh.normals, mesh.centroids)
        assert (dots > 0).all()  # outward = along decreasing field

    def test_against_skimage_oracle(self):
        # independent marching cubes implementation as cross-check
        skimage = pytest.importorskip("skimage.measure")
        blobs = BlobSet.from_blobs([((0.4, -0.7, 1.1), 2.0),
                                    ((-2.0, 1.5, -0.6), 2.8)])
        grid = cube_grid(-9.0, 9.0, 72)
        samples = sample_grid(blobs, grid)
        mine = extract_mesh(blobs, grid)
        verts, faces, _, _ = skimage.marching_cubes(
            samples, level=0.75, spacing=tuple(grid.step),
            method="lorensen")
        verts = verts + np.asarray(grid.lo)
        # same surface: compare total area and vertex iso-residuals
        def area(v, f):
            t = v[f]
            return 0.5 * np.linalg.norm(
                np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1).sum()
        a_mine = area(mine.vertices, mine.triangles)
        a_ref = area(verts, faces)
        assert a_mine == pytest.approx(a_ref, rel=1e-6)
        assert np.abs(eval_field(blobs, verts) - 0.75).max() <= 0.1


class TestFlattening:
    def test_order_stable(self):
        blobs = BlobSet.from_blobs([((1.0, 2.0, 3.0), 0.5),
                                    ((4.0, 5.0, 6.0), 0.7)])
        flat = blobs.flatten()
        assert flat.tolist() == [1, 2, 3, 0.5, 4, 5, 6, 0.7]
        assert BlobSet.from_flat(flat) == blobs

    def test_nearest_tie_lower_index(self):
        blobs = BlobSet.from_blobs([((1.0, 0.0, 0.0), 1.0),
                                    ((-1.0, 0.0, 0.0), 1.0)])
        assert blobs.nearest([0.0, 0.0, 0.0]) == 0
