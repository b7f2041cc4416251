"""Implicit geometry: isotropic Gaussian blob field and isosurface meshing.

The scalar field is a plain sum of Gaussian kernels; the surface is its
iso-3/4 level set, extracted with marching cubes on a corner-sampled grid.
Triangles are wound so normals point along the negative field gradient,
i.e. outward from the blobs.
"""

from __future__ import annotations

import numpy as np

from .kernels import get_backend
from .scene import TriangleMesh, VolumeSpec

ISO_DEFAULT = 0.75
SIGMA_MIN = 1e-3        # world units; lower bound on blob width
GAUSS_TRUNC = 4.0       # kernel truncation radius in standard deviations


class BlobSet:
    """Ordered set of (center, sigma) blobs; the optimization variable.

    Backed by an (m, 4) float array in (x, y, z, sigma) order, which is also
    the stable parameter flattening order.
    """

    def __init__(self, data=None):
        if data is None:
            data = np.zeros((0, 4), dtype=np.float64)
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if data.size == 0:
            data = data.reshape(0, 4)
        if data.shape[1] != 4:
            raise ValueError("blob data must be (m, 4): x y z sigma")
        if np.any(data[:, 3] < SIGMA_MIN):
            raise ValueError(f"sigma below minimum {SIGMA_MIN}")
        self.data = np.ascontiguousarray(data)
        self.data.flags.writeable = False

    @classmethod
    def from_blobs(cls, blobs) -> "BlobSet":
        """Build from an iterable of (center, sigma) pairs."""
        rows = [np.concatenate([np.asarray(c, dtype=np.float64).reshape(3),
                                [float(s)]]) for c, s in blobs]
        return cls(np.array(rows) if rows else None)

    def __len__(self) -> int:
        return len(self.data)

    def __eq__(self, other) -> bool:
        return isinstance(other, BlobSet) and np.array_equal(self.data, other.data)

    @property
    def centers(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def sigmas(self) -> np.ndarray:
        return self.data[:, 3]

    def flatten(self) -> np.ndarray:
        """Parameter vector (x1, y1, z1, s1, x2, ...), length 4m."""
        return self.data.ravel().copy()

    @classmethod
    def from_flat(cls, params) -> "BlobSet":
        return cls(np.asarray(params, dtype=np.float64).reshape(-1, 4))

    def with_rows(self, rows: np.ndarray) -> "BlobSet":
        return BlobSet(rows)

    def appended(self, center, sigma: float) -> "BlobSet":
        row = np.concatenate([np.asarray(center, dtype=np.float64).reshape(3),
                              [float(sigma)]])
        return BlobSet(np.vstack([self.data, row]) if len(self) else row[None])

    def removed(self, index: int) -> "BlobSet":
        return BlobSet(np.delete(self.data, index, axis=0))

    def nearest(self, point) -> int:
        """Index of the blob whose center is closest to ``point``."""
        if not len(self):
            raise ValueError("empty blob set")
        d = np.linalg.norm(self.centers - np.asarray(point, dtype=np.float64),
                           axis=1)
        return int(np.argmin(d))  # argmin takes the lowest index on ties


def eval_field(blobs: BlobSet, points, backend=None) -> np.ndarray:
    """Field value(s) at one or more points (kernels truncated at 4 sigma)."""
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    if not len(blobs):
        out = np.zeros(1 if single else len(points))
        return float(out[0]) if single else out
    from .kernels import fallback
    out = fallback.eval_field_points(blobs.centers, blobs.sigmas,
                                     points.reshape(-1, 3), GAUSS_TRUNC)
    return float(out[0]) if single else out


def sample_grid(blobs: BlobSet, grid: VolumeSpec, backend=None) -> np.ndarray:
    """Corner samples of the blob field over ``grid``."""
    k = get_backend(backend)
    if not len(blobs):
        return np.zeros(grid.resolution, dtype=np.float64)
    return k.sample_field_grid(blobs.centers, blobs.sigmas, grid.lo,
                               grid.step, grid.resolution, GAUSS_TRUNC)


def extract_mesh(blobs: BlobSet, grid: VolumeSpec, iso: float = ISO_DEFAULT,
                 backend=None) -> TriangleMesh:
    """Marching-cubes mesh of the iso level set; empty when never crossed."""
    k = get_backend(backend)
    samples = sample_grid(blobs, grid, backend)
    if not (samples.max(initial=0.0) >= iso):
        return TriangleMesh.empty()
    verts, tris = k.marching_cubes(samples, iso, grid.lo, grid.step)
    return TriangleMesh(verts, tris)


def mesh_from_samples(samples: np.ndarray, grid_lo, grid_step, iso: float,
                      backend=None) -> TriangleMesh:
    """Marching cubes over an arbitrary corner-sampled scalar field."""
    k = get_backend(backend)
    samples = np.asarray(samples, dtype=np.float64)
    if not (samples.max(initial=0.0) >= iso):
        return TriangleMesh.empty()
    verts, tris = k.marching_cubes(samples, iso, grid_lo, grid_step)
    return TriangleMesh(verts, tris)


def iso_radius(sigma: float, iso: float = ISO_DEFAULT) -> float:
    """Radius at which a unit blob of width sigma crosses the iso value."""
    return sigma * np.sqrt(-2.0 * np.log(iso))
