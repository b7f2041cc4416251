"""Ellipsoidal backprojection: baseline reconstruction and sampling PDFs.

Every transient-image entry votes for the voxels whose laser-to-voxel-to-
detector path length falls inside the entry's time bin (an ellipsoidal
shell with the laser and detector as foci). The implementation gathers
voxel-centrically; signed inputs accumulate signed votes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_laplace

from .blobfield import mesh_from_samples
from .kernels import get_backend
from .render import default_threads
from .scene import SceneConfig, TransientImage, TriangleMesh, VolumeSpec

PDF_FLOOR = 1e-6  # uniform mass mixed into sampling PDFs by the optimizer
BASELINE_ISO_FRACTION = 0.5
SHARPEN_SIGMA_VOXELS = 1.0


@dataclass
class DensityVolume:
    """Voxel grid of accumulated votes over the reconstruction box.

    ``resolution`` counts voxels per axis; values sit at voxel centers.
    """

    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray  # (nx, ny, nz)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("values must be a 3D grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("density volume contains non-finite values")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def voxel(self) -> np.ndarray:
        return (self.hi - self.lo) / np.asarray(self.resolution)

    def centers(self) -> np.ndarray:
        """Voxel center coordinates, shape (nx*ny*nz, 3), C order."""
        axes = [self.lo[a] + self.voxel[a] * (np.arange(self.resolution[a]) + 0.5)
                for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    def voxel_index(self, point) -> tuple[int, int, int]:
        idx = np.floor((np.asarray(point) - self.lo) / self.voxel).astype(int)
        return tuple(np.clip(idx, 0, np.asarray(self.resolution) - 1))


def backproject(image: TransientImage, scene: SceneConfig,
                volume: VolumeSpec | None = None,
                resolution=None, n_threads: int = 0,
                backend=None) -> DensityVolume:
    """Accumulate ellipsoidal votes for every image entry.

    ``resolution`` (voxels per axis) overrides the volume's; the volume
    defaults to the scene's reconstruction box.
    """
    if image.values.shape[:2] != (scene.n_lasers, scene.n_detectors):
        raise ValueError("image dimensions do not match scene")
    vol = volume if volume is not None else scene.volume
    res = np.broadcast_to(resolution if resolution is not None
                          else vol.resolution, (3,)).astype(int)
    k = get_backend(backend)
    out = np.zeros(tuple(res), dtype=np.float64)
    voxel = (vol.hi - vol.lo) / res
    k.backproject_gather(image.values, scene.lasers, scene.detectors,
                         image.axis.t0, image.axis.dt, vol.lo, voxel, res,
                         n_threads or default_threads(), out)
    return DensityVolume(vol.lo, vol.hi, out)


def density_to_pdf(volume: DensityVolume, use_abs: bool = True,
                   floor: float = 0.0) -> np.ndarray:
    """Normalized sampling weights over voxels (flattened C order).

    Negative votes contribute their absolute value when ``use_abs``, else
    are clipped to zero. An all-zero volume yields the uniform distribution.
    ``floor`` mixes in that much uniform mass so no voxel is unreachable.
    """
    w = np.abs(volume.values) if use_abs else np.clip(volume.values, 0.0, None)
    w = w.ravel().astype(np.float64)
    total = w.sum()
    if total <= 0.0:
        return np.full(w.size, 1.0 / w.size)
    w = w / total
    if floor > 0.0:
        w = (1.0 - floor) * w + floor / w.size
    return w


def sample_location(pdf: np.ndarray, volume: DensityVolume,
                    rng: np.random.Generator) -> np.ndarray:
    """Draw a voxel by weight and jitter uniformly inside it."""
    flat = int(rng.choice(pdf.size, p=pdf))
    idx = np.unravel_index(flat, volume.resolution)
    corner = volume.lo + volume.voxel * np.asarray(idx, dtype=np.float64)
    return corner + volume.voxel * rng.random(3)


def sharpen(volume: DensityVolume,
            sigma: float = SHARPEN_SIGMA_VOXELS) -> DensityVolume:
    """Laplacian-of-Gaussian sharpening, clamped at zero.

    The negated LoG response peaks on blob-like vote concentrations and
    suppresses the smooth ellipsoidal background.
    """
    out = -gaussian_laplace(volume.values, sigma=sigma, mode="nearest")
    np.clip(out, 0.0, None, out=out)
    return DensityVolume(volume.lo, volume.hi, out)


def baseline_reconstruct(image: TransientImage, scene: SceneConfig,
                         iso_fraction: float = BASELINE_ISO_FRACTION,
                         resolution=None, apply_sharpen: bool = True,
                         n_threads: int = 0, backend=None) -> TriangleMesh:
    """Backprojection baseline: votes, sharpening, isosurface extraction.

    The threshold is ``iso_fraction`` of the filtered volume's maximum.
    """
    if np.any(image.values < 0):
        raise ValueError("baseline reconstruction expects nonnegative input")
    density = backproject(image, scene, resolution=resolution,
                          n_threads=n_threads, backend=backend)
    if apply_sharpen:
        density = sharpen(density)
    peak = density.values.max(initial=0.0)
    if peak <= 0.0:
        return TriangleMesh.empty()
    # voxel centers double as a corner grid for meshing
    origin = density.lo + 0.5 * density.voxel
    return mesh_from_samples(density.values, origin, density.voxel,
                             iso_fraction * peak, backend=backend)
