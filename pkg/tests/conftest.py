import numpy as np
import pytest

from echotrace.blobfield import BlobSet, extract_mesh
from echotrace.render import render
from echotrace.scene import (BRDF, SceneConfig, TemporalAxis, VolumeSpec)


def simple_scene(n_lasers=1, nx=8, ny=8, n_bins=128, dt=0.4, t0=80.0,
                 albedo=0.3):
    """Small wall scene in the standard layout for fast unit tests."""
    from echotrace.datasets import LASER_SPOTS_4, detector_grid
    return SceneConfig(
        wall_point=(0.0, 0.0, 0.0), wall_normal=(0.0, 0.0, 1.0),
        lasers=LASER_SPOTS_4[:n_lasers], detectors=detector_grid(nx, ny),
        axis=TemporalAxis(t0, dt, n_bins),
        brdf=BRDF.make_lambertian(albedo),
        volume=VolumeSpec((-40.0, -40.0, 5.0), (40.0, 40.0, 85.0)),
        detector_shape=(nx, ny))


@pytest.fixture(scope="session")
def scene8():
    return simple_scene()


@pytest.fixture(scope="session")
def blob_mesh():
    """Mesh of a single blob, ~100 triangles."""
    blobs = BlobSet.from_blobs([((3.0, -2.0, 45.0), 3.0)])
    grid = VolumeSpec((-10.0, -15.0, 32.0), (16.0, 11.0, 58.0), (40, 40, 40))
    return extract_mesh(blobs, grid)


@pytest.fixture(scope="session")
def blob_image(scene8, blob_mesh):
    return render(scene8, blob_mesh)
