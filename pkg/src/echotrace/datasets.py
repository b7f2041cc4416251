"""Standard scenes, measurement degradation, preprocessing and metrics.

Scene presets follow the common evaluation layout: diffuse wall at z=0 with
normal +z, object centered at z=45, detector grid spanning an 80x80 area
around the origin, laser spots on the wall at (+-45,0,0) and (0,+-45,0),
0.4-unit time bins starting at path length 80.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d, uniform_filter1d

from .blobfield import BlobSet, extract_mesh
from .bvh import ray_first_hits
from .scene import (BRDF, SceneConfig, TemporalAxis, TransientImage,
                    TriangleMesh, VolumeSpec)

LASER_SPOTS_4 = np.array([[45.0, 0, 0], [-45.0, 0, 0],
                          [0, 45.0, 0], [0, -45.0, 0]])
DETECTOR_SPAN = 80.0
OBJECT_ALBEDO = 0.3


# ---------------------------------------------------------------------------
# scene presets


def detector_grid(nx: int, ny: int, span: float = DETECTOR_SPAN) -> np.ndarray:
    """Cell-center grid of observed wall points on z=0, (ix-major) C order."""
    xs = -span / 2 + span / nx * (np.arange(nx) + 0.5)
    ys = -span / 2 + span / ny * (np.arange(ny) + 0.5)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx, gy, np.zeros_like(gx)], axis=-1)
    return pts.reshape(-1, 3)


def _plate(center, size, quads, normal_sign=-1.0) -> TriangleMesh:
    """Square plate parallel to the wall, wound to face it (normal -z)."""
    cx, cy, cz = center
    n = quads + 1
    xs = cx + np.linspace(-size / 2, size / 2, n)
    ys = cy + np.linspace(-size / 2, size / 2, n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([gx, gy, np.full_like(gx, cz)], axis=-1).reshape(-1, 3)
    tris = []
    for i in range(quads):
        for j in range(quads):
            v00 = i * n + j
            v10 = (i + 1) * n + j
            v01 = i * n + j + 1
            v11 = (i + 1) * n + j + 1
            if normal_sign < 0:  # counterclockwise seen from -z
                tris.append([v00, v01, v10])
                tris.append([v01, v11, v10])
            else:
                tris.append([v00, v10, v01])
                tris.append([v01, v10, v11])
    return TriangleMesh(verts, np.asarray(tris, dtype=np.int32))


BUNNY_CLASS_BLOBS = BlobSet.from_blobs([
    ((0.0, 0.0, 47.0), 6.0),      # body
    ((5.0, 3.0, 40.0), 4.0),      # head, offset toward the wall
    ((8.0, 9.0, 40.0), 2.0),      # ear
    ((1.0, 10.0, 44.0), 2.5),     # ear
    ((-6.0, -6.0, 44.0), 3.5),    # haunch
])


def _parse_preset(name: str):
    tokens = name.split("-")
    obj_parts = []
    n_lasers = 4
    dims = (16, 16, 256)
    quads = None
    for tok in tokens:
        m = re.fullmatch(r"(\d+)laser", tok)
        if m:
            n_lasers = int(m.group(1))
            continue
        m = re.fullmatch(r"(\d+)x(\d+)x(\d+)", tok)
        if m:
            dims = tuple(int(g) for g in m.groups())
            continue
        m = re.fullmatch(r"quads(\d+)", tok)
        if m:
            quads = int(m.group(1))
            continue
        obj_parts.append(tok)
    return "-".join(obj_parts) or "two-blob", n_lasers, dims, quads


def make_standard_scene(preset: str):
    """Build (SceneConfig, ground-truth TriangleMesh) for a named preset.

    Object names: "two-blob", "unit-square", "two-plates", "plane",
    "bunny-class". Optional tokens select variants, e.g.
    "two-blob-1laser-16x16x256" or "plane-quads128-128x128x192".
    """
    obj, n_lasers, (nx, ny, n_bins), quads = _parse_preset(preset)
    if n_lasers not in (1, 4):
        raise ValueError("presets define 1 or 4 laser spots")
    lasers = LASER_SPOTS_4[:1] if n_lasers == 1 else LASER_SPOTS_4
    axis = TemporalAxis(t0=80.0, dt=0.4, n_bins=n_bins)
    volume = VolumeSpec(lo=(-40.0, -40.0, 5.0), hi=(40.0, 40.0, 85.0))
    scene = SceneConfig(
        wall_point=(0.0, 0.0, 0.0), wall_normal=(0.0, 0.0, 1.0),
        lasers=lasers, detectors=detector_grid(nx, ny), axis=axis,
        brdf=BRDF.make_lambertian(OBJECT_ALBEDO), volume=volume,
        detector_shape=(nx, ny))

    if obj == "two-blob":
        blobs = BlobSet.from_blobs([((-10.0, 0.0, 45.0), 3.0),
                                    ((10.0, 0.0, 45.0), 3.0)])
        mesh = extract_mesh(blobs, volume.with_resolution(128))
    elif obj == "unit-square":
        mesh = _plate((0.0, 0.0, 45.0), 1.0, quads or 1)
    elif obj == "plane":
        mesh = _plate((0.0, 0.0, 45.0), 40.0, quads or 16)
    elif obj == "two-plates":
        q = quads or 32
        near = _plate((0.0, 0.0, 40.0), 24.0, q)
        far = _plate((12.0, 0.0, 50.0), 24.0, q)
        mesh = TriangleMesh(
            np.vstack([near.vertices, far.vertices]),
            np.vstack([near.triangles,
                       far.triangles + near.n_vertices]))
    elif obj == "bunny-class":
        mesh = extract_mesh(BUNNY_CLASS_BLOBS, volume.with_resolution(128))
    else:
        raise ValueError(f"unknown preset object {obj!r}")
    return scene, mesh


# ---------------------------------------------------------------------------
# degradation


@dataclass(frozen=True)
class DegradationSpec:
    """Resolution reduction, temporal blur and photon noise parameters."""

    spatial: int = 1          # detector-grid decimation factor per axis
    temporal: int = 1         # bin aggregation factor
    poisson_scale: float | None = None  # expected counts at the image max
    blur_bins: int = 1        # temporal box width (odd); 1 disables
    seed: int = 0

    def __post_init__(self):
        if self.spatial < 1 or self.temporal < 1:
            raise ValueError("factors must be positive integers")
        if self.blur_bins < 1 or self.blur_bins % 2 == 0:
            raise ValueError("blur width must be odd")


def degrade(image: TransientImage, spec: DegradationSpec) -> TransientImage:
    """Apply the degradation chain: spatial averaging, temporal summation,
    box blur, then Poisson counts (reproducible from spec.seed).

    Spatial decimation averages detector blocks (requires detector_shape);
    temporal aggregation sums bin groups, preserving total counts.
    """
    values = image.values
    axis = image.axis
    shape = image.detector_shape
    if spec.spatial > 1:
        if shape is None:
            raise ValueError("spatial decimation needs a detector grid shape")
        nx, ny = shape
        f = spec.spatial
        if nx % f or ny % f:
            raise ValueError("spatial factor must divide the detector grid")
        v = values.reshape(len(values), nx // f, f, ny // f, f, axis.n_bins)
        values = v.mean(axis=(2, 4)).reshape(len(values), -1, axis.n_bins)
        shape = (nx // f, ny // f)
    if spec.temporal > 1:
        g = spec.temporal
        if axis.n_bins % g:
            raise ValueError("temporal factor must divide the bin count")
        values = values.reshape(*values.shape[:2], axis.n_bins // g, g).sum(axis=3)
        axis = TemporalAxis(axis.t0, axis.dt * g, axis.n_bins // g)
    if spec.blur_bins > 1:
        values = uniform_filter1d(values, size=spec.blur_bins, axis=2,
                                  mode="nearest")
    if spec.poisson_scale is not None:
        peak = values.max()
        if peak > 0:
            lam = values * (spec.poisson_scale / peak)
            rng = np.random.default_rng(spec.seed)
            values = rng.poisson(lam).astype(np.float64)
        else:
            values = np.zeros_like(values)
    return TransientImage(np.ascontiguousarray(values), axis, shape)


def degrade_scene(scene: SceneConfig, spec: DegradationSpec) -> SceneConfig:
    """Scene matching a degraded image: decimated detectors, coarser bins."""
    detectors = scene.detectors
    shape = scene.detector_shape
    if spec.spatial > 1:
        if shape is None:
            raise ValueError("spatial decimation needs a detector grid shape")
        nx, ny = shape
        f = spec.spatial
        d = detectors.reshape(nx // f, f, ny // f, f, 3).mean(axis=(1, 3))
        detectors = d.reshape(-1, 3)
        shape = (nx // f, ny // f)
    axis = scene.axis
    if spec.temporal > 1:
        axis = TemporalAxis(axis.t0, axis.dt * spec.temporal,
                            axis.n_bins // spec.temporal)
    return scene.replace(detectors=detectors, detector_shape=shape, axis=axis)


# ---------------------------------------------------------------------------
# measured-data preprocessing


def preprocess_measured(image: TransientImage, mode: str,
                        lowpass_sigma: float = 1000.0,
                        downsample: int = 25) -> TransientImage:
    """Background removal for photon-counted data.

    "spad-background": subtract a wide temporal Gaussian lowpass of the
    signal, clamp negatives, then sum-downsample the time axis (trailing
    bins that do not fill a group are dropped). "none": identity.
    """
    if mode == "none":
        return image.copy()
    if mode != "spad-background":
        raise ValueError(f"unknown preprocessing mode {mode!r}")
    low = gaussian_filter1d(image.values, sigma=lowpass_sigma, axis=2,
                            mode="nearest")
    values = np.clip(image.values - low, 0.0, None)
    axis = image.axis
    if downsample > 1:
        n_keep = (axis.n_bins // downsample) * downsample
        values = values[:, :, :n_keep]
        values = values.reshape(*values.shape[:2], -1, downsample).sum(axis=3)
        axis = TemporalAxis(axis.t0, axis.dt * downsample,
                            axis.n_bins // downsample)
    return TransientImage(np.ascontiguousarray(values), axis,
                          image.detector_shape)


def fit_gain(measured: TransientImage, rendered: TransientImage) -> float:
    """Least-squares scalar gain g minimizing ||measured - g*rendered||."""
    r = rendered.values.ravel()
    denom = float(r @ r)
    if denom == 0.0:
        return 1.0
    return float(measured.values.ravel() @ r) / denom


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    psnr: float                  # dB; +inf for identical images
    rel_l2: float                # percent
    depth_error: np.ndarray | None = None   # (nx, ny) signed world units
    silhouette: np.ndarray | None = None    # (nx, ny) bool, gt mesh hits
    notes: dict = field(default_factory=dict)


def psnr(candidate: np.ndarray, reference: np.ndarray) -> float:
    diff = candidate - reference
    rmse = float(np.sqrt(np.mean(diff * diff)))
    if rmse == 0.0:
        return float("inf")
    peak = float(reference.max())
    if peak <= 0.0:
        return float("nan")
    return 20.0 * np.log10(peak / rmse)


def rel_l2_percent(candidate: np.ndarray, reference: np.ndarray) -> float:
    num = float(np.linalg.norm((candidate - reference).ravel()))
    den = float(np.linalg.norm(reference.ravel()))
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return 100.0 * num / den


def depth_error_map(candidate_mesh: TriangleMesh, gt_mesh: TriangleMesh,
                    scene: SceneConfig):
    """Signed per-detector depth difference along the wall normal.

    Rays start at each detector and travel along +wall_normal; the map holds
    first-hit(candidate) - first-hit(gt), NaN where either mesh is missed.
    The silhouette marks detectors whose ray hits the gt mesh.
    """
    if scene.detector_shape is None:
        raise ValueError("depth maps need a detector grid shape")
    t_c = ray_first_hits(candidate_mesh, scene.detectors, scene.wall_normal)
    t_g = ray_first_hits(gt_mesh, scene.detectors, scene.wall_normal)
    err = (t_c - t_g).reshape(scene.detector_shape)
    sil = np.isfinite(t_g).reshape(scene.detector_shape)
    return err, sil


def metrics(candidate: TransientImage, reference: TransientImage,
            candidate_mesh: TriangleMesh | None = None,
            gt_mesh: TriangleMesh | None = None,
            scene: SceneConfig | None = None) -> MetricReport:
    """PSNR / relative L2 between images, plus depth errors when meshes and
    a scene are supplied."""
    if candidate.shape != reference.shape:
        raise ValueError("image dimensions differ")
    report = MetricReport(psnr=psnr(candidate.values, reference.values),
                          rel_l2=rel_l2_percent(candidate.values,
                                                reference.values))
    ref_norm = float(np.linalg.norm(reference.values.ravel()))
    if ref_norm > 0:
        report.notes["rel_l2_of_normalized"] = rel_l2_percent(
            candidate.values / max(candidate.values.max(), 1e-300),
            reference.values / reference.values.max())
    if candidate_mesh is not None and gt_mesh is not None and scene is not None:
        err, sil = depth_error_map(candidate_mesh, gt_mesh, scene)
        report.depth_error = err
        report.silhouette = sil
        inside = sil & np.isfinite(err)
        if np.any(inside):
            report.notes["mean_abs_depth_error"] = float(
                np.abs(err[inside]).mean())
    return report
