"""Shared data model: temporal axis, wall scene, transient images, meshes, BRDFs.

Time and distance are used synonymously throughout (the speed of light is
folded into the units), so every "time" below is an optical path length in
world units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

WALL_TOLERANCE = 1e-6  # max point-to-wall-plane distance for detectors/lasers


def _as_point(x) -> np.ndarray:
    p = np.asarray(x, dtype=np.float64).reshape(3)
    p.flags.writeable = False
    return p


def _as_points(x) -> np.ndarray:
    p = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if p.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got {p.shape}")
    p = np.ascontiguousarray(p)
    p.flags.writeable = False
    return p


@dataclass(frozen=True)
class TemporalAxis:
    """Uniform time-of-flight binning: bin k covers [t0 + k*dt, t0 + (k+1)*dt)."""

    t0: float
    dt: float
    n_bins: int

    def __post_init__(self):
        if not (self.dt > 0):
            raise ValueError("dt must be positive")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_bins * self.dt

    def bin_edges(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_bins + 1)


def bin_index(tau: float, axis: TemporalAxis) -> int | None:
    """Bin id holding path length ``tau``, or None when out of range.

    Lower edges are inclusive, upper edges exclusive.
    """
    k = math.floor((tau - axis.t0) / axis.dt)
    if 0 <= k < axis.n_bins:
        return int(k)
    return None


@dataclass(frozen=True)
class BRDF:
    """Surface reflectance: Lambertian or a normalized Blinn lobe for metal.

    ``eval`` takes unit directions pointing away from the surface point and
    the unit surface normal; it never returns a negative value.
    """

    kind: str  # "lambertian" | "blinn-metal"
    albedo: float = 0.0
    roughness: float = 0.0
    reflectance: float = 0.0

    LAMBERTIAN_CODE = 0
    BLINN_METAL_CODE = 1

    @classmethod
    def make_lambertian(cls, albedo: float) -> "BRDF":
        if not 0.0 <= albedo <= 1.0:
            raise ValueError("albedo must be in [0, 1]")
        return cls(kind="lambertian", albedo=float(albedo))

    @classmethod
    def make_blinn_metal(cls, roughness: float, reflectance: float = 1.0) -> "BRDF":
        if not roughness > 0:
            raise ValueError("roughness must be positive")
        if reflectance < 0:
            raise ValueError("reflectance must be nonnegative")
        return cls(kind="blinn-metal", roughness=float(roughness),
                   reflectance=float(reflectance))

    @property
    def code(self) -> int:
        return self.LAMBERTIAN_CODE if self.kind == "lambertian" else self.BLINN_METAL_CODE

    @property
    def params(self) -> tuple[float, float]:
        if self.kind == "lambertian":
            return (self.albedo, 0.0)
        return (self.roughness, self.reflectance)


def eval_brdf(brdf: BRDF, wi, wo, n) -> float:
    """Reflectance value for unit directions wi (to light), wo (to viewer)."""
    if brdf.kind == "lambertian":
        return brdf.albedo / math.pi
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    h = wi + wo
    norm = np.linalg.norm(h)
    if norm == 0.0:  # exactly opposing directions: grazing, no lobe
        return 0.0
    cos_h = max(0.0, float(np.dot(h / norm, n)))
    exponent = 1.0 / brdf.roughness
    return brdf.reflectance * (exponent + 2.0) / (2.0 * math.pi) * cos_h**exponent


@dataclass(frozen=True)
class VolumeSpec:
    """Axis-aligned reconstruction box with per-axis sample resolution.

    ``resolution`` counts samples per axis placed at voxel corners, so a
    resolution of 128 spans 127 cells.
    """

    lo: np.ndarray
    hi: np.ndarray
    resolution: tuple[int, int, int] = (128, 128, 128)

    def __post_init__(self):
        object.__setattr__(self, "lo", _as_point(self.lo))
        object.__setattr__(self, "hi", _as_point(self.hi))
        res = tuple(int(r) for r in np.broadcast_to(self.resolution, (3,)))
        if any(r < 2 for r in res):
            raise ValueError("resolution must be >= 2 per axis")
        if not np.all(self.hi > self.lo):
            raise ValueError("volume must have positive extent")
        object.__setattr__(self, "resolution", res)

    @property
    def step(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.resolution) - 1)

    def with_resolution(self, resolution) -> "VolumeSpec":
        return VolumeSpec(self.lo, self.hi, resolution)


@dataclass(frozen=True)
class SceneConfig:
    """Wall plane, illumination spots, observed wall points and timing.

    Laser spots emit a cosine lobe around the wall normal; detectors are
    ideal omnidirectional points on the wall.
    """

    wall_point: np.ndarray
    wall_normal: np.ndarray
    lasers: np.ndarray          # (n_l, 3) wall spots
    detectors: np.ndarray       # (n_d, 3) observed wall points
    axis: TemporalAxis
    brdf: BRDF
    volume: VolumeSpec
    detector_shape: tuple[int, int] | None = None  # grid layout of `detectors`

    def __post_init__(self):
        object.__setattr__(self, "wall_point", _as_point(self.wall_point))
        n = np.asarray(self.wall_normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("wall normal must be nonzero")
        object.__setattr__(self, "wall_normal", _as_point(n / norm))
        object.__setattr__(self, "lasers", _as_points(self.lasers))
        object.__setattr__(self, "detectors", _as_points(self.detectors))
        for name in ("lasers", "detectors"):
            pts = getattr(self, name)
            d = np.abs((pts - self.wall_point) @ self.wall_normal)
            if np.any(d > WALL_TOLERANCE):
                raise ValueError(f"{name} must lie on the wall plane "
                                 f"(max offset {d.max():.3g})")
        if self.detector_shape is not None:
            shape = (int(self.detector_shape[0]), int(self.detector_shape[1]))
            if shape[0] * shape[1] != len(self.detectors):
                raise ValueError("detector_shape does not match detector count")
            object.__setattr__(self, "detector_shape", shape)

    @property
    def n_lasers(self) -> int:
        return len(self.lasers)

    @property
    def n_detectors(self) -> int:
        return len(self.detectors)

    def replace(self, **kw) -> "SceneConfig":
        return replace(self, **kw)


@dataclass
class TransientImage:
    """Space-time response cube with shape (n_lasers, n_detectors, n_bins)."""

    values: np.ndarray
    axis: TemporalAxis
    detector_shape: tuple[int, int] | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError("values must be (n_lasers, n_detectors, n_bins)")
        if v.shape[2] != self.axis.n_bins:
            raise ValueError("time dimension does not match axis.n_bins")
        if not np.all(np.isfinite(v)):
            raise ValueError("transient image contains non-finite values")
        self.values = v

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def copy(self) -> "TransientImage":
        return TransientImage(self.values.copy(), self.axis, self.detector_shape)

    def __sub__(self, other: "TransientImage") -> "TransientImage":
        if self.shape != other.shape:
            raise ValueError("shape mismatch")
        return TransientImage(self.values - other.values, self.axis,
                              self.detector_shape)


DEGENERATE_AREA_FRACTION = 1e-12  # of mean area; smaller triangles are skipped


class TriangleMesh:
    """Indexed triangle mesh with cached per-triangle centroid/area/normal.

    Arrays are frozen after construction; derived caches are recomputed from
    the vertex data whenever a new mesh is built.
    """

    def __init__(self, vertices, triangles):
        self.vertices = np.ascontiguousarray(
            np.asarray(vertices, dtype=np.float64).reshape(-1, 3))
        self.triangles = np.ascontiguousarray(
            np.asarray(triangles, dtype=np.int32).reshape(-1, 3))
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle indices out of range")
        self._build_cache()
        for a in (self.vertices, self.triangles, self.centroids, self.normals,
                  self.areas, self.degenerate):
            a.flags.writeable = False

    def _build_cache(self):
        v = self.vertices[self.triangles]  # (n_t, 3, 3)
        self.corners = np.ascontiguousarray(v)
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        cross = np.cross(e1, e2)
        double_area = np.linalg.norm(cross, axis=1)
        self.centroids = np.ascontiguousarray(v.mean(axis=1))
        self.areas = 0.5 * double_area
        mean_area = self.areas.mean() if len(self.areas) else 0.0
        self.degenerate = self.areas < DEGENERATE_AREA_FRACTION * mean_area
        with np.errstate(invalid="ignore", divide="ignore"):
            n = cross / double_area[:, None]
        n[self.degenerate] = 0.0
        self.normals = np.ascontiguousarray(n)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32))

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def is_empty(self) -> bool:
        return self.n_triangles == 0

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64),
                            self.triangles)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self.vertices):
            z = np.zeros(3)
            return z, z
        return self.vertices.min(axis=0), self.vertices.max(axis=0)
