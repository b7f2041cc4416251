"""Forward model: fast three-bounce transient rendering off a wall.

For every (laser spot, detector point) pair, each mesh triangle contributes
its centroid-shaded irradiance to the time-of-flight histogram, either as a
point deposit at the centroid path length or smeared over the triangular
temporal footprint spanned by its three vertex path lengths. Occlusion of
both path segments is tested against the mesh itself (any-hit queries on a
BVH). A slow dense-subdivision reference renderer provides the validation
oracle.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .bvh import Accel, build_accel
from .kernels import get_backend
from .scene import SceneConfig, TemporalAxis, TransientImage, TriangleMesh

OCCLUSION_EPS_FRACTION = 1e-4  # endpoint pull-in, fraction of scene diagonal


def default_threads() -> int:
    env = os.environ.get("ECHOTRACE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class RenderOptions:
    use_filter: bool = True
    use_shadows: bool = True
    n_threads: int = 0  # 0: default_threads()


def coupling(s1, n1, s2, n2, visible: bool = True) -> float:
    """Geometric coupling between two oriented surface points.

    visibility * |cos t1| * |cos t2| / squared distance.
    """
    if not visible:
        return 0.0
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    d = s2 - s1
    r2 = float(d @ d)
    if r2 == 0.0:
        raise ValueError("coincident points in coupling term")
    r = math.sqrt(r2)
    c1 = abs(float(np.asarray(n1, dtype=np.float64) @ d)) / r
    c2 = abs(float(np.asarray(n2, dtype=np.float64) @ d)) / r
    return c1 * c2 / r2


def scene_epsilon(scene: SceneConfig, mesh: TriangleMesh) -> float:
    """Occlusion endpoint epsilon: 1e-4 of the scene bounding diagonal."""
    pts = [scene.lasers, scene.detectors]
    if not mesh.is_empty():
        pts.append(mesh.vertices)
    allpts = np.vstack(pts)
    diag = float(np.linalg.norm(allpts.max(axis=0) - allpts.min(axis=0)))
    return OCCLUSION_EPS_FRACTION * diag


def _run_rows(scene: SceneConfig, corners, centroids, normals, areas, active,
              parents, accel: Accel, options: RenderOptions, eps_len,
              backend=None) -> TransientImage:
    k = get_backend(backend)
    axis = scene.axis
    out = np.zeros((scene.n_lasers, scene.n_detectors, axis.n_bins))
    threads = options.n_threads or default_threads()
    if len(centroids):
        k.render_rows(corners, centroids, normals, areas, active,
                      parents.astype(np.int32),
                      accel.tri_v0, accel.tri_e1, accel.tri_e2, accel.tri_ids,
                      accel, scene.lasers, scene.detectors, scene.wall_normal,
                      scene.brdf.code, *scene.brdf.params,
                      axis.t0, axis.dt, axis.n_bins,
                      options.use_filter, options.use_shadows, eps_len,
                      threads, out)
    return TransientImage(out, axis, scene.detector_shape)


def render(scene: SceneConfig, mesh: TriangleMesh,
           options: RenderOptions = RenderOptions(),
           accel: Accel | None = None, backend=None) -> TransientImage:
    """Transient image of a mesh under the scene's laser/detector setup."""
    if mesh.is_empty():
        return TransientImage(
            np.zeros((scene.n_lasers, scene.n_detectors, scene.axis.n_bins)),
            scene.axis, scene.detector_shape)
    if accel is None:
        accel = build_accel(mesh)
    eps = scene_epsilon(scene, mesh)
    parents = np.arange(mesh.n_triangles, dtype=np.int32)
    return _run_rows(scene, mesh.corners, mesh.centroids, mesh.normals,
                     mesh.areas, ~mesh.degenerate, parents, accel, options,
                     eps, backend)


def subdivide_corners(corners: np.ndarray, level: int):
    """Uniformly split each triangle into 4**level subtriangles.

    Returns (sub_corners, parent_index); parents map back to input rows.
    """
    sub = np.asarray(corners, dtype=np.float64)
    parents = np.arange(len(sub))
    for _ in range(level):
        a, b, c = sub[:, 0], sub[:, 1], sub[:, 2]
        ab = 0.5 * (a + b)
        bc = 0.5 * (b + c)
        ca = 0.5 * (c + a)
        quads = [np.stack([a, ab, ca], axis=1),
                 np.stack([ab, b, bc], axis=1),
                 np.stack([ca, bc, c], axis=1),
                 np.stack([ab, bc, ca], axis=1)]
        sub = np.concatenate(quads, axis=0)
        parents = np.concatenate([parents] * 4)
    order = np.argsort(parents, kind="stable")  # keep deposits parent-major
    return sub[order], parents[order]


def reference_render(scene: SceneConfig, mesh: TriangleMesh, level: int,
                     accel: Accel | None = None, backend=None) -> TransientImage:
    """Dense-quadrature reference: subdivided point deposits, no filtering.

    Every subtriangle is shaded and shadow-tested at its own centroid against
    the original (unsubdivided) mesh and deposits at its centroid path
    length. level=0 is exactly render() with the filter off.
    """
    if level < 0:
        raise ValueError("subdivision level must be >= 0")
    if mesh.is_empty():
        return TransientImage(
            np.zeros((scene.n_lasers, scene.n_detectors, scene.axis.n_bins)),
            scene.axis, scene.detector_shape)
    if accel is None:
        accel = build_accel(mesh)
    eps = scene_epsilon(scene, mesh)
    keep = np.nonzero(~mesh.degenerate)[0]
    sub, parents = subdivide_corners(mesh.corners[keep], level)
    parents = keep[parents]
    e1 = sub[:, 1] - sub[:, 0]
    e2 = sub[:, 2] - sub[:, 0]
    cross = np.cross(e1, e2)
    double_area = np.linalg.norm(cross, axis=1)
    centroids = sub.mean(axis=1)
    areas = 0.5 * double_area
    with np.errstate(invalid="ignore", divide="ignore"):
        normals = cross / double_area[:, None]
    normals = np.nan_to_num(normals)
    active = np.ones(len(sub), dtype=bool)
    opts = RenderOptions(use_filter=False, use_shadows=True)
    return _run_rows(scene, sub, centroids, normals, areas, active,
                     parents, accel, opts, eps, backend)


def triangle_irradiance(scene: SceneConfig, mesh: TriangleMesh, accel: Accel,
                        laser: int, detector: int, tri: int,
                        use_shadows: bool = True):
    """Single-triangle contribution (alpha, vertex path lengths).

    Scalar reference path used for tests and spot checks; render() computes
    the same quantity in bulk.
    """
    from .scene import eval_brdf
    taus = (np.linalg.norm(mesh.corners[tri] - scene.lasers[laser], axis=1)
            + np.linalg.norm(mesh.corners[tri] - scene.detectors[detector],
                             axis=1))
    if mesh.degenerate[tri]:
        return 0.0, taus
    lp = scene.lasers[laser]
    dp = scene.detectors[detector]
    c = mesh.centroids[tri]
    n = mesh.normals[tri]
    nw = scene.wall_normal
    dl = c - lp
    rl = np.linalg.norm(dl)
    dd = dp - c
    rd = np.linalg.norm(dd)
    if rl == 0.0 or rd == 0.0:
        raise ValueError("laser or detector coincides with triangle centroid")
    cos_wl = float(nw @ dl) / rl
    cos_tl = float(-n @ dl) / rl
    cos_wd = float(-nw @ dd) / rd
    cos_td = float(n @ dd) / rd
    if min(cos_wl, cos_tl, cos_wd, cos_td) <= 0.0:
        return 0.0, taus
    eps = scene_epsilon(scene, mesh)
    if use_shadows:
        from .bvh import segment_occluded
        if segment_occluded(accel, lp, c, exclude=tri, eps_len=eps):
            return 0.0, taus
        if segment_occluded(accel, c, dp, exclude=tri, eps_len=eps):
            return 0.0, taus
    f = eval_brdf(scene.brdf, -dl / rl, dd / rd, n)
    eta_l = cos_wl * cos_tl / (rl * rl)
    eta_d = cos_td * cos_wd / (rd * rd)
    alpha = f * cos_wl * eta_l * eta_d * mesh.areas[tri]
    return float(alpha), taus


def deposit_filtered(hist: np.ndarray, alpha: float, taus,
                     axis: TemporalAxis) -> None:
    """Spread ``alpha`` over the bins covered by the triangular footprint.

    The footprint is the triangular density on [min tau, max tau] with apex
    at the median tau; each overlapped bin receives the exact integral of
    that density over the bin. Mass outside the axis is dropped.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    a, m, b = sorted((float(taus[0]), float(taus[1]), float(taus[2])))
    from .kernels import fallback
    fallback._deposit_rows(hist, (alpha,), ((a, m, b),),
                           axis.t0, axis.dt, axis.n_bins)


def footprint_level(scene: SceneConfig, mesh: TriangleMesh,
                    target: float) -> int:
    """Smallest subdivision level bringing every temporal footprint under
    ``target`` (measured exactly over all laser/detector pairs)."""
    if mesh.is_empty():
        return 0
    corners = mesh.corners[~mesh.degenerate]
    spread = 0.0
    for lp in scene.lasers:
        d_l = np.linalg.norm(corners - lp, axis=2)
        for dp in scene.detectors:
            taus = d_l + np.linalg.norm(corners - dp, axis=2)
            spread = max(spread, float((taus.max(axis=1)
                                        - taus.min(axis=1)).max()))
    level = 0
    while spread > target and level < 12:
        spread *= 0.5
        level += 1
    return level
