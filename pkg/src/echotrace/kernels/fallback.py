"""NumPy implementations of the hot kernels.

Selected when the compiled extension is unavailable (or forced via
ECHOTRACE_BACKEND=fallback). Semantics match `_compiled` exactly; outputs
agree to floating-point roundoff. Occlusion queries here test segments
against every occluder triangle in vectorized chunks instead of walking the
BVH, which keeps the code small at the price of speed.
"""

from __future__ import annotations

import math

import numpy as np

from .mc_tables import (CORNER_OFFSETS, EDGE_AXIS, EDGE_ORIGIN, EDGE_TABLE,
                        TRI_TABLE)

name = "fallback"

_CHUNK = 1 << 18  # max segment x occluder pairs held in memory at once


# ---------------------------------------------------------------------------
# blob field sampling


def sample_field_grid(centers, sigmas, origin, step, dims, trunc=4.0):
    """Sum-of-Gaussians field sampled on a corner grid of shape ``dims``.

    Each kernel is truncated at ``trunc`` standard deviations.
    """
    nx, ny, nz = (int(d) for d in dims)
    origin = np.asarray(origin, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    out = np.zeros((nx, ny, nz), dtype=np.float64)
    axes = [origin[a] + step[a] * np.arange((nx, ny, nz)[a]) for a in range(3)]
    for c, s in zip(np.atleast_2d(centers), np.ravel(sigmas)):
        r = trunc * s
        sl = []
        for a in range(3):
            lo = int(np.searchsorted(axes[a], c[a] - r, side="left"))
            hi = int(np.searchsorted(axes[a], c[a] + r, side="right"))
            if lo >= hi:
                sl = None
                break
            sl.append(slice(lo, hi))
        if sl is None:
            continue
        dx = axes[0][sl[0]] - c[0]
        dy = axes[1][sl[1]] - c[1]
        dz = axes[2][sl[2]] - c[2]
        r2 = (dx[:, None, None] ** 2 + dy[None, :, None] ** 2
              + dz[None, None, :] ** 2)
        k = np.zeros_like(r2)
        inside = r2 <= r * r
        k[inside] = np.exp(-r2[inside] / (2.0 * s * s))
        out[sl[0], sl[1], sl[2]] += k
    return out


def eval_field_points(centers, sigmas, points, trunc=4.0):
    """Field values at arbitrary points, same truncation as the grid path."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.zeros(len(points), dtype=np.float64)
    for c, s in zip(np.atleast_2d(centers), np.ravel(sigmas)):
        r2 = np.sum((points - c) ** 2, axis=1)
        inside = r2 <= (trunc * s) ** 2
        out[inside] += np.exp(-r2[inside] / (2.0 * s * s))
    return out


# ---------------------------------------------------------------------------
# marching cubes


def marching_cubes(samples, iso, origin, step):
    """Extract the iso level set of a corner-sampled scalar field.

    Returns (vertices, triangles) with vertices welded on shared grid edges.
    Vertex order is deterministic: all x-edge crossings in C order, then y,
    then z. Triangles follow cell C order and the case-table row order, wound
    so normals point toward the low-field side.
    """
    samples = np.asarray(samples, dtype=np.float64)
    nx, ny, nz = samples.shape
    origin = np.asarray(origin, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    below = samples < iso

    # Vertices: one per grid edge whose endpoints straddle iso.
    cross = [below[1:, :, :] != below[:-1, :, :],
             below[:, 1:, :] != below[:, :-1, :],
             below[:, :, 1:] != below[:, :, :-1]]
    edge_vid = []
    verts = []
    base = 0
    for a, m in enumerate(cross):
        vid = np.full(m.shape, -1, dtype=np.int64)
        idx = np.nonzero(m.ravel())[0]
        vid.ravel()[idx] = base + np.arange(len(idx))
        base += len(idx)
        edge_vid.append(vid)
        if len(idx):
            ii, jj, kk = np.unravel_index(idx, m.shape)
            p = origin + step * np.stack([ii, jj, kk], axis=1)
            up = [ii, jj, kk]
            up[a] = up[a] + 1
            v0 = samples[ii, jj, kk]
            v1 = samples[up[0], up[1], up[2]]
            t = (iso - v0) / (v1 - v0)
            p[:, a] += t * step[a]
            verts.append(p)
    vertices = (np.concatenate(verts, axis=0) if verts
                else np.zeros((0, 3), dtype=np.float64))

    # Cells: case index from the 8 corner flags.
    b = below.astype(np.uint16)
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint16)
    for bit, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        case |= b[ox:ox + nx - 1, oy:oy + ny - 1, oz:oz + nz - 1] << bit
    active = np.nonzero((EDGE_TABLE[case.ravel()] != 0).reshape(case.shape))
    if len(active[0]) == 0:
        return vertices, np.zeros((0, 3), dtype=np.int32)
    ci, cj, ck = active
    cases = case[ci, cj, ck]

    # Map the 12 local edges of each active cell to global vertex ids.
    cell_vid = np.empty((len(ci), 12), dtype=np.int64)
    for e in range(12):
        a = EDGE_AXIS[e]
        ox, oy, oz = EDGE_ORIGIN[e]
        cell_vid[:, e] = edge_vid[a][ci + ox, cj + oy, ck + oz]

    rows = TRI_TABLE[cases]  # (n_active, 16)
    tris = []
    for s in range(0, 15, 3):
        sel = rows[:, s] >= 0
        if not np.any(sel):
            break
        local = rows[sel, s:s + 3]
        tri = np.take_along_axis(cell_vid[sel], local.astype(np.int64), axis=1)
        tris.append((np.nonzero(sel)[0], tri))
    if not tris:
        return vertices, np.zeros((0, 3), dtype=np.int32)
    # Reassemble in (cell, table-row) order.
    counts = np.zeros(len(ci), dtype=np.int64)
    for cells, _ in tris:
        counts[cells] += 1
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = offsets[-1]
    out = np.empty((total, 3), dtype=np.int64)
    slot = offsets[:-1].copy()
    for cells, tri in tris:
        out[slot[cells]] = tri
        slot[cells] += 1
    return vertices, out.astype(np.int32)


# ---------------------------------------------------------------------------
# occlusion

_MT_EPS = 1e-14  # determinant cutoff for parallel segments


def _segment_hits(orig, dest, exclude, occ_v0, occ_e1, occ_e2, occ_ids, eps_len):
    """Any-hit test for each segment orig[i] -> dest[i], excluding occluder
    triangles whose original id equals exclude[i]. Segment endpoints are
    pulled in by eps_len world units."""
    n_seg = len(orig)
    n_occ = len(occ_v0)
    hit = np.zeros(n_seg, dtype=bool)
    if n_occ == 0 or n_seg == 0:
        return hit
    d = dest - orig
    seg_len = np.linalg.norm(d, axis=1)
    ok = seg_len > 2.0 * eps_len
    t_lo = np.where(seg_len > 0, eps_len / np.maximum(seg_len, 1e-300), 0.0)
    t_hi = 1.0 - t_lo
    step = max(1, _CHUNK // n_occ)
    for s in range(0, n_seg, step):
        sl = slice(s, min(s + step, n_seg))
        o = orig[sl][:, None, :]
        dd = d[sl][:, None, :]
        pvec = np.cross(dd, occ_e2[None, :, :])
        det = np.einsum("soj,oj->so", pvec, occ_e1)
        inv = np.where(np.abs(det) > _MT_EPS, 1.0 / np.where(det == 0, 1.0, det), 0.0)
        tvec = o - occ_v0[None, :, :]
        u = np.einsum("soj,soj->so", tvec, pvec) * inv
        qvec = np.cross(tvec, occ_e1[None, :, :])
        v = np.einsum("soj,soj->so", dd, qvec) * inv
        t = np.einsum("oj,soj->so", occ_e2, qvec) * inv
        cand = ((np.abs(det) > _MT_EPS) & (u >= 0.0) & (u <= 1.0)
                & (v >= 0.0) & (u + v <= 1.0)
                & (t > t_lo[sl][:, None]) & (t < t_hi[sl][:, None]))
        cand &= occ_ids[None, :] != exclude[sl][:, None]
        hit[sl] = ok[sl] & np.any(cand, axis=1)
    return hit


# ---------------------------------------------------------------------------
# transient rendering


def _deposit_rows(hist, alphas, taus, t0, dt, n_bins):
    """Deposit triangular footprints (rows of 3 sorted taus) into hist."""
    for alpha, (a, m, b) in zip(alphas, taus):
        if b - a <= 0.0:
            k = math.floor((a - t0) / dt)
            if 0 <= k < n_bins:
                hist[k] += alpha
            continue
        k0 = max(0, math.floor((a - t0) / dt))
        k1 = min(n_bins - 1, math.floor((b - t0) / dt))
        if k1 < k0:
            continue
        inv_ba = 1.0 / (b - a)
        f_lo = _tri_cdf(t0 + k0 * dt, a, m, b, inv_ba)
        for k in range(k0, k1 + 1):
            f_hi = _tri_cdf(t0 + (k + 1) * dt, a, m, b, inv_ba)
            hist[k] += alpha * (f_hi - f_lo)
            f_lo = f_hi


def _tri_cdf(x, a, m, b, inv_ba):
    if x <= a:
        return 0.0
    if x >= b:
        return 1.0
    if x <= m:
        return (x - a) * (x - a) * inv_ba / (m - a)
    return 1.0 - (b - x) * (b - x) * inv_ba / (b - m)


def render_rows(corners, centroids, normals, areas, active, parents,
                occ_v0, occ_e1, occ_e2, occ_ids, bvh,
                lasers, detectors, wall_normal,
                brdf_code, brdf_p0, brdf_p1,
                t0, dt, n_bins, use_filter, use_shadows, eps_len,
                n_threads, out):
    """Accumulate three-bounce contributions for every (laser, detector) row.

    ``bvh`` is accepted for signature parity with the compiled kernel and
    ignored; occlusion uses the brute-force arrays.
    """
    n_l = len(lasers)
    n_d = len(detectors)
    nw = np.asarray(wall_normal, dtype=np.float64)
    idx0 = np.nonzero(active)[0]
    if len(idx0) == 0:
        return
    cent = centroids[idx0]
    nrm = normals[idx0]
    ar = areas[idx0]
    par = parents[idx0]
    cor = corners[idx0]
    for l in range(n_l):
        lp = lasers[l]
        dl = cent - lp
        rl = np.maximum(np.linalg.norm(dl, axis=1), 1e-300)
        cos_wl = (dl @ nw) / rl
        cos_tl = -np.einsum("ij,ij->i", nrm, dl) / rl
        vis_l = (rl > 1e-300) & (cos_wl > 0.0) & (cos_tl > 0.0)
        for d in range(n_d):
            dp = detectors[d]
            dd = dp - cent
            rd = np.maximum(np.linalg.norm(dd, axis=1), 1e-300)
            cos_wd = -(dd @ nw) / rd
            cos_td = np.einsum("ij,ij->i", nrm, dd) / rd
            sel = vis_l & (rd > 1e-300) & (cos_wd > 0.0) & (cos_td > 0.0)
            if use_shadows and np.any(sel):
                j = np.nonzero(sel)[0]
                blocked = _segment_hits(np.broadcast_to(lp, (len(j), 3)),
                                        cent[j], par[j], occ_v0, occ_e1,
                                        occ_e2, occ_ids, eps_len)
                free = ~blocked
                if np.any(free):
                    jf = j[free]
                    blocked2 = _segment_hits(cent[jf],
                                             np.broadcast_to(dp, (len(jf), 3)),
                                             par[jf], occ_v0, occ_e1, occ_e2,
                                             occ_ids, eps_len)
                    sel = np.zeros_like(sel)
                    sel[jf[~blocked2]] = True
                else:
                    sel = np.zeros_like(sel)
            if not np.any(sel):
                continue
            j = np.nonzero(sel)[0]
            if brdf_code == 0:
                f = np.full(len(j), brdf_p0 / math.pi)
            else:
                wi = (lp - cent[j]) / rl[j, None]
                wo = dd[j] / rd[j, None]
                h = wi + wo
                hn = np.linalg.norm(h, axis=1)
                cos_h = np.zeros(len(j))
                nz = hn > 0
                cos_h[nz] = np.maximum(
                    0.0, np.einsum("ij,ij->i", h[nz] / hn[nz, None], nrm[j][nz]))
                e = 1.0 / brdf_p0
                f = brdf_p1 * (e + 2.0) / (2.0 * math.pi) * cos_h**e
            eta_l = cos_wl[j] * cos_tl[j] / (rl[j] * rl[j])
            eta_d = cos_td[j] * cos_wd[j] / (rd[j] * rd[j])
            alphas = f * cos_wl[j] * eta_l * eta_d * ar[j]
            hist = out[l, d]
            if use_filter:
                taus = (np.linalg.norm(cor[j] - lp, axis=2)
                        + np.linalg.norm(cor[j] - dp, axis=2))
                taus.sort(axis=1)
                _deposit_rows(hist, alphas, taus, t0, dt, n_bins)
            else:
                tau_c = rl[j] + rd[j]
                k = np.floor((tau_c - t0) / dt).astype(np.int64)
                m = (k >= 0) & (k < n_bins)
                np.add.at(hist, k[m], alphas[m])


# ---------------------------------------------------------------------------
# ellipsoidal backprojection


def backproject_gather(image, lasers, detectors, t0, dt, lo, voxel, dims,
                       n_threads, out):
    """Voxel-centric vote gathering: each voxel sums the image entries whose
    time bin covers its laser->voxel->detector path length."""
    nx, ny, nz = (int(v) for v in dims)
    lo = np.asarray(lo, dtype=np.float64)
    voxel = np.asarray(voxel, dtype=np.float64)
    cx = lo[0] + voxel[0] * (np.arange(nx) + 0.5)
    cy = lo[1] + voxel[1] * (np.arange(ny) + 0.5)
    cz = lo[2] + voxel[2] * (np.arange(nz) + 0.5)
    centers = np.stack(np.meshgrid(cx, cy, cz, indexing="ij"),
                       axis=-1).reshape(-1, 3)
    n_bins = image.shape[2]
    flat = out.reshape(-1)
    for l in range(len(lasers)):
        d_l = np.linalg.norm(centers - lasers[l], axis=1)
        for d in range(len(detectors)):
            tau = d_l + np.linalg.norm(centers - detectors[d], axis=1)
            k = np.floor((tau - t0) / dt).astype(np.int64)
            m = (k >= 0) & (k < n_bins)
            flat[m] += image[l, d, k[m]]
