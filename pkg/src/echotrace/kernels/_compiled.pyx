# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: blob-field sampling, marching cubes, transient render
rows and backprojection gathering.

Semantics mirror `fallback.py` (same accumulation order per output element),
so the two backends agree to floating-point roundoff. Rows and voxels are
partitioned across OpenMP threads with exclusive output ownership, which
keeps results bit-identical for any thread count.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, floor, pow, sqrt

from . import mc_tables

name = "compiled"

cnp.import_array()

cdef double MT_EPS = 1e-14

# lookup tables shared with the fallback (mc_tables is the single source)
_N_TRIS = (np.count_nonzero(mc_tables.TRI_TABLE >= 0, axis=1) // 3).astype(np.int32)
_EDGE_TABLE = mc_tables.EDGE_TABLE.astype(np.int32)
_TRI_TABLE = mc_tables.TRI_TABLE.astype(np.int32)

cdef int[::1] N_TRIS = _N_TRIS
cdef int[::1] EDGES = _EDGE_TABLE
cdef int[:, ::1] TRIS = _TRI_TABLE

cdef int[24] C_OFF
cdef int[12] E_AXIS
cdef int[36] E_ORIG
_i: int
for _i in range(24):
    C_OFF[_i] = mc_tables.CORNER_OFFSETS.ravel()[_i]
for _i in range(12):
    E_AXIS[_i] = mc_tables.EDGE_AXIS[_i]
for _i in range(36):
    E_ORIG[_i] = mc_tables.EDGE_ORIGIN.ravel()[_i]


# ---------------------------------------------------------------------------
# blob field sampling


def sample_field_grid(centers, sigmas, origin, step, dims, double trunc=4.0):
    cdef cnp.ndarray[double, ndim=2] c = np.ascontiguousarray(
        np.atleast_2d(centers), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] s = np.ascontiguousarray(
        np.ravel(sigmas), dtype=np.float64)
    cdef int nx = int(dims[0]), ny = int(dims[1]), nz = int(dims[2])
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double hx = step[0], hy = step[1], hz = step[2]
    out_arr = np.zeros((nx, ny, nz), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, k
    cdef int i0, i1, j0, j1, k0, k1
    cdef double cxx, cyy, czz, sg, r, r2, inv2s2, dx, dy, dz, d2
    for b in range(c.shape[0]):
        cxx = c[b, 0]; cyy = c[b, 1]; czz = c[b, 2]
        sg = s[b]
        r = trunc * sg
        r2 = r * r
        inv2s2 = 1.0 / (2.0 * sg * sg)
        i0 = _lo_index(cxx - r, ox, hx, nx)
        i1 = _hi_index(cxx + r, ox, hx, nx)
        j0 = _lo_index(cyy - r, oy, hy, ny)
        j1 = _hi_index(cyy + r, oy, hy, ny)
        k0 = _lo_index(czz - r, oz, hz, nz)
        k1 = _hi_index(czz + r, oz, hz, nz)
        with nogil:
            for i in range(i0, i1):
                dx = ox + hx * i - cxx
                for j in range(j0, j1):
                    dy = oy + hy * j - cyy
                    for k in range(k0, k1):
                        dz = oz + hz * k - czz
                        d2 = dx * dx + dy * dy + dz * dz
                        if d2 <= r2:
                            out[i, j, k] += exp(-d2 * inv2s2)
    return out_arr


cdef inline int _lo_index(double x, double o, double h, int n):
    cdef int i = <int>floor((x - o) / h)  # conservative, exact test is on d2
    if i < 0:
        i = 0
    if i > n:
        i = n
    return i


cdef inline int _hi_index(double x, double o, double h, int n):
    cdef int i = <int>floor((x - o) / h) + 2
    if i < 0:
        i = 0
    if i > n:
        i = n
    return i


# ---------------------------------------------------------------------------
# marching cubes


def marching_cubes(samples, double iso, origin, step):
    cdef cnp.ndarray[double, ndim=3] f = np.ascontiguousarray(
        samples, dtype=np.float64)
    cdef int nx = f.shape[0], ny = f.shape[1], nz = f.shape[2]
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double hx = step[0], hy = step[1], hz = step[2]
    cdef double[:, :, ::1] v = f

    # pass 1: count edge crossings per axis
    cdef Py_ssize_t i, j, k
    cdef long ncx = 0, ncy = 0, ncz = 0
    with nogil:
        for i in range(nx - 1):
            for j in range(ny):
                for k in range(nz):
                    if (v[i, j, k] < iso) != (v[i + 1, j, k] < iso):
                        ncx += 1
        for i in range(nx):
            for j in range(ny - 1):
                for k in range(nz):
                    if (v[i, j, k] < iso) != (v[i, j + 1, k] < iso):
                        ncy += 1
        for i in range(nx):
            for j in range(ny):
                for k in range(nz - 1):
                    if (v[i, j, k] < iso) != (v[i, j, k + 1] < iso):
                        ncz += 1

    cdef long n_verts = ncx + ncy + ncz
    verts_arr = np.empty((n_verts, 3), dtype=np.float64)
    vx_arr = np.full((max(nx - 1, 1), ny, nz), -1, dtype=np.int32)
    vy_arr = np.full((nx, max(ny - 1, 1), nz), -1, dtype=np.int32)
    vz_arr = np.full((nx, ny, max(nz - 1, 1)), -1, dtype=np.int32)
    cdef double[:, ::1] verts = verts_arr
    cdef int[:, :, ::1] vx = vx_arr
    cdef int[:, :, ::1] vy = vy_arr
    cdef int[:, :, ::1] vz = vz_arr

    # pass 2: assign ids and interpolate positions (x edges, then y, then z)
    cdef long vid = 0
    cdef double t
    with nogil:
        for i in range(nx - 1):
            for j in range(ny):
                for k in range(nz):
                    if (v[i, j, k] < iso) != (v[i + 1, j, k] < iso):
                        vx[i, j, k] = <int>vid
                        t = (iso - v[i, j, k]) / (v[i + 1, j, k] - v[i, j, k])
                        verts[vid, 0] = (ox + hx * i) + t * hx
                        verts[vid, 1] = oy + hy * j
                        verts[vid, 2] = oz + hz * k
                        vid += 1
        for i in range(nx):
            for j in range(ny - 1):
                for k in range(nz):
                    if (v[i, j, k] < iso) != (v[i, j + 1, k] < iso):
                        vy[i, j, k] = <int>vid
                        t = (iso - v[i, j, k]) / (v[i, j + 1, k] - v[i, j, k])
                        verts[vid, 0] = ox + hx * i
                        verts[vid, 1] = (oy + hy * j) + t * hy
                        verts[vid, 2] = oz + hz * k
                        vid += 1
        for i in range(nx):
            for j in range(ny):
                for k in range(nz - 1):
                    if (v[i, j, k] < iso) != (v[i, j, k + 1] < iso):
                        vz[i, j, k] = <int>vid
                        t = (iso - v[i, j, k]) / (v[i, j, k + 1] - v[i, j, k])
                        verts[vid, 0] = ox + hx * i
                        verts[vid, 1] = oy + hy * j
                        verts[vid, 2] = (oz + hz * k) + t * hz
                        vid += 1

    # pass 3: count triangles over cells
    cdef long n_tris = 0
    cdef int case
    with nogil:
        for i in range(nx - 1):
            for j in range(ny - 1):
                for k in range(nz - 1):
                    case = _cell_case(v, i, j, k, iso)
                    n_tris += N_TRIS[case]

    tris_arr = np.empty((n_tris, 3), dtype=np.int32)
    cdef int[:, ::1] tris = tris_arr
    cdef long tcount = 0
    cdef int e, n, s, a, eox, eoy, eoz, lid
    cdef int[12] evid
    with nogil:
        for i in range(nx - 1):
            for j in range(ny - 1):
                for k in range(nz - 1):
                    case = _cell_case(v, i, j, k, iso)
                    n = N_TRIS[case]
                    if n == 0:
                        continue
                    for e in range(12):
                        if EDGES[case] & (1 << e):
                            a = E_AXIS[e]
                            eox = E_ORIG[e * 3]
                            eoy = E_ORIG[e * 3 + 1]
                            eoz = E_ORIG[e * 3 + 2]
                            if a == 0:
                                evid[e] = vx[i + eox, j + eoy, k + eoz]
                            elif a == 1:
                                evid[e] = vy[i + eox, j + eoy, k + eoz]
                            else:
                                evid[e] = vz[i + eox, j + eoy, k + eoz]
                    for s in range(n):
                        for e in range(3):
                            lid = TRIS[case, 3 * s + e]
                            tris[tcount, e] = evid[lid]
                        tcount += 1
    return verts_arr, tris_arr


cdef inline int _cell_case(const double[:, :, ::1] v, Py_ssize_t i,
                           Py_ssize_t j, Py_ssize_t k, double iso) nogil:
    cdef int case = 0, b
    for b in range(8):
        if v[i + C_OFF[3 * b], j + C_OFF[3 * b + 1], k + C_OFF[3 * b + 2]] < iso:
            case |= 1 << b
    return case


# ---------------------------------------------------------------------------
# BVH construction (median split on the longest centroid axis)


cdef inline double _key(const int* order, const double* cen, int axis,
                        int i) nogil:
    return cen[3 * order[i] + axis]


cdef void _select(int* order, const double* cen, int axis, int lo, int hi,
                  int k) nogil:
    """Rearrange order[lo:hi) by centroid component ``axis`` so order[k]
    holds the rank-k element with smaller keys before and larger after
    (classic three-way-sentinel quickselect)."""
    cdef int l = lo, ir = hi - 1, mid, i, j, tmp
    cdef double a
    while True:
        if ir <= l + 1:
            if ir == l + 1 and _key(order, cen, axis, ir) < _key(order, cen, axis, l):
                tmp = order[l]; order[l] = order[ir]; order[ir] = tmp
            return
        mid = (l + ir) >> 1
        tmp = order[mid]; order[mid] = order[l + 1]; order[l + 1] = tmp
        if _key(order, cen, axis, l) > _key(order, cen, axis, ir):
            tmp = order[l]; order[l] = order[ir]; order[ir] = tmp
        if _key(order, cen, axis, l + 1) > _key(order, cen, axis, ir):
            tmp = order[l + 1]; order[l + 1] = order[ir]; order[ir] = tmp
        if _key(order, cen, axis, l) > _key(order, cen, axis, l + 1):
            tmp = order[l]; order[l] = order[l + 1]; order[l + 1] = tmp
        i = l + 1
        j = ir
        a = _key(order, cen, axis, l + 1)
        while True:
            i += 1
            while _key(order, cen, axis, i) < a:
                i += 1
            j -= 1
            while _key(order, cen, axis, j) > a:
                j -= 1
            if j < i:
                break
            tmp = order[i]; order[i] = order[j]; order[j] = tmp
        tmp = order[l + 1]; order[l + 1] = order[j]; order[j] = tmp
        if j >= k:
            ir = j - 1
        if j <= k:
            l = i


def build_bvh(tri_lo, tri_hi, cent, int leaf_size):
    """Flattened BVH arrays over triangle bounding boxes.

    Returns (nodes_bbox, left, right, start, count, order).
    """
    cdef const double[:, ::1] blo = np.ascontiguousarray(tri_lo, dtype=np.float64)
    cdef const double[:, ::1] bhi = np.ascontiguousarray(tri_hi, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] cen = np.ascontiguousarray(cent, dtype=np.float64)
    cdef int n = blo.shape[0]
    cdef int max_nodes = 2 * n + 2
    bbox_arr = np.empty((max_nodes, 6), dtype=np.float64)
    left_arr = np.full(max_nodes, -1, dtype=np.int32)
    right_arr = np.full(max_nodes, -1, dtype=np.int32)
    start_arr = np.zeros(max_nodes, dtype=np.int32)
    count_arr = np.zeros(max_nodes, dtype=np.int32)
    order_arr = np.arange(n, dtype=np.int32)
    cdef double[:, ::1] bbox = bbox_arr
    cdef int[::1] left = left_arr
    cdef int[::1] right = right_arr
    cdef int[::1] start = start_arr
    cdef int[::1] count = count_arr
    cdef int[::1] order = order_arr

    cdef int[256] st_node
    cdef int[256] st_lo
    cdef int[256] st_hi
    cdef int sp = 0, n_nodes = 1
    cdef int node, lo, hi, i, t, axis, mid
    cdef double cminx, cminy, cminz, cmaxx, cmaxy, cmaxz, ext, best
    cdef double v
    if n == 0:
        return (bbox_arr[:0], left_arr[:0], right_arr[:0], start_arr[:0],
                count_arr[:0], order_arr)
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    sp = 1
    with nogil:
        while sp > 0:
            sp -= 1
            node = st_node[sp]
            lo = st_lo[sp]
            hi = st_hi[sp]
            bbox[node, 0] = bbox[node, 1] = bbox[node, 2] = 1e300
            bbox[node, 3] = bbox[node, 4] = bbox[node, 5] = -1e300
            cminx = cminy = cminz = 1e300
            cmaxx = cmaxy = cmaxz = -1e300
            for i in range(lo, hi):
                t = order[i]
                if blo[t, 0] < bbox[node, 0]: bbox[node, 0] = blo[t, 0]
                if blo[t, 1] < bbox[node, 1]: bbox[node, 1] = blo[t, 1]
                if blo[t, 2] < bbox[node, 2]: bbox[node, 2] = blo[t, 2]
                if bhi[t, 0] > bbox[node, 3]: bbox[node, 3] = bhi[t, 0]
                if bhi[t, 1] > bbox[node, 4]: bbox[node, 4] = bhi[t, 1]
                if bhi[t, 2] > bbox[node, 5]: bbox[node, 5] = bhi[t, 2]
                v = cen[t, 0]
                if v < cminx: cminx = v
                if v > cmaxx: cmaxx = v
                v = cen[t, 1]
                if v < cminy: cminy = v
                if v > cmaxy: cmaxy = v
                v = cen[t, 2]
                if v < cminz: cminz = v
                if v > cmaxz: cmaxz = v
            if hi - lo <= leaf_size or sp >= 250:
                start[node] = lo
                count[node] = hi - lo
                continue
            axis = 0
            best = cmaxx - cminx
            ext = cmaxy - cminy
            if ext > best:
                best = ext
                axis = 1
            ext = cmaxz - cminz
            if ext > best:
                axis = 2
            mid = lo + (hi - lo) // 2
            _select(&order[0], <const double*> &cen[0, 0], axis, lo, hi, mid)
            left[node] = n_nodes
            right[node] = n_nodes + 1
            st_node[sp] = n_nodes
            st_lo[sp] = lo
            st_hi[sp] = mid
            sp += 1
            st_node[sp] = n_nodes + 1
            st_lo[sp] = mid
            st_hi[sp] = hi
            sp += 1
            n_nodes += 2
    return (bbox_arr[:n_nodes], left_arr[:n_nodes], right_arr[:n_nodes],
            start_arr[:n_nodes], count_arr[:n_nodes], order_arr)


# ---------------------------------------------------------------------------
# occlusion


cdef inline bint _any_hit(double ox, double oy, double oz,
                          double dx, double dy, double dz,
                          double t_lo, double t_hi, int exclude,
                          const double[:, ::1] nb, const int[::1] nleft,
                          const int[::1] nright, const int[::1] nstart,
                          const int[::1] ncount,
                          const double[:, ::1] tv0, const double[:, ::1] te1,
                          const double[:, ::1] te2,
                          const int[::1] tids) nogil:
    cdef int stack[128]
    cdef int top = 0, node, tri, t0i, cnt
    cdef double tmin, tmax, inv, t1, t2, tmp
    cdef double px, py, pz, det, invdet, tx, ty, tz, u, w, qx, qy, qz, tt
    if nb.shape[0] == 0:
        return False
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        # slab test over [t_lo, t_hi]
        tmin = t_lo
        tmax = t_hi
        if dx != 0.0:
            inv = 1.0 / dx
            t1 = (nb[node, 0] - ox) * inv
            t2 = (nb[node, 3] - ox) * inv
            if t1 > t2:
                tmp = t1; t1 = t2; t2 = tmp
            if t1 > tmin: tmin = t1
            if t2 < tmax: tmax = t2
        elif ox < nb[node, 0] or ox > nb[node, 3]:
            continue
        if dy != 0.0:
            inv = 1.0 / dy
            t1 = (nb[node, 1] - oy) * inv
            t2 = (nb[node, 4] - oy) * inv
            if t1 > t2:
                tmp = t1; t1 = t2; t2 = tmp
            if t1 > tmin: tmin = t1
            if t2 < tmax: tmax = t2
        elif oy < nb[node, 1] or oy > nb[node, 4]:
            continue
        if dz != 0.0:
            inv = 1.0 / dz
            t1 = (nb[node, 2] - oz) * inv
            t2 = (nb[node, 5] - oz) * inv
            if t1 > t2:
                tmp = t1; t1 = t2; t2 = tmp
            if t1 > tmin: tmin = t1
            if t2 < tmax: tmax = t2
        elif oz < nb[node, 2] or oz > nb[node, 5]:
            continue
        if tmin > tmax:
            continue
        if nleft[node] >= 0:
            stack[top] = nleft[node]
            top += 1
            stack[top] = nright[node]
            top += 1
            continue
        t0i = nstart[node]
        cnt = ncount[node]
        for tri in range(t0i, t0i + cnt):
            if tids[tri] == exclude:
                continue
            # Moeller-Trumbore
            px = dy * te2[tri, 2] - dz * te2[tri, 1]
            py = dz * te2[tri, 0] - dx * te2[tri, 2]
            pz = dx * te2[tri, 1] - dy * te2[tri, 0]
            det = te1[tri, 0] * px + te1[tri, 1] * py + te1[tri, 2] * pz
            if det > -MT_EPS and det < MT_EPS:
                continue
            invdet = 1.0 / det
            tx = ox - tv0[tri, 0]
            ty = oy - tv0[tri, 1]
            tz = oz - tv0[tri, 2]
            u = (tx * px + ty * py + tz * pz) * invdet
            if u < 0.0 or u > 1.0:
                continue
            qx = ty * te1[tri, 2] - tz * te1[tri, 1]
            qy = tz * te1[tri, 0] - tx * te1[tri, 2]
            qz = tx * te1[tri, 1] - ty * te1[tri, 0]
            w = (dx * qx + dy * qy + dz * qz) * invdet
            if w < 0.0 or u + w > 1.0:
                continue
            tt = (te2[tri, 0] * qx + te2[tri, 1] * qy + te2[tri, 2] * qz) * invdet
            if tt > t_lo and tt < t_hi:
                return True
    return False


# ---------------------------------------------------------------------------
# transient rendering


cdef inline double _tri_cdf(double x, double a, double m, double b,
                            double inv_ba) nogil:
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
                int brdf_code, double brdf_p0, double brdf_p1,
                double t0, double dt, int n_bins,
                bint use_filter, bint use_shadows, double eps_len,
                int n_threads, out):
    cdef const double[:, :, ::1] cor = np.ascontiguousarray(corners, dtype=np.float64)
    cdef const double[:, ::1] cent = np.ascontiguousarray(centroids, dtype=np.float64)
    cdef const double[:, ::1] nrm = np.ascontiguousarray(normals, dtype=np.float64)
    cdef const double[::1] ar = np.ascontiguousarray(areas, dtype=np.float64)
    cdef const cnp.uint8_t[::1] act = np.ascontiguousarray(active, dtype=np.uint8)
    cdef const int[::1] par = np.ascontiguousarray(parents, dtype=np.int32)
    cdef const double[:, ::1] ls = np.ascontiguousarray(lasers, dtype=np.float64)
    cdef const double[:, ::1] ds = np.ascontiguousarray(detectors, dtype=np.float64)
    cdef double nwx = wall_normal[0], nwy = wall_normal[1], nwz = wall_normal[2]
    cdef double[:, :, ::1] img = out

    cdef const double[:, ::1] nb = np.ascontiguousarray(bvh.nodes_bbox, dtype=np.float64)
    cdef const int[::1] nleft = np.ascontiguousarray(bvh.nodes_left, dtype=np.int32)
    cdef const int[::1] nright = np.ascontiguousarray(bvh.nodes_right, dtype=np.int32)
    cdef const int[::1] nstart = np.ascontiguousarray(bvh.nodes_start, dtype=np.int32)
    cdef const int[::1] ncount = np.ascontiguousarray(bvh.nodes_count, dtype=np.int32)
    cdef const double[:, ::1] tv0 = np.ascontiguousarray(bvh.tri_v0, dtype=np.float64)
    cdef const double[:, ::1] te1 = np.ascontiguousarray(bvh.tri_e1, dtype=np.float64)
    cdef const double[:, ::1] te2 = np.ascontiguousarray(bvh.tri_e2, dtype=np.float64)
    cdef const int[::1] tids = np.ascontiguousarray(bvh.tri_ids, dtype=np.int32)

    cdef Py_ssize_t n_l = ls.shape[0], n_d = ds.shape[0], n_t = cent.shape[0]
    cdef Py_ssize_t n_rows = n_l * n_d
    cdef Py_ssize_t row, l, d, t, vtx, kk
    cdef double lx, ly, lz, px, py, pz
    cdef double dlx, dly, dlz, rl, rl2, cos_wl, cos_tl
    cdef double ddx, ddy, ddz, rd, rd2, cos_wd, cos_td
    cdef double f, eta_l, eta_d, alpha, tau_c
    cdef double wix, wiy, wiz, wox, woy, woz, hhx, hhy, hhz, hnorm, cos_h, expo
    cdef double ta, tm, tb, tmp, inv_ba, f_lo, f_hi, vx_, vy_, vz_
    cdef long k, k0, k1
    cdef double lam_f = 0.0
    cdef bint blocked

    if brdf_code == 0:
        lam_f = brdf_p0 / 3.141592653589793
    expo = 0.0
    if brdf_code == 1:
        expo = 1.0 / brdf_p0

    if n_threads < 1:
        n_threads = 1

    for row in prange(n_rows, nogil=True, schedule="static",
                      num_threads=n_threads):
        l = row // n_d
        d = row % n_d
        lx = ls[l, 0]; ly = ls[l, 1]; lz = ls[l, 2]
        px = ds[d, 0]; py = ds[d, 1]; pz = ds[d, 2]
        for t in range(n_t):
            if not act[t]:
                continue
            dlx = cent[t, 0] - lx
            dly = cent[t, 1] - ly
            dlz = cent[t, 2] - lz
            rl2 = dlx * dlx + dly * dly + dlz * dlz
            if rl2 <= 0.0:
                continue
            rl = sqrt(rl2)
            cos_wl = (dlx * nwx + dly * nwy + dlz * nwz) / rl
            if cos_wl <= 0.0:
                continue
            cos_tl = -(nrm[t, 0] * dlx + nrm[t, 1] * dly + nrm[t, 2] * dlz) / rl
            if cos_tl <= 0.0:
                continue
            ddx = px - cent[t, 0]
            ddy = py - cent[t, 1]
            ddz = pz - cent[t, 2]
            rd2 = ddx * ddx + ddy * ddy + ddz * ddz
            if rd2 <= 0.0:
                continue
            rd = sqrt(rd2)
            cos_wd = -(ddx * nwx + ddy * nwy + ddz * nwz) / rd
            if cos_wd <= 0.0:
                continue
            cos_td = (nrm[t, 0] * ddx + nrm[t, 1] * ddy + nrm[t, 2] * ddz) / rd
            if cos_td <= 0.0:
                continue
            if use_shadows:
                blocked = _any_hit(lx, ly, lz, dlx, dly, dlz,
                                   eps_len / rl, 1.0 - eps_len / rl, par[t],
                                   nb, nleft, nright, nstart, ncount,
                                   tv0, te1, te2, tids)
                if blocked:
                    continue
                blocked = _any_hit(cent[t, 0], cent[t, 1], cent[t, 2],
                                   ddx, ddy, ddz,
                                   eps_len / rd, 1.0 - eps_len / rd, par[t],
                                   nb, nleft, nright, nstart, ncount,
                                   tv0, te1, te2, tids)
                if blocked:
                    continue
            if brdf_code == 0:
                f = lam_f
            else:
                wix = -dlx / rl; wiy = -dly / rl; wiz = -dlz / rl
                wox = ddx / rd; woy = ddy / rd; woz = ddz / rd
                hhx = wix + wox; hhy = wiy + woy; hhz = wiz + woz
                hnorm = sqrt(hhx * hhx + hhy * hhy + hhz * hhz)
                if hnorm > 0.0:
                    cos_h = (hhx * nrm[t, 0] + hhy * nrm[t, 1]
                             + hhz * nrm[t, 2]) / hnorm
                    if cos_h < 0.0:
                        cos_h = 0.0
                else:
                    cos_h = 0.0
                f = brdf_p1 * (expo + 2.0) / (2.0 * 3.141592653589793) \
                    * pow(cos_h, expo)
            eta_l = cos_wl * cos_tl / (rl * rl)
            eta_d = cos_td * cos_wd / (rd * rd)
            alpha = f * cos_wl * eta_l * eta_d * ar[t]
            if not use_filter:
                tau_c = rl + rd
                k = <long>floor((tau_c - t0) / dt)
                if 0 <= k < n_bins:
                    img[l, d, k] += alpha
                continue
            # vertex path lengths, sorted ascending
            ta = 0.0; tm = 0.0; tb = 0.0
            for vtx in range(3):
                vx_ = cor[t, vtx, 0]
                vy_ = cor[t, vtx, 1]
                vz_ = cor[t, vtx, 2]
                tmp = sqrt((vx_ - lx) * (vx_ - lx) + (vy_ - ly) * (vy_ - ly)
                           + (vz_ - lz) * (vz_ - lz)) \
                    + sqrt((vx_ - px) * (vx_ - px) + (vy_ - py) * (vy_ - py)
                           + (vz_ - pz) * (vz_ - pz))
                if vtx == 0:
                    ta = tmp
                elif vtx == 1:
                    tm = tmp
                else:
                    tb = tmp
            if ta > tm:
                tmp = ta; ta = tm; tm = tmp
            if tm > tb:
                tmp = tm; tm = tb; tb = tmp
            if ta > tm:
                tmp = ta; ta = tm; tm = tmp
            if tb - ta <= 0.0:
                k = <long>floor((ta - t0) / dt)
                if 0 <= k < n_bins:
                    img[l, d, k] += alpha
                continue
            k0 = <long>floor((ta - t0) / dt)
            if k0 < 0:
                k0 = 0
            k1 = <long>floor((tb - t0) / dt)
            if k1 > n_bins - 1:
                k1 = n_bins - 1
            if k1 < k0:
                continue
            inv_ba = 1.0 / (tb - ta)
            f_lo = _tri_cdf(t0 + k0 * dt, ta, tm, tb, inv_ba)
            for kk in range(k0, k1 + 1):
                f_hi = _tri_cdf(t0 + (kk + 1) * dt, ta, tm, tb, inv_ba)
                img[l, d, kk] += alpha * (f_hi - f_lo)
                f_lo = f_hi


# ---------------------------------------------------------------------------
# ellipsoidal backprojection


def backproject_gather(image, lasers, detectors, double t0, double dt,
                       lo, voxel, dims, int n_threads, out):
    cdef const double[:, :, ::1] img = np.ascontiguousarray(image, dtype=np.float64)
    cdef const double[:, ::1] ls = np.ascontiguousarray(lasers, dtype=np.float64)
    cdef const double[:, ::1] ds = np.ascontiguousarray(detectors, dtype=np.float64)
    cdef double lox = lo[0], loy = lo[1], loz = lo[2]
    cdef double hx = voxel[0], hy = voxel[1], hz = voxel[2]
    cdef Py_ssize_t nx = int(dims[0]), ny = int(dims[1]), nz = int(dims[2])
    cdef double[:, :, ::1] vol = out
    cdef Py_ssize_t n_l = ls.shape[0], n_d = ds.shape[0]
    cdef int n_bins = img.shape[2]
    cdef Py_ssize_t i, j, k, l, d
    cdef double cx, cy, cz, d_l, tau, acc
    cdef long b
    if n_threads < 1:
        n_threads = 1
    for i in prange(nx, nogil=True, schedule="static", num_threads=n_threads):
        cx = lox + hx * (i + 0.5)
        for j in range(ny):
            cy = loy + hy * (j + 0.5)
            for k in range(nz):
                cz = loz + hz * (k + 0.5)
                acc = 0.0
                for l in range(n_l):
                    d_l = sqrt((cx - ls[l, 0]) ** 2 + (cy - ls[l, 1]) ** 2
                               + (cz - ls[l, 2]) ** 2)
                    for d in range(n_d):
                        tau = d_l + sqrt((cx - ds[d, 0]) ** 2
                                         + (cy - ds[d, 1]) ** 2
                                         + (cz - ds[d, 2]) ** 2)
                        b = <long>floor((tau - t0) / dt)
                        if 0 <= b < n_bins:
                            acc = acc + img[l, d, b]
                vol[i, j, k] += acc
