"""Bounding volume hierarchy over mesh triangles for any-hit occlusion tests.

The tree is built once per mesh in NumPy and flattened into plain arrays so
both kernel backends can consume it: the compiled kernel walks the nodes, the
fallback uses the brute-force triangle arrays directly. Median splits on the
longest centroid axis keep the build deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import get_backend
from .scene import TriangleMesh

LEAF_SIZE = 4


@dataclass
class Accel:
    """Flattened occlusion structure shared by both kernel backends."""

    nodes_bbox: np.ndarray   # (n_nodes, 6) min xyz, max xyz
    nodes_left: np.ndarray   # (n_nodes,) child index, -1 for leaves
    nodes_right: np.ndarray
    nodes_start: np.ndarray  # (n_nodes,) first triangle of a leaf
    nodes_count: np.ndarray  # (n_nodes,) triangle count of a leaf
    tri_v0: np.ndarray       # (n_t, 3) leaf-order triangle data
    tri_e1: np.ndarray
    tri_e2: np.ndarray
    tri_ids: np.ndarray      # (n_t,) original triangle indices

    @property
    def n_triangles(self) -> int:
        return len(self.tri_ids)


def build_accel(mesh: TriangleMesh, backend=None) -> Accel:
    """Build the occlusion accelerator for a mesh (degenerates excluded)."""
    keep = np.nonzero(~mesh.degenerate)[0].astype(np.int32)
    corners = mesh.corners[keep]
    n = len(keep)
    if n == 0:
        z3 = np.zeros((0, 3))
        return Accel(np.zeros((0, 6)), *(np.zeros(0, dtype=np.int32),) * 4,
                     z3, z3, z3, np.zeros(0, dtype=np.int32))

    tri_lo = corners.min(axis=1)
    tri_hi = corners.max(axis=1)
    cent = corners.mean(axis=1)

    kern = get_backend(backend)
    if hasattr(kern, "build_bvh"):
        bbox_a, left_a, right_a, start_a, count_a, order_a = kern.build_bvh(
            tri_lo, tri_hi, cent, LEAF_SIZE)
        v = corners[order_a]
        return Accel(
            nodes_bbox=bbox_a, nodes_left=left_a, nodes_right=right_a,
            nodes_start=start_a, nodes_count=count_a,
            tri_v0=np.ascontiguousarray(v[:, 0]),
            tri_e1=np.ascontiguousarray(v[:, 1] - v[:, 0]),
            tri_e2=np.ascontiguousarray(v[:, 2] - v[:, 0]),
            tri_ids=keep[order_a].astype(np.int32))

    order = np.arange(n)
    bbox, left, right, start, count = [], [], [], [], []

    # Iterative median-split; stack holds (node_id, lo, hi) ranges of `order`.
    def new_node():
        bbox.append(None)
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(bbox) - 1

    root = new_node()
    stack = [(root, 0, n)]
    while stack:
        node, lo, hi = stack.pop()
        sel = order[lo:hi]
        bmin = tri_lo[sel].min(axis=0)
        bmax = tri_hi[sel].max(axis=0)
        bbox[node] = np.concatenate([bmin, bmax])
        if hi - lo <= LEAF_SIZE:
            start[node] = lo
            count[node] = hi - lo
            continue
        c = cent[sel]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        mid = (hi - lo) // 2
        part = np.argsort(c[:, axis], kind="stable")
        order[lo:hi] = sel[part]
        lnode = new_node()
        rnode = new_node()
        left[node] = lnode
        right[node] = rnode
        stack.append((rnode, lo + mid, hi))
        stack.append((lnode, lo, lo + mid))

    v = corners[order]
    return Accel(
        nodes_bbox=np.ascontiguousarray(np.vstack(bbox)),
        nodes_left=np.asarray(left, dtype=np.int32),
        nodes_right=np.asarray(right, dtype=np.int32),
        nodes_start=np.asarray(start, dtype=np.int32),
        nodes_count=np.asarray(count, dtype=np.int32),
        tri_v0=np.ascontiguousarray(v[:, 0]),
        tri_e1=np.ascontiguousarray(v[:, 1] - v[:, 0]),
        tri_e2=np.ascontiguousarray(v[:, 2] - v[:, 0]),
        tri_ids=keep[order].astype(np.int32),
    )


def segment_occluded(accel: Accel, p0, p1, exclude: int = -1,
                     eps_len: float = 0.0) -> bool:
    """True iff a non-excluded triangle crosses the open segment p0 -> p1.

    Reference implementation (brute force over the accel's triangles); the
    render kernels carry their own optimized copies of this test.
    """
    from .kernels import fallback
    orig = np.asarray(p0, dtype=np.float64).reshape(1, 3)
    dest = np.asarray(p1, dtype=np.float64).reshape(1, 3)
    hit = fallback._segment_hits(orig, dest,
                                 np.array([exclude], dtype=np.int32),
                                 accel.tri_v0, accel.tri_e1, accel.tri_e2,
                                 accel.tri_ids, eps_len)
    return bool(hit[0])


def ray_first_hits(mesh: TriangleMesh, origins, direction) -> np.ndarray:
    """Closest-hit parameter t for rays origins[i] + t*direction, NaN if none.

    Brute force over all triangles; intended for depth-map evaluation where
    ray counts are small.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    t_best = np.full(len(origins), np.nan)
    if mesh.is_empty():
        return t_best
    keep = ~mesh.degenerate
    v = mesh.corners[keep]
    v0 = v[:, 0]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    pvec = np.cross(direction, e2)
    det = np.einsum("oj,oj->o", pvec, e1)
    good = np.abs(det) > 1e-14
    inv = np.zeros_like(det)
    inv[good] = 1.0 / det[good]
    for i, o in enumerate(origins):
        tvec = o - v0
        u = np.einsum("oj,oj->o", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v_ = qvec @ direction * inv
        t = np.einsum("oj,oj->o", e2, qvec) * inv
        m = good & (u >= 0) & (u <= 1) & (v_ >= 0) & (u + v_ <= 1) & (t > 0)
        if np.any(m):
            t_best[i] = t[m].min()
    return t_best
