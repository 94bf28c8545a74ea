"""Exact closest-point queries against triangle meshes.

Queries on meshes with at least 64 faces go through an axis-aligned
bounding-volume hierarchy; smaller meshes fall back to an exhaustive scan.
Both paths use the same exact point-triangle distance, so they agree to
floating-point precision.
"""

from __future__ import annotations

import weakref

import numpy as np
from scipy.spatial import cKDTree

from .mesh import ScanMesh

BRUTE_FORCE_FACE_LIMIT = 64
_LEAF_SIZE = 8


def closest_point_on_triangles(points, tri_a, tri_b, tri_c):
    """Closest points on triangles (a, b, c) from query points, all (N, 3).

    Returns (closest (N, 3), barycentric (N, 3), squared distance (N,)).
    Vectorized region classification of the standard point-triangle test.
    """
    a = np.asarray(tri_a, dtype=np.float64)
    b = np.asarray(tri_b, dtype=np.float64)
    c = np.asarray(tri_c, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)

    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    n = len(p)
    bary = np.empty((n, 3), dtype=np.float64)
    unset = np.ones(n, dtype=bool)

    def _assign(mask, w0, w1, w2):
        m = mask & unset
        if m.any():
            bary[m, 0] = w0[m] if isinstance(w0, np.ndarray) else w0
            bary[m, 1] = w1[m] if isinstance(w1, np.ndarray) else w1
            bary[m, 2] = w2[m] if isinstance(w2, np.ndarray) else w2
            unset[m] = False

    zeros = np.zeros(n)
    ones = np.ones(n)

    _assign((d1 <= 0) & (d2 <= 0), ones, zeros, zeros)  # vertex a
    _assign((d3 >= 0) & (d4 <= d3), zeros, ones, zeros)  # vertex b
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
    _assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - v_ab, v_ab, zeros)  # edge ab
    _assign((d6 >= 0) & (d5 <= d6), zeros, zeros, ones)  # vertex c
    with np.errstate(divide="ignore", invalid="ignore"):
        w_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
    _assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - w_ac, zeros, w_ac)  # edge ac
    e1 = d4 - d3
    e2 = d5 - d6
    with np.errstate(divide="ignore", invalid="ignore"):
        w_bc = np.where(e1 + e2 != 0, e1 / (e1 + e2), 0.0)
    _assign((va <= 0) & (e1 >= 0) & (e2 >= 0), zeros, 1 - w_bc, w_bc)  # edge bc
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v_in = np.where(denom != 0, vb / denom, 0.0)
        w_in = np.where(denom != 0, vc / denom, 0.0)
    # interior; degenerate triangles that slipped through land on vertex a
    _assign(denom != 0, 1 - v_in - w_in, v_in, w_in)
    _assign(np.ones(n, dtype=bool), ones, zeros, zeros)

    closest = bary[:, 0:1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    diff = closest - p
    return closest, bary, np.einsum("ij,ij->i", diff, diff)


class MeshQuery:
    """Immutable accelerated closest-point structure for a triangle mesh."""

    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        if len(self.faces) == 0:
            raise ValueError("cannot query an empty mesh")
        tri = self.vertices[self.faces]
        self._tri_a = np.ascontiguousarray(tri[:, 0])
        self._tri_b = np.ascontiguousarray(tri[:, 1])
        self._tri_c = np.ascontiguousarray(tri[:, 2])
        self._centroids = tri.mean(axis=1)
        self._use_bvh = len(self.faces) >= BRUTE_FORCE_FACE_LIMIT
        if self._use_bvh:
            self._build_bvh(tri)
            self._seed_tree = cKDTree(self._centroids)

    # -- construction -------------------------------------------------------

    def _build_bvh(self, tri):
        lo = tri.min(axis=1)
        hi = tri.max(axis=1)
        mins, maxs, lefts, rights, starts, counts = [], [], [], [], [], []
        order = np.arange(len(tri))

        def build(idx):
            node = len(mins)
            mins.append(lo[idx].min(axis=0))
            maxs.append(hi[idx].max(axis=0))
            lefts.append(-1)
            rights.append(-1)
            starts.append(0)
            counts.append(0)
            if len(idx) <= _LEAF_SIZE:
                starts[node] = len(ordered)
                counts[node] = len(idx)
                ordered.extend(idx.tolist())
                return node
            cen = self._centroids[idx]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            half = len(idx) // 2
            part = idx[np.argsort(cen[:, axis], kind="stable")]
            lefts[node] = build(part[:half])
            rights[node] = build(part[half:])
            return node

        ordered: list[int] = []
        build(order)
        self._node_min = np.asarray(mins)
        self._node_max = np.asarray(maxs)
        self._node_left = np.asarray(lefts, dtype=np.int64)
        self._node_right = np.asarray(rights, dtype=np.int64)
        self._node_start = np.asarray(starts, dtype=np.int64)
        self._node_count = np.asarray(counts, dtype=np.int64)
        self._tri_order = np.asarray(ordered, dtype=np.int64)

    # -- queries ------------------------------------------------------------

    def query(self, points):
        """Closest surface points for (N, 3) queries.

        Returns (closest (N, 3), face index (N,), barycentric (N, 3),
        distance (N,)).
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self._use_bvh:
            return self._query_bvh(points)
        return self._query_brute(points)

    def _query_brute(self, points):
        n = len(points)
        best_d2 = np.full(n, np.inf)
        best_face = np.zeros(n, dtype=np.int64)
        best_bary = np.zeros((n, 3))
        best_pt = np.zeros((n, 3))
        f = len(self.faces)
        chunk = max(1, 4_000_000 // max(n, 1))
        for s in range(0, f, chunk):
            e = min(s + chunk, f)
            width = e - s
            pts = np.repeat(points, width, axis=0)
            ta = np.tile(self._tri_a[s:e], (n, 1))
            tb = np.tile(self._tri_b[s:e], (n, 1))
            tc = np.tile(self._tri_c[s:e], (n, 1))
            cp, bary, d2 = closest_point_on_triangles(pts, ta, tb, tc)
            d2 = d2.reshape(n, width)
            j = np.argmin(d2, axis=1)
            dmin = d2[np.arange(n), j]
            better = dmin < best_d2
            flat = np.arange(n) * width + j
            best_d2[better] = dmin[better]
            best_face[better] = s + j[better]
            best_bary[better] = bary[flat[better]]
            best_pt[better] = cp[flat[better]]
        return best_pt, best_face, best_bary, np.sqrt(best_d2)

    def _exact_for_pairs(self, points, q_idx, tri_idx):
        cp, bary, d2 = closest_point_on_triangles(
            points[q_idx], self._tri_a[tri_idx], self._tri_b[tri_idx], self._tri_c[tri_idx]
        )
        return cp, bary, d2

    def _query_bvh(self, points):
        n = len(points)
        # Seed the pruning bound with the exact distance to the triangle
        # whose centroid is nearest; makes the first frontier sweeps tight.
        _, seed_tri = self._seed_tree.query(points)
        seed_tri = np.asarray(seed_tri, dtype=np.int64).reshape(-1)
        best_pt, best_bary, best_d2 = self._exact_for_pairs(points, np.arange(n), seed_tri)
        best_face = seed_tri.copy()

        q = np.arange(n, dtype=np.int64)
        node = np.zeros(n, dtype=np.int64)
        while len(q):
            lo = self._node_min[node]
            hi = self._node_max[node]
            d = np.maximum(lo - points[q], 0.0) + np.maximum(points[q] - hi, 0.0)
            lb = np.einsum("ij,ij->i", d, d)
            keep = lb < best_d2[q]
            q = q[keep]
            node = node[keep]
            if not len(q):
                break
            is_leaf = self._node_left[node] < 0
            if is_leaf.any():
                lq = q[is_leaf]
                ln = node[is_leaf]
                counts = self._node_count[ln]
                rep_q = np.repeat(lq, counts)
                offsets = np.concatenate([np.arange(c) for c in counts])
                tri = self._tri_order[np.repeat(self._node_start[ln], counts) + offsets]
                cp, bary, d2 = self._exact_for_pairs(points, rep_q, tri)
                order = np.lexsort((d2, rep_q))
                uq, first = np.unique(rep_q[order], return_index=True)
                pick = order[first]
                improved = d2[pick] < best_d2[uq]
                upd = uq[improved]
                sel = pick[improved]
                best_d2[upd] = d2[sel]
                best_pt[upd] = cp[sel]
                best_bary[upd] = bary[sel]
                best_face[upd] = tri[sel]
            inner_q = q[~is_leaf]
            inner_n = node[~is_leaf]
            q = np.concatenate([inner_q, inner_q])
            node = np.concatenate([self._node_left[inner_n], self._node_right[inner_n]])
        return best_pt, best_face, best_bary, np.sqrt(best_d2)


_query_cache: "weakref.WeakKeyDictionary[ScanMesh, MeshQuery]" = weakref.WeakKeyDictionary()


def mesh_query(scan: ScanMesh) -> MeshQuery:
    """Accelerated query structure for a scan, built once and cached."""
    q = _query_cache.get(scan)
    if q is None:
        q = MeshQuery(scan.vertices, scan.faces)
        _query_cache[scan] = q
    return q


def closest_point_on_mesh(scan: ScanMesh, point):
    """Closest point on the scan surface from a single 3D point.

    Returns (surface point, face index, barycentric coordinates).
    """
    pt, face, bary, _ = mesh_query(scan).query(np.asarray(point, dtype=np.float64)[None, :])
    return pt[0], int(face[0]), bary[0]


def brute_force_closest(vertices, faces, points):
    """Exhaustive per-triangle minimum; the oracle for the accelerated path."""
    mq = MeshQuery.__new__(MeshQuery)
    mq.vertices = np.asarray(vertices, dtype=np.float64)
    mq.faces = np.asarray(faces, dtype=np.int64)
    tri = mq.vertices[mq.faces]
    mq._tri_a = np.ascontiguousarray(tri[:, 0])
    mq._tri_b = np.ascontiguousarray(tri[:, 1])
    mq._tri_c = np.ascontiguousarray(tri[:, 2])
    mq._use_bvh = False
    return mq._query_brute(np.atleast_2d(np.asarray(points, dtype=np.float64)))
