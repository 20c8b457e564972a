"""Signed point-to-mesh distance for closed triangle meshes.

Unsigned distance comes from an exact nearest-triangle query over a bounding
volume hierarchy; the sign from the angle-weighted pseudo-normal of the
closest feature (face, edge or vertex). Inside is negative.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

LEAF_SIZE = 4

# closest-feature codes returned by the triangle kernel
FACE, VERT_A, VERT_B, VERT_C, EDGE_AB, EDGE_BC, EDGE_CA = range(7)


class MeshNotClosedError(ValueError):
    pass


def directed_edges(faces: np.ndarray) -> np.ndarray:
    """(F, 3, 2) directed edges ab, bc, ca per face."""
    return np.stack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=1)


def opposite_faces(faces: np.ndarray, n_vertices: int) -> np.ndarray:
    """For each face and local edge, the face across that edge. Raises unless
    the mesh is a closed, consistently oriented 2-manifold."""
    de = directed_edges(faces).reshape(-1, 2)
    keys = de[:, 0] * n_vertices + de[:, 1]
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    if np.any(sk[1:] == sk[:-1]):
        raise MeshNotClosedError("mesh is not consistently oriented (repeated directed edge)")
    rev = de[:, 1] * n_vertices + de[:, 0]
    pos = np.clip(np.searchsorted(sk, rev), 0, len(sk) - 1)
    if np.any(sk[pos] != rev):
        raise MeshNotClosedError("mesh is not closed (boundary edge found)")
    return (order[pos] // 3).reshape(-1, 3)


def _pseudo_normals(V, F, opposite):
    e1 = V[F[:, 1]] - V[F[:, 0]]
    e2 = V[F[:, 2]] - V[F[:, 0]]
    fn = np.cross(e1, e2)
    fn /= np.linalg.norm(fn, axis=1, keepdims=True)

    vn = np.zeros_like(V)
    for k in range(3):
        a = V[F[:, k]]
        u = V[F[:, (k + 1) % 3]] - a
        w = V[F[:, (k + 2) % 3]] - a
        cosang = np.einsum("ij,ij->i", u, w) / (np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(vn, F[:, k], fn * ang[:, None])
    vn /= np.linalg.norm(vn, axis=1, keepdims=True)

    # per face, per local edge (ab, bc, ca): sum of the two incident face normals
    en = fn[:, None, :] + fn[opposite]
    en /= np.linalg.norm(en, axis=2, keepdims=True)
    return fn, vn, en


@njit(cache=True)
def _build_bvh_kernel(centroids, lo, hi, leaf_size):
    n = centroids.shape[0]
    cap = 2 * n + 1
    order = np.arange(n)
    node_lo = np.empty((cap, 3))
    node_hi = np.empty((cap, 3))
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    start = np.zeros(cap, np.int64)
    count = np.full(cap, -1, np.int64)
    stack = np.empty((cap, 3), np.int64)
    stack[0, 0], stack[0, 1], stack[0, 2] = 0, 0, n
    sp = 1
    used = 1
    while sp > 0:
        sp -= 1
        node, s, e = stack[sp, 0], stack[sp, 1], stack[sp, 2]
        for k in range(3):
            node_lo[node, k] = np.inf
            node_hi[node, k] = -np.inf
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for t in range(s, e):
            f = order[t]
            for k in range(3):
                node_lo[node, k] = min(node_lo[node, k], lo[f, k])
                node_hi[node, k] = max(node_hi[node, k], hi[f, k])
                cmin[k] = min(cmin[k], centroids[f, k])
                cmax[k] = max(cmax[k], centroids[f, k])
        if e - s <= leaf_size:
            start[node] = s
            count[node] = e - s
            continue
        axis = 0
        for k in range(1, 3):
            if cmax[k] - cmin[k] > cmax[axis] - cmin[axis]:
                axis = k
        seg = order[s:e].copy()
        keys = np.empty(e - s)
        for t in range(e - s):
            keys[t] = centroids[seg[t], axis]
        srt = np.argsort(keys, kind="mergesort")
        for t in range(e - s):
            order[s + t] = seg[srt[t]]
        mid = s + (e - s) // 2
        l, r = used, used + 1
        used += 2
        left[node], right[node] = l, r
        stack[sp, 0], stack[sp, 1], stack[sp, 2] = r, mid, e
        stack[sp + 1, 0], stack[sp + 1, 1], stack[sp + 1, 2] = l, s, mid
        sp += 2
    return node_lo[:used], node_hi[:used], left[:used], right[:used], start[:used], count[:used], order


def _build_bvh(centroids, lo, hi):
    """Median split along the longest centroid axis, leaves of LEAF_SIZE."""
    return _build_bvh_kernel(np.ascontiguousarray(centroids), np.ascontiguousarray(lo),
                             np.ascontiguousarray(hi), LEAF_SIZE)


@njit(cache=True, inline="always")
def _dot(ax, ay, az, bx, by, bz):
    return ax * bx + ay * by + az * bz


@njit(cache=True)
def _closest_on_triangle(px, py, pz, a, b, c):
    # Ericson, Real-Time Collision Detection, 5.1.5
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = px - a[0], py - a[1], pz - a[2]
    d1 = _dot(abx, aby, abz, apx, apy, apz)
    d2 = _dot(acx, acy, acz, apx, apy, apz)
    if d1 <= 0.0 and d2 <= 0.0:
        return a[0], a[1], a[2], VERT_A
    bpx, bpy, bpz = px - b[0], py - b[1], pz - b[2]
    d3 = _dot(abx, aby, abz, bpx, bpy, bpz)
    d4 = _dot(acx, acy, acz, bpx, bpy, bpz)
    if d3 >= 0.0 and d4 <= d3:
        return b[0], b[1], b[2], VERT_B
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a[0] + v * abx, a[1] + v * aby, a[2] + v * abz, EDGE_AB
    cpx, cpy, cpz = px - c[0], py - c[1], pz - c[2]
    d5 = _dot(abx, aby, abz, cpx, cpy, cpz)
    d6 = _dot(acx, acy, acz, cpx, cpy, cpz)
    if d6 >= 0.0 and d5 <= d6:
        return c[0], c[1], c[2], VERT_C
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a[0] + w * acx, a[1] + w * acy, a[2] + w * acz, EDGE_CA
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]), b[2] + w * (c[2] - b[2]), EDGE_BC
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (a[0] + abx * v + acx * w, a[1] + aby * v + acy * w, a[2] + abz * v + acz * w, FACE)


@njit(cache=True, inline="always")
def _box_d2(px, py, pz, lo, hi, node):
    dx = max(lo[node, 0] - px, 0.0, px - hi[node, 0])
    dy = max(lo[node, 1] - py, 0.0, py - hi[node, 1])
    dz = max(lo[node, 2] - pz, 0.0, pz - hi[node, 2])
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def _query_one(px, py, pz, V, F, node_lo, node_hi, left, right, start, count, order, stack, sdist):
    stack[0] = 0
    sdist[0] = _box_d2(px, py, pz, node_lo, node_hi, 0)
    sp = 1
    best = np.inf
    bf = -1
    bx = by = bz = 0.0
    breg = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        # ties must still be visited so the lowest face index wins
        if sdist[sp] > best:
            continue
        if count[node] >= 0:
            for k in range(start[node], start[node] + count[node]):
                f = order[k]
                cx, cy, cz, reg = _closest_on_triangle(px, py, pz, V[F[f, 0]], V[F[f, 1]], V[F[f, 2]])
                d2 = (px - cx) ** 2 + (py - cy) ** 2 + (pz - cz) ** 2
                if d2 < best or (d2 == best and f < bf):
                    best, bf, bx, by, bz, breg = d2, f, cx, cy, cz, reg
        else:
            l, r = left[node], right[node]
            dl = _box_d2(px, py, pz, node_lo, node_hi, l)
            dr = _box_d2(px, py, pz, node_lo, node_hi, r)
            # push the farther child first so the nearer one is popped next
            if dl <= dr:
                stack[sp], sdist[sp] = r, dr
                stack[sp + 1], sdist[sp + 1] = l, dl
            else:
                stack[sp], sdist[sp] = l, dl
                stack[sp + 1], sdist[sp + 1] = r, dr
            sp += 2
    return best, bf, bx, by, bz, breg


@njit(cache=True, parallel=True)
def _query_kernel(points, V, F, node_lo, node_hi, left, right, start, count, order,
                  out_d2, out_face, out_cp, out_region):
    n = points.shape[0]
    chunk = 1024
    for c in prange((n + chunk - 1) // chunk):
        stack = np.empty(128, np.int64)
        sdist = np.empty(128)
        for i in range(c * chunk, min(n, (c + 1) * chunk)):
            d2, f, x, y, z, reg = _query_one(points[i, 0], points[i, 1], points[i, 2], V, F,
                                             node_lo, node_hi, left, right, start, count,
                                             order, stack, sdist)
            out_d2[i] = d2
            out_face[i] = f
            out_cp[i, 0] = x
            out_cp[i, 1] = y
            out_cp[i, 2] = z
            out_region[i] = reg


class MeshDistance:
    """Signed distance to a closed, outward-oriented triangle mesh."""

    def __init__(self, vertices, faces):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if len(self.faces) == 0:
            raise MeshNotClosedError("empty template mesh")
        opposite = opposite_faces(self.faces, len(self.vertices))
        self.face_normals, self.vertex_normals, self.edge_normals = _pseudo_normals(
            self.vertices, self.faces, opposite)
        tri = self.vertices[self.faces]
        (self._lo, self._hi, self._left, self._right, self._start, self._count,
         self._order) = _build_bvh(tri.mean(axis=1), tri.min(axis=1), tri.max(axis=1))

    def closest(self, points):
        """Nearest surface point per query: (squared distance, face, point, feature code)."""
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        n = len(pts)
        d2 = np.empty(n)
        face = np.empty(n, dtype=np.int64)
        cp = np.empty((n, 3))
        region = np.empty(n, dtype=np.int64)
        _query_kernel(pts, self.vertices, self.faces, self._lo, self._hi, self._left,
                      self._right, self._start, self._count, self._order, d2, face, cp, region)
        return d2, face, cp, region

    def _feature_normals(self, face, region):
        pn = self.face_normals[face].copy()
        F = self.faces[face]
        for code, k in ((VERT_A, 0), (VERT_B, 1), (VERT_C, 2)):
            m = region == code
            pn[m] = self.vertex_normals[F[m, k]]
        for code, k in ((EDGE_AB, 0), (EDGE_BC, 1), (EDGE_CA, 2)):
            m = region == code
            pn[m] = self.edge_normals[face[m], k]
        return pn

    def signed_distance(self, points) -> np.ndarray:
        return self.signed_distance_and_grad(points)[0]

    def signed_distance_and_grad(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d2, face, cp, region = self.closest(pts)
        pn = self._feature_normals(face, region)
        diff = pts - cp
        sign = np.where(np.einsum("ij,ij->i", diff, pn) >= 0.0, 1.0, -1.0)
        dist = np.sqrt(d2)
        grad = pn.copy()
        off = dist > 1e-12
        grad[off] = sign[off, None] * diff[off] / dist[off, None]
        return sign * dist, grad

    def is_inside(self, points) -> np.ndarray:
        return self.signed_distance(points) < 0.0
