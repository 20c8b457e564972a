"""Tetrahedral lattice, SDF population through the inverse warp, and marching
tetrahedra with closed-form vertex derivatives."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .body import PosedBody

# local tet edges as vertex pairs
TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
CHUNK = 65536


def _build_case_table():
    """Triangles (as local edge ids) for each of the 16 inside/outside codes,
    wound so normals point from the negative to the positive side. Derived on a
    reference tet; orientation carries over to any positively oriented tet."""
    ref = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    mid = 0.5 * (ref[TET_EDGES[:, 0]] + ref[TET_EDGES[:, 1]])
    edge_of = {tuple(sorted(e)): k for k, e in enumerate(TET_EDGES.tolist())}
    table = -np.ones((16, 2, 3), dtype=np.int64)
    ntri = np.zeros(16, dtype=np.int64)
    for code in range(16):
        inside = [v for v in range(4) if code >> v & 1]
        outside = [v for v in range(4) if not code >> v & 1]
        if not inside or not outside:
            continue
        away = ref[outside].mean(0) - ref[inside].mean(0)
        if len(inside) == 2:
            (a, b), (c, e) = inside, outside
            loop = [edge_of[tuple(sorted(p))] for p in ((a, c), (a, e), (b, e), (b, c))]
            tris = [loop[:3], [loop[0], loop[2], loop[3]]]
        else:
            tris = [[k for k, (p, q) in enumerate(TET_EDGES.tolist())
                     if (p in inside) != (q in inside)]]
        for s, tri in enumerate(tris):
            p = mid[tri]
            if np.dot(np.cross(p[1] - p[0], p[2] - p[0]), away) < 0:
                tri = [tri[0], tri[2], tri[1]]
            table[code, s] = tri
        ntri[code] = len(tris)
    return table, ntri


CASE_TRIS, CASE_COUNT = _build_case_table()


@dataclass(frozen=True)
class TetGrid:
    vertices: np.ndarray  # (Nv, 3)
    tets: np.ndarray  # (T, 4), positively oriented
    edges: np.ndarray  # (E, 2), i < j, sorted by (i, j)
    tet_edges: np.ndarray  # (T, 6) index into edges, ordered as TET_EDGES
    resolution: int
    lo: np.ndarray
    hi: np.ndarray

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def edge_lengths(self) -> np.ndarray:
        v = self.vertices
        return np.linalg.norm(v[self.edges[:, 1]] - v[self.edges[:, 0]], axis=1)


def build_tet_grid(R: int, bounds) -> TetGrid:
    """(R+1)^3 lattice, each cube cut into the 6 Freudenthal tetrahedra that
    share its main diagonal."""
    if R < 2:
        raise ValueError(f"tet grid resolution must be >= 2, got {R}")
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (3,)).copy() for b in bounds)
    n = R + 1
    axes = [np.linspace(lo[k], hi[k], n) for k in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    verts = np.stack([X, Y, Z], -1).reshape(-1, 3)

    def vid(i, j, k):
        return (i * n + j) * n + k

    i, j, k = np.meshgrid(np.arange(R), np.arange(R), np.arange(R), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    steps = np.eye(3, dtype=np.int64)
    tets = []
    for perm in permutations(range(3)):
        corner = np.zeros(3, dtype=np.int64)
        path = [corner.copy()]
        for ax in perm:
            corner = corner + steps[ax]
            path.append(corner.copy())
        path = np.array(path)
        e = path[1:] - path[0]
        if np.linalg.det(e.astype(float)) < 0:
            path = path[[0, 1, 3, 2]]
        tets.append(np.stack([vid(i + o[0], j + o[1], k + o[2]) for o in path], 1))
    # cube-major order: the six tets of one cube are contiguous
    tets = np.stack(tets, 1).reshape(-1, 4)

    pairs = tets[:, TET_EDGES]  # (T, 6, 2)
    a, b = pairs.min(2), pairs.max(2)
    keys = a * len(verts) + b
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    edges = np.stack([uniq // len(verts), uniq % len(verts)], 1)
    return TetGrid(verts, tets, edges, inverse.reshape(-1, 6), R, lo, hi)


def lattice_bounds(posed: PosedBody, margin: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Cube around the posed guidance mesh, half-extent inflated by ``margin``."""
    lo, hi = posed.aabb()
    c = 0.5 * (lo + hi)
    h = 0.5 * float((hi - lo).max()) * (1.0 + margin)
    return c - h, c + h


@dataclass
class GridSDF:
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("GridSDF values must be finite")


def populate_sdf(grid: TetGrid, posed: PosedBody, fs, w_geo) -> GridSDF:
    """Query the canonical SDF at every lattice vertex pulled back through the
    inverse warp. Vertices whose blend is singular are pushed far outside."""
    d = np.empty(len(grid.vertices))
    degenerate = 0
    for s in range(0, len(d), CHUNK):
        pts = grid.vertices[s:s + CHUNK]
        xc, _, ok = posed.inverse_warp_batch(pts)
        out = np.full(len(pts), grid.diagonal)
        if ok.any():
            out[ok] = fs.sdf(w_geo, xc[ok])
        degenerate += int((~ok).sum())
        d[s:s + CHUNK] = out
    prov = {
        "pose": posed.params.to_vector().tolist(),
        "shape": posed.params.shape.tolist(),
        "degenerate_vertices": degenerate,
    }
    prov.update({k: v for k, v in getattr(fs, "meta", {}).items() if k.endswith("seed")})
    return GridSDF(d, prov)


def positive(d) -> np.ndarray:
    """Sign convention: zero counts as outside."""
    return np.asarray(d) >= 0.0


def crossing_edges(grid: TetGrid, d) -> np.ndarray:
    d = d.values if isinstance(d, GridSDF) else np.asarray(d)
    s = positive(d)
    return np.flatnonzero(s[grid.edges[:, 0]] != s[grid.edges[:, 1]])


@dataclass
class ExtractedMesh:
    vertices: np.ndarray  # (M, 3)
    faces: np.ndarray  # (K, 3)
    edge_vertices: np.ndarray  # (M, 2) grid vertex ids (i < j) of the parent edge
    t: np.ndarray  # (M,) interpolation parameter from i towards j
    edge_ids: np.ndarray  # (M,) index into grid.edges
    face_tets: np.ndarray  # (K,) source tet per face
    canonical: dict = field(default_factory=dict)  # lazily filled (x_c, v*) cache

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def canonical_correspondence(self, posed: PosedBody):
        key = id(posed)
        if key not in self.canonical:
            self.canonical[key] = posed.inverse_warp_batch(self.vertices)
        return self.canonical[key]


def interpolate_crossings(vi, vj, di, dj):
    t = di / (di - dj)
    return vi + t[:, None] * (vj - vi), t


def marching_tetrahedra(grid: TetGrid, d) -> ExtractedMesh:
    d = d.values if isinstance(d, GridSDF) else np.asarray(d, dtype=float)
    s = positive(d)
    ce = np.flatnonzero(s[grid.edges[:, 0]] != s[grid.edges[:, 1]])
    ev = grid.edges[ce]
    verts, t = interpolate_crossings(grid.vertices[ev[:, 0]], grid.vertices[ev[:, 1]], d[ev[:, 0]], d[ev[:, 1]])
    vert_of_edge = np.full(len(grid.edges), -1, dtype=np.int64)
    vert_of_edge[ce] = np.arange(len(ce))

    inside = ~s
    code = np.zeros(len(grid.tets), dtype=np.int64)
    for k in range(4):
        code |= inside[grid.tets[:, k]].astype(np.int64) << k
    active = np.flatnonzero(CASE_COUNT[code] > 0)
    c = code[active]
    faces, order, tets = [], [], []
    for slot in range(2):
        sel = CASE_COUNT[c] > slot
        t_ids = active[sel]
        local = CASE_TRIS[c[sel], slot]  # (n, 3) local edge ids
        gedges = np.take_along_axis(grid.tet_edges[t_ids], local, axis=1)
        faces.append(vert_of_edge[gedges])
        order.append(t_ids * 2 + slot)
        tets.append(t_ids)
    faces = np.concatenate(faces)
    perm = np.argsort(np.concatenate(order), kind="stable")
    return ExtractedMesh(
        vertices=verts,
        faces=faces[perm].reshape(-1, 3),
        edge_vertices=ev,
        t=t,
        edge_ids=ce,
        face_tets=np.concatenate(tets)[perm],
    )


def mt_vertex_jacobian(mesh: ExtractedMesh, d, grid: TetGrid):
    """Closed-form dv/dd_i and dv/dd_j for every extracted vertex, each (M, 3)."""
    d = d.values if isinstance(d, GridSDF) else np.asarray(d, dtype=float)
    i, j = mesh.edge_vertices[:, 0], mesh.edge_vertices[:, 1]
    di, dj = d[i], d[j]
    span = grid.vertices[j] - grid.vertices[i]
    denom = (di - dj) ** 2
    return (-dj / denom)[:, None] * span, (di / denom)[:, None] * span


def mesh_vertex_grad_to_sdf(mesh: ExtractedMesh, d, grid: TetGrid, grad_v) -> np.ndarray:
    """Pull dLoss/dVertex (M, 3) back to dLoss/dd over the whole grid."""
    jac_i, jac_j = mt_vertex_jacobian(mesh, d, grid)
    out = np.zeros(len(grid.vertices))
    np.add.at(out, mesh.edge_vertices[:, 0], np.einsum("md,md->m", grad_v, jac_i))
    np.add.at(out, mesh.edge_vertices[:, 1], np.einsum("md,md->m", grad_v, jac_j))
    return out


def mesh_edges(faces) -> np.ndarray:
    """Undirected edges with multiplicity, as a sorted (E, 2) array per face side."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.sort(e, axis=1)


def euler_characteristic(mesh: ExtractedMesh) -> int:
    e = np.unique(mesh_edges(mesh.faces), axis=0)
    used = np.unique(mesh.faces)
    return len(used) - len(e) + len(mesh.faces)


def is_two_manifold(mesh: ExtractedMesh) -> bool:
    _, counts = np.unique(mesh_edges(mesh.faces), axis=0, return_counts=True)
    return bool(np.all(counts == 2))
