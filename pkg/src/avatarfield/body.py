"""Skinned body model: kinematic chain, linear blend skinning and the
nearest-vertex inverse warp used to pull deformed-space points back into the
canonical frame.
"""

from __future__ import annotations

import json
from urllib.parse import parse_qs, urlsplit
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

WEIGHT_TOL = 1e-4
DEGENERATE_DET = 1e-8
ROOT = -1

ASSET_DIR = Path(__file__).parent / "assets"


class BodyModelError(ValueError):
    pass


class DegenerateBlendError(ArithmeticError):
    """Blended bone matrix is (near) singular and cannot be inverted."""


@dataclass(frozen=True)
class BodyModel:
    rest_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    joint_parents: np.ndarray  # (J,) int, ROOT for the root
    rest_joints: np.ndarray  # (J, 3)
    skinning_weights: np.ndarray  # (V, J) dense
    shape_basis: np.ndarray | None = None  # (V, 3, K)
    joint_shape_basis: np.ndarray | None = None  # (J, 3, K)
    name: str = ""

    @property
    def joint_count(self) -> int:
        return len(self.joint_parents)

    @property
    def vertex_count(self) -> int:
        return len(self.rest_vertices)

    @property
    def shape_rank(self) -> int:
        if self.shape_basis is not None:
            return self.shape_basis.shape[2]
        if self.joint_shape_basis is not None:
            return self.joint_shape_basis.shape[2]
        return 0

    def shaped_vertices(self, beta=None) -> np.ndarray:
        if beta is None or self.shape_basis is None or len(beta) == 0:
            return self.rest_vertices
        return self.rest_vertices + self.shape_basis @ np.asarray(beta, dtype=float)

    def shaped_joints(self, beta=None) -> np.ndarray:
        if beta is None or self.joint_shape_basis is None or len(beta) == 0:
            return self.rest_joints
        return self.rest_joints + self.joint_shape_basis @ np.asarray(beta, dtype=float)

    def joint_order(self) -> list[int]:
        """Joints sorted so every parent precedes its children."""
        return _topological_order(self.joint_parents)

    def validate(self) -> None:
        V, J = self.vertex_count, self.joint_count
        if self.rest_vertices.ndim != 2 or self.rest_vertices.shape[1] != 3:
            raise BodyModelError("vertices must be xyz triples")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise BodyModelError("faces must be index triples")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= V):
            raise BodyModelError("face index out of range")
        if self.rest_joints.shape != (J, 3):
            raise BodyModelError("rest_joints must have one xyz point per joint")
        if self.skinning_weights.shape != (V, J):
            raise BodyModelError("skinning weights must cover every vertex")
        if np.any(self.skinning_weights < 0):
            raise BodyModelError("negative skinning weight")
        sums = self.skinning_weights.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > WEIGHT_TOL):
            raise BodyModelError("weights not normalized")
        _topological_order(self.joint_parents)
        for arr in (self.rest_vertices, self.rest_joints, self.skinning_weights):
            if not np.all(np.isfinite(arr)):
                raise BodyModelError("non-finite model data")
        if self.shape_basis is not None and self.shape_basis.shape[:2] != (V, 3):
            raise BodyModelError("shape_basis must be (V, 3, K)")
        if self.joint_shape_basis is not None:
            if self.joint_shape_basis.shape[:2] != (J, 3):
                raise BodyModelError("joint_shape_basis must be (J, 3, K)")
            if self.shape_basis is not None and self.joint_shape_basis.shape[2] != self.shape_basis.shape[2]:
                raise BodyModelError("shape bases disagree on rank")


def _topological_order(parents) -> list[int]:
    parents = [int(p) for p in parents]
    n = len(parents)
    roots = [i for i, p in enumerate(parents) if p < 0]
    for p in parents:
        if p >= n:
            raise BodyModelError("joint parent index out of range")
    if not roots and n:
        # every joint has a parent, so following parents must loop
        raise BodyModelError("cyclic joint hierarchy (no root joint)")
    if len(roots) != 1:
        raise BodyModelError(f"expected exactly one root joint, found {len(roots)}")
    order: list[int] = []
    state = [0] * n  # 0 unvisited, 1 on stack, 2 done
    for start in range(n):
        chain = []
        j = start
        while j >= 0 and state[j] == 0:
            state[j] = 1
            chain.append(j)
            j = parents[j]
        if j >= 0 and state[j] == 1:
            raise BodyModelError("cyclic joint hierarchy")
        for k in reversed(chain):
            state[k] = 2
            order.append(k)
    return order


def load_body_model(path) -> BodyModel:
    """Read a body-model JSON document and validate it. ``builtin:<name>`` names
    a shipped asset; ``builtin:icosphere?radius=0.5&subdivisions=4`` builds a
    single-joint sphere template."""
    text = str(path)
    if text.startswith("builtin:icosphere"):
        query = parse_qs(urlsplit(text[len("builtin:"):]).query)
        try:
            radius = float(query.get("radius", ["0.5"])[0])
            level = int(query.get("subdivisions", ["4"])[0])
        except ValueError as exc:
            raise BodyModelError(f"bad icosphere parameters in {text!r}") from exc
        if not radius > 0 or not 0 <= level <= 7:
            raise BodyModelError("icosphere needs radius > 0 and 0 <= subdivisions <= 7")
        return icosphere_body(radius, level)
    path = Path(path)
    if text.startswith("builtin:"):
        path = ASSET_DIR / (text[len("builtin:"):] + ".json")
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise BodyModelError(f"cannot read body model {path}: {exc}") from exc
    return body_model_from_dict(doc, name=path.stem)


def body_model_from_dict(doc: dict, name: str = "") -> BodyModel:
    try:
        verts = np.asarray(doc["vertices"], dtype=float).reshape(-1, 3)
        faces = np.asarray(doc["faces"], dtype=np.int64).reshape(-1, 3)
        parents = np.asarray(doc["joint_parents"], dtype=np.int64)
        joints = np.asarray(doc["rest_joints"], dtype=float).reshape(-1, 3)
        sparse = doc["skinning_weights"]
    except (KeyError, ValueError, TypeError) as exc:
        raise BodyModelError(f"malformed body model: {exc}") from exc
    parents = np.where(parents < 0, ROOT, parents)
    if len(sparse) != len(verts):
        raise BodyModelError("skinning weights must cover every vertex")
    weights = np.zeros((len(verts), len(parents)))
    for v, pairs in enumerate(sparse):
        for j, w in pairs:
            j = int(j)
            if not 0 <= j < len(parents):
                raise BodyModelError(f"vertex {v} weights unknown joint {j}")
            weights[v, j] += float(w)

    def basis(key, rows):
        if doc.get(key) is None:
            return None
        arr = np.asarray(doc[key], dtype=float)
        if arr.size % (rows * 3):
            raise BodyModelError(f"{key} has wrong size")
        return arr.reshape(rows, 3, -1)

    model = BodyModel(
        rest_vertices=verts,
        faces=faces,
        joint_parents=parents,
        rest_joints=joints,
        skinning_weights=weights,
        shape_basis=basis("shape_basis", len(verts)),
        joint_shape_basis=basis("joint_shape_basis", len(parents)),
        name=name,
    )
    model.validate()
    return model


def body_model_to_dict(model: BodyModel) -> dict:
    sparse = []
    for row in model.skinning_weights:
        nz = np.flatnonzero(row)
        sparse.append([[int(j), float(row[j])] for j in nz])
    doc = {
        "vertices": model.rest_vertices.reshape(-1).tolist(),
        "faces": model.faces.reshape(-1).tolist(),
        "joint_parents": [int(p) for p in model.joint_parents],
        "rest_joints": model.rest_joints.reshape(-1).tolist(),
        "skinning_weights": sparse,
    }
    if model.shape_basis is not None:
        doc["shape_basis"] = model.shape_basis.reshape(-1).tolist()
    if model.joint_shape_basis is not None:
        doc["joint_shape_basis"] = model.joint_shape_basis.reshape(-1).tolist()
    return doc


def save_body_model(model: BodyModel, path) -> None:
    Path(path).write_text(json.dumps(body_model_to_dict(model)))


@dataclass(frozen=True)
class PoseShapeParams:
    """Per-joint axis-angle rotations, root translation and shape coefficients."""

    pose: np.ndarray  # (J, 3)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    shape: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def rest(cls, model: BodyModel) -> "PoseShapeParams":
        return cls(np.zeros((model.joint_count, 3)), np.zeros(3), np.zeros(model.shape_rank))

    @classmethod
    def from_vector(cls, theta, beta=(), joint_count: int | None = None) -> "PoseShapeParams":
        """Build from the flat layout ``[axis-angle per joint..., tx, ty, tz]``."""
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if len(theta) % 3 or len(theta) < 6:
            raise ValueError("pose vector must hold 3 values per joint plus a root translation")
        if joint_count is not None and len(theta) != 3 * joint_count + 3:
            raise ValueError(f"pose vector length {len(theta)} != 3*{joint_count}+3")
        if not np.all(np.isfinite(theta)):
            raise ValueError("non-finite pose entries")
        beta = np.asarray(beta, dtype=float).reshape(-1)
        return cls(theta[:-3].reshape(-1, 3), theta[-3:].copy(), beta)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.pose.reshape(-1), self.translation])

    def check(self, model: BodyModel) -> None:
        if self.pose.shape != (model.joint_count, 3):
            raise ValueError(f"pose must have {model.joint_count} axis-angle triples")
        if len(self.shape) not in (0, model.shape_rank):
            raise ValueError(f"shape vector length must be 0 or {model.shape_rank}")
        for arr in (self.pose, self.translation, self.shape):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite pose/shape entries")


@dataclass(frozen=True)
class BoneTransforms:
    matrices: np.ndarray  # (J, 4, 4) canonical -> deformed

    @property
    def rotations(self) -> np.ndarray:
        return self.matrices[:, :3, :3]


def rodrigues(axis_angle) -> np.ndarray:
    r = np.asarray(axis_angle, dtype=float)
    angle = np.linalg.norm(r)
    if angle == 0.0:
        return np.eye(3)
    k = r / angle
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def forward_kinematics(model: BodyModel, params: PoseShapeParams) -> BoneTransforms:
    params.check(model)
    joints = model.shaped_joints(params.shape)
    parents = model.joint_parents
    G = np.zeros((model.joint_count, 4, 4))
    for j in model.joint_order():
        local = np.eye(4)
        local[:3, :3] = rodrigues(params.pose[j])
        p = parents[j]
        local[:3, 3] = joints[j] if p < 0 else joints[j] - joints[p]
        G[j] = local if p < 0 else G[p] @ local
    B = G.copy()
    # right-multiply by the inverse rest transform (a pure translation by -joint)
    B[:, :3, 3] = G[:, :3, 3] - np.einsum("jab,jb->ja", G[:, :3, :3], joints)
    B[:, :3, 3] += params.translation
    return BoneTransforms(B)


def blend_matrices(weights: np.ndarray, transforms: BoneTransforms) -> np.ndarray:
    """Weighted sums of bone matrices for a batch of weight rows, shape (P, 4, 4)."""
    return np.einsum("pj,jab->pab", weights, transforms.matrices)


def blend_transform(model: BodyModel, vertex: int, transforms: BoneTransforms) -> np.ndarray:
    return blend_matrices(model.skinning_weights[vertex][None], transforms)[0]


def deform_guidance_mesh(model: BodyModel, transforms: BoneTransforms, beta=None) -> np.ndarray:
    verts = model.shaped_vertices(beta)
    M = blend_matrices(model.skinning_weights, transforms)
    return np.einsum("vab,vb->va", M[:, :3, :3], verts) + M[:, :3, 3]


class NearestVertexIndex:
    """Exact nearest-vertex lookup with lowest-index tie breaking."""

    def __init__(self, vertices):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        if len(self.vertices) == 0:
            raise ValueError("empty vertex set")
        self._tree = cKDTree(self.vertices)
        self._k = min(4, len(self.vertices))

    def query(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        _, idx = self._tree.query(pts, k=self._k)
        idx = idx.reshape(len(pts), self._k)
        # exact squared distances so ties compare equal, then lowest index wins
        d2 = np.sum((self.vertices[idx] - pts[:, None, :]) ** 2, axis=2)
        best = d2.min(axis=1, keepdims=True)
        masked = np.where(d2 == best, idx, np.iinfo(np.int64).max)
        out = masked.min(axis=1)
        if self._k < len(self.vertices):
            # every candidate tied: more equidistant vertices may hide beyond k
            crowded = np.flatnonzero(np.all(d2 == best, axis=1))
            for p in crowded:
                ball = self._tree.query_ball_point(pts[p], np.sqrt(best[p, 0]) * (1 + 1e-12) + 1e-300)
                ball = np.asarray(ball)
                dd = np.sum((self.vertices[ball] - pts[p]) ** 2, axis=1)
                out[p] = ball[dd == dd.min()].min()
        return out


def nearest_vertex(index: NearestVertexIndex, point) -> int:
    return int(index.query(np.asarray(point, dtype=float)[None])[0])


class PosedBody:
    """A body model frozen at one pose: bone transforms, deformed guidance
    mesh and the spatial index over it."""

    def __init__(self, model: BodyModel, params: PoseShapeParams | None = None):
        self.model = model
        self.params = params if params is not None else PoseShapeParams.rest(model)
        self.transforms = forward_kinematics(model, self.params)
        self.deformed_vertices = deform_guidance_mesh(model, self.transforms, self.params.shape)
        self.index = NearestVertexIndex(self.deformed_vertices)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.deformed_vertices.min(axis=0), self.deformed_vertices.max(axis=0)

    def inverse_warp_batch(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Un-warp deformed points. Returns (x_c, v*, ok); rows with a singular
        blend have ok=False and x_c = NaN."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vstar = self.index.query(pts)
        M = blend_matrices(self.model.skinning_weights[vstar], self.transforms)
        A = M[:, :3, :3]
        ok = np.abs(np.linalg.det(A)) >= DEGENERATE_DET
        xc = np.full_like(pts, np.nan)
        if ok.any():
            rhs = (pts[ok] - M[ok, :3, 3])[..., None]
            xc[ok] = np.linalg.solve(A[ok], rhs)[..., 0]
        return xc, vstar, ok

    def inverse_warp(self, point) -> tuple[np.ndarray, int]:
        xc, vstar, ok = self.inverse_warp_batch(np.asarray(point, dtype=float)[None])
        if not ok[0]:
            raise DegenerateBlendError(f"degenerate blend at vertex {vstar[0]}")
        return xc[0], int(vstar[0])

    def blended_rotations(self, vstar) -> np.ndarray:
        W = self.model.skinning_weights[np.asarray(vstar)]
        return np.einsum("pj,jab->pab", W, self.transforms.rotations)

    def skin_normals(self, normals, vstar) -> tuple[np.ndarray, np.ndarray]:
        """Rotate canonical normals into deformed space; returns (unit normals,
        ok mask). Rows whose blended rotation collapses them get ok=False."""
        n = np.einsum("pab,pb->pa", self.blended_rotations(vstar), np.atleast_2d(normals))
        norm = np.linalg.norm(n, axis=1)
        ok = norm >= 1e-8
        out = np.zeros_like(n)
        out[ok] = n[ok] / norm[ok, None]
        return out, ok


def inverse_warp(x_d, posed: PosedBody) -> tuple[np.ndarray, int]:
    return posed.inverse_warp(x_d)


def skin_normal(n_c, vertex: int, posed: PosedBody) -> np.ndarray:
    n_c = np.asarray(n_c, dtype=float)
    if not np.any(n_c):
        raise ValueError("zero canonical normal")
    n, ok = posed.skin_normals(n_c[None], [vertex])
    if not ok[0]:
        raise DegenerateBlendError("blended rotation collapses the normal")
    return n[0]


# -- built-in test bodies ---------------------------------------------------


def icosphere(radius: float = 1.0, subdivisions: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Unit-icosahedron subdivision projected to a sphere, outward-facing faces."""
    t = (1.0 + 5**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts) * radius, np.array(faces, dtype=np.int64)


def icosphere_body(radius: float = 0.5, subdivisions: int = 4) -> BodyModel:
    """Single-joint body whose template is an icosphere centred at the origin."""
    v, f = icosphere(radius, subdivisions)
    model = BodyModel(
        rest_vertices=v,
        faces=f,
        joint_parents=np.array([ROOT]),
        rest_joints=np.zeros((1, 3)),
        skinning_weights=np.ones((len(v), 1)),
        name=f"icosphere_r{radius:g}",
    )
    model.validate()
    return model


def capsule_mesh(radius: float, length: float, rings: int, segments: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed capsule along +y from y=0 to y=length: two poles plus ``rings``
    latitude rings of ``segments`` vertices each."""
    half = rings // 2
    ys, rs = [], []
    for k in range(rings):
        if k < half:
            phi = (np.pi / 2) * (k + 1) / half  # bottom cap, pole -> equator
            ys.append(radius - radius * np.cos(phi))
            rs.append(radius * np.sin(phi))
        else:
            phi = (np.pi / 2) * (rings - k) / (rings - half)
            ys.append(length - radius + radius * np.cos(phi))
            rs.append(radius * np.sin(phi))
    verts = [(0.0, 0.0, 0.0)]
    for y, r in zip(ys, rs):
        for s in range(segments):
            a = 2 * np.pi * s / segments
            verts.append((r * np.cos(a), y, -r * np.sin(a)))
    verts.append((0.0, length, 0.0))
    top = len(verts) - 1

    def ring(k, s):
        return 1 + k * segments + (s % segments)

    faces = []
    for s in range(segments):
        faces.append((0, ring(0, s), ring(0, s + 1)))
    for k in range(rings - 1):
        for s in range(segments):
            a, b = ring(k, s), ring(k, s + 1)
            c, d = ring(k + 1, s), ring(k + 1, s + 1)
            faces.append((a, c, b))
            faces.append((b, c, d))
    for s in range(segments):
        faces.append((top, ring(rings - 1, s + 1), ring(rings - 1, s)))
    # the loops above wind inward; flip to outward-facing
    return np.array(verts), np.array(faces, dtype=np.int64)[:, ::-1].copy()


def capsule_chain_body(joint_count: int, rings: int, segments: int, radius=0.15, length=1.6,
                       blend_width=0.12, name="") -> BodyModel:
    """Capsule with a straight joint chain along +y and smooth weights that
    blend between neighbouring bones over ``blend_width`` around each joint."""
    verts, faces = capsule_mesh(radius, length, rings, segments)
    verts = verts - np.array([0.0, length / 2, 0.0])
    joint_y = -length / 2 + length * np.arange(joint_count) / joint_count
    joints = np.stack([np.zeros(joint_count), joint_y, np.zeros(joint_count)], axis=1)
    parents = np.arange(-1, joint_count - 1)
    weights = np.zeros((len(verts), joint_count))
    for v, y in enumerate(verts[:, 1]):
        bone = int(np.clip(np.searchsorted(joint_y, y, side="right") - 1, 0, joint_count - 1))
        weights[v, bone] = 1.0
        for j in range(1, joint_count):
            u = (y - joint_y[j]) / blend_width
            if abs(u) < 1.0:
                child = 0.5 + 0.5 * np.sin(0.5 * np.pi * u)
                weights[v] = 0.0
                weights[v, j - 1] = 1.0 - child
                weights[v, j] = child
    weights = np.round(weights, 12)
    weights /= weights.sum(axis=1, keepdims=True)
    model = BodyModel(verts, faces, parents, joints, weights, name=name)
    model.validate()
    return model
