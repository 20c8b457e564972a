"""Three axis-aligned feature planes sampled by projection and bilinear lookup."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

# plane k spans world axes PLANE_AXES[k]: XY, XZ, YZ
PLANE_AXES = ((0, 1), (0, 2), (1, 2))
AGGREGATIONS = ("sum", "concat")

_MAGIC = b"TPL1"


@dataclass(frozen=True)
class TriPlane:
    planes: np.ndarray  # (3, N, N, C); planes[k][i, j] is node (u=i, v=j)
    lo: np.ndarray  # (3,) cube minimum corner
    hi: np.ndarray  # (3,) cube maximum corner
    aggregation: str = "sum"

    def __post_init__(self):
        if self.planes.ndim != 4 or self.planes.shape[0] != 3 or self.planes.shape[1] != self.planes.shape[2]:
            raise ValueError("planes must have shape (3, N, N, C)")
        if self.resolution < 2:
            raise ValueError(f"triplane resolution must be >= 2, got {self.resolution}")
        if self.channels < 1:
            raise ValueError("triplane needs at least one channel")
        if np.any(self.hi <= self.lo):
            raise ValueError("empty triplane bounds")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    @property
    def feature_dim(self) -> int:
        return self.channels * (3 if self.aggregation == "concat" else 1)

    @property
    def cell_size(self) -> np.ndarray:
        return (self.hi - self.lo) / (self.resolution - 1)

    def sample(self, points) -> np.ndarray:
        return self._lookup(points, with_grad=False)[0]

    def sample_with_grad(self, points):
        """Features, their Jacobian w.r.t. the query point (P, F, 3) and the
        bilinear taps ``(node_index (P, 3, 4, 2), weights (P, 3, 4))`` per plane."""
        return self._lookup(points, with_grad=True)

    def _lookup(self, points, with_grad):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        N, C = self.resolution, self.channels
        cell = self.cell_size
        u = (pts - self.lo) / cell
        inside = (u >= 0.0) & (u <= N - 1)
        u = np.clip(u, 0.0, N - 1)
        # cell index with ties at interior nodes going to the lower cell
        i0 = np.clip(np.ceil(u).astype(np.int64) - 1, 0, N - 2)
        frac = u - i0

        feats, jacs = [], []
        nodes = np.empty((len(pts), 3, 4, 2), dtype=np.int64)
        weights = np.empty((len(pts), 3, 4))
        for k, (a, b) in enumerate(PLANE_AXES):
            P = self.planes[k]
            ia, ib = i0[:, a], i0[:, b]
            fa, fb = frac[:, a:a + 1], frac[:, b:b + 1]
            g00 = P[ia, ib]
            g10 = P[ia + 1, ib]
            g01 = P[ia, ib + 1]
            g11 = P[ia + 1, ib + 1]
            feats.append((1 - fa) * (1 - fb) * g00 + fa * (1 - fb) * g10 + (1 - fa) * fb * g01 + fa * fb * g11)
            if with_grad:
                jac = np.zeros((len(pts), C, 3))
                jac[:, :, a] = ((1 - fb) * (g10 - g00) + fb * (g11 - g01)) * (inside[:, a] / cell[a])[:, None]
                jac[:, :, b] = ((1 - fa) * (g01 - g00) + fa * (g11 - g10)) * (inside[:, b] / cell[b])[:, None]
                jacs.append(jac)
                nodes[:, k, 0] = np.stack([ia, ib], 1)
                nodes[:, k, 1] = np.stack([ia + 1, ib], 1)
                nodes[:, k, 2] = np.stack([ia, ib + 1], 1)
                nodes[:, k, 3] = np.stack([ia + 1, ib + 1], 1)
                fa1, fb1 = fa[:, 0], fb[:, 0]
                weights[:, k] = np.stack(
                    [(1 - fa1) * (1 - fb1), fa1 * (1 - fb1), (1 - fa1) * fb1, fa1 * fb1], 1)

        if self.aggregation == "sum":
            feat = feats[0] + feats[1] + feats[2]
            jac = jacs[0] + jacs[1] + jacs[2] if with_grad else None
        else:
            feat = np.concatenate(feats, axis=1)
            jac = np.concatenate(jacs, axis=1) if with_grad else None
        if not with_grad:
            return feat, None, None
        return feat, jac, (nodes, weights)

    def plane_gradient(self, taps, grad_feat) -> np.ndarray:
        """Accumulate dLoss/dFeature (P, F) into dLoss/dPlanes (3, N, N, C)."""
        nodes, weights = taps
        N, C = self.resolution, self.channels
        out = np.zeros_like(self.planes)
        for k in range(3):
            g = grad_feat if self.aggregation == "sum" else grad_feat[:, k * C:(k + 1) * C]
            flat = out[k].reshape(N * N, C)
            for t in range(4):
                idx = nodes[:, k, t, 0] * N + nodes[:, k, t, 1]
                np.add.at(flat, idx, weights[:, k, t, None] * g)
        return out

    def to_bytes(self) -> bytes:
        N, C = self.resolution, self.channels
        head = _MAGIC + struct.pack("<III", N, C, AGGREGATIONS.index(self.aggregation))
        head += struct.pack("<6d", *self.lo, *self.hi)
        return head + self.planes.astype("<f4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> "TriPlane":
        if data[:4] != _MAGIC:
            raise ValueError("not a triplane dump")
        N, C, agg = struct.unpack_from("<III", data, 4)
        bounds = struct.unpack_from("<6d", data, 16)
        payload = np.frombuffer(data, dtype="<f4", offset=64, count=3 * N * N * C)
        return cls(payload.astype(float).reshape(3, N, N, C), np.array(bounds[:3]),
                   np.array(bounds[3:]), AGGREGATIONS[agg])

    def replace_planes(self, planes) -> "TriPlane":
        return TriPlane(np.asarray(planes, dtype=float), self.lo, self.hi, self.aggregation)


def cube_bounds(bounds) -> tuple[np.ndarray, np.ndarray]:
    """Accept a scalar half-extent, a (lo, hi) scalar pair or a pair of xyz corners."""
    if np.isscalar(bounds):
        h = float(bounds)
        return np.full(3, -h), np.full(3, h)
    lo, hi = bounds
    return np.broadcast_to(np.asarray(lo, dtype=float), (3,)).copy(), \
        np.broadcast_to(np.asarray(hi, dtype=float), (3,)).copy()


def new_triplane(N: int, C: int, bounds=1.0, init: str = "random", seed: int = 0,
                 scale: float = 0.5, aggregation: str = "sum", coarse: int = 8) -> TriPlane:
    """Seeded initialisation: ``random`` (iid normal per node), ``smooth``
    (normal on a coarse grid, bilinearly upsampled) or ``zero``. Values are
    rounded to float32 so a dump/load round trip is bit-exact."""
    if N < 2:
        raise ValueError(f"triplane resolution must be >= 2, got {N}")
    if C < 1:
        raise ValueError(f"triplane channels must be >= 1, got {C}")
    lo, hi = cube_bounds(bounds)
    if init == "zero":
        planes = np.zeros((3, N, N, C))
    elif init == "random":
        rng = np.random.default_rng(seed)
        planes = (scale * rng.standard_normal((3, N, N, C))).astype(np.float32).astype(float)
    elif init == "smooth":
        rng = np.random.default_rng(seed)
        G = max(2, min(N, coarse))
        coarse_planes = scale * rng.standard_normal((3, G, G, C))
        src = np.linspace(0.0, 1.0, G)
        dst = np.linspace(0.0, 1.0, N)
        up = np.empty((3, N, G, C))
        for k in range(3):
            for j in range(G):
                for c in range(C):
                    up[k, :, j, c] = np.interp(dst, src, coarse_planes[k, :, j, c])
        planes = np.empty((3, N, N, C))
        for k in range(3):
            for i in range(N):
                for c in range(C):
                    planes[k, i, :, c] = np.interp(dst, src, up[k, i, :, c])
        planes = planes.astype(np.float32).astype(float)
    else:
        raise ValueError(f"unknown triplane init {init!r}")
    return TriPlane(planes, lo, hi, aggregation)
