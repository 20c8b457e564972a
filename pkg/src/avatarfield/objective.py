"""Regularisers, fitting losses and the two gradient-descent loops: a per-vertex
SDF fit through marching tetrahedra and a finite-difference latent inversion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .tetmesh import (ExtractedMesh, GridSDF, TetGrid, crossing_edges, marching_tetrahedra,
                      mesh_vertex_grad_to_sdf, positive)

MAX_FD_LATENT_DIM = 64


class DivergenceError(FloatingPointError):
    """Raised when a fitting loop produces a non-finite loss."""


@dataclass(frozen=True)
class LossWeights:
    eik: float = 0.001
    ce: float = 0.01

    def __post_init__(self):
        if not (self.eik >= 0 and self.ce >= 0):
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 200
    # per-vertex chamfer gradients carry a 1/vertex-count factor, hence the large default
    step_size: float = 600.0
    optimizer: str = "gd"  # "gd" | "momentum"
    momentum: float = 0.9
    seed: int = 0
    tolerance: float = 0.0  # stop once the total loss falls below this
    log_every: int = 1
    normalize_ce: bool = True  # mean rather than sum over crossing edges inside fits
    fd_step: float = 0.05  # latent inversion only
    backtracks: int = 4  # latent inversion: step halvings tried before accepting

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        # zero is accepted: it turns a fit into a pure evaluation of the start point
        if not self.step_size >= 0:
            raise ValueError("step size must be >= 0")
        if self.optimizer not in ("gd", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.backtracks < 0:
            raise ValueError("backtracks must be >= 0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


# -- sampling ---------------------------------------------------------------

@dataclass
class SurfaceSamples:
    points: np.ndarray  # (k, 3) deformed space
    faces: np.ndarray  # (k,) source face
    bary: np.ndarray  # (k, 3)
    canonical: np.ndarray | None = None  # (k, 3) pulled back through the inverse warp
    vstar: np.ndarray | None = None
    valid: np.ndarray | None = None


def sample_surface_points(mesh: ExtractedMesh, k: int, seed: int = 0, posed=None) -> SurfaceSamples:
    """Area-weighted uniform samples on the mesh, optionally pulled back to
    canonical space."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    area = mesh.face_areas()
    total = area.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    faces = rng.choice(len(area), size=k, p=area / total)
    r1, r2 = rng.random(k), rng.random(k)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], 1)
    tri = mesh.vertices[mesh.faces[faces]]
    pts = np.einsum("kv,kvd->kd", bary, tri)
    out = SurfaceSamples(pts, faces, bary)
    if posed is not None:
        out.canonical, out.vstar, out.valid = posed.inverse_warp_batch(pts)
    return out


# -- losses -----------------------------------------------------------------

def eikonal_loss(points, fs, w_geo) -> float:
    """Mean of (|grad d| - 1)^2 over canonical points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if len(pts) == 0:
        raise ValueError("eikonal loss needs at least one point")
    g = fs.normal(w_geo, pts, "analytic")
    return float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _values(d):
    return d.values if isinstance(d, GridSDF) else np.asarray(d, dtype=float)


def sdf_cross_entropy(grid: TetGrid, d, normalize: bool = False) -> float:
    """Binary cross-entropy between each crossing-edge endpoint's logistic and
    the other endpoint's sign, summed over both directions and all crossings."""
    return sdf_cross_entropy_and_grad(grid, d, normalize)[0]


def sdf_cross_entropy_and_grad(grid: TetGrid, d, normalize: bool = False):
    d = _values(d)
    grad = np.zeros_like(d)
    ce = crossing_edges(grid, d)
    if len(ce) == 0:
        return 0.0, grad
    i, j = grid.edges[ce, 0], grid.edges[ce, 1]
    yi, yj = positive(d[i]).astype(float), positive(d[j]).astype(float)
    # H(sigmoid(x), y) = softplus(x) - y x, written stably
    loss = np.sum(_softplus(d[i]) - yj * d[i]) + np.sum(_softplus(d[j]) - yi * d[j])
    np.add.at(grad, i, _sigmoid(d[i]) - yj)
    np.add.at(grad, j, _sigmoid(d[j]) - yi)
    if normalize:
        loss /= len(ce)
        grad /= len(ce)
    return float(loss), grad


def edge_eikonal_proxy(grid: TetGrid, d):
    """Mean over crossing edges of (|d_i - d_j| / edge length - 1)^2, the
    discrete stand-in for the Eikonal term on a per-vertex SDF."""
    d = _values(d)
    grad = np.zeros_like(d)
    ce = crossing_edges(grid, d)
    if len(ce) == 0:
        return 0.0, grad
    i, j = grid.edges[ce, 0], grid.edges[ce, 1]
    L = np.linalg.norm(grid.vertices[j] - grid.vertices[i], axis=1)
    diff = d[i] - d[j]
    r = np.abs(diff) / L - 1.0
    g = 2.0 * r * np.sign(diff) / L / len(ce)
    np.add.at(grad, i, g)
    np.add.at(grad, j, -g)
    return float(np.mean(r**2)), grad


def total_loss(adv: float, eik: float, ce: float, w: LossWeights = LossWeights()) -> float:
    vals = (adv, eik, ce)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("loss terms must be finite")
    return adv + w.eik * eik + w.ce * ce


def chamfer(points_a, points_b) -> float:
    return chamfer_and_grad(points_a, points_b)[0]


def chamfer_and_grad(points_a, points_b):
    """Average of the two directed mean squared nearest-neighbour distances and
    its gradient with respect to ``points_a``."""
    a = np.atleast_2d(np.asarray(points_a, dtype=float))
    b = np.atleast_2d(np.asarray(points_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    da, ia = cKDTree(b).query(a)
    db, ib = cKDTree(a).query(b)
    loss = 0.5 * float(np.mean(da**2) + np.mean(db**2))
    grad = (a - b[ia]) / len(a)
    np.add.at(grad, ib, (a[ib] - b) / len(b))
    return loss, grad


def mse_image(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# -- SDF grid fitting ---------------------------------------------------------

@dataclass
class FitResult:
    d: GridSDF
    history: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([h["total"] for h in self.history])


def fit_loss_and_grad(grid: TetGrid, d, target, w: LossWeights = LossWeights(),
                      normalize_ce: bool = True):
    """Chamfer(extracted vertices, target) + ce * cross-entropy + eik * edge
    proxy, with the chamfer gradient pulled through marching tetrahedra."""
    d = _values(d)
    mesh = marching_tetrahedra(grid, d)
    if mesh.is_empty:
        raise DivergenceError("fit produced an empty surface")
    ch, gv = chamfer_and_grad(mesh.vertices, target)
    g = mesh_vertex_grad_to_sdf(mesh, d, grid, gv)
    ce, gce = sdf_cross_entropy_and_grad(grid, d, normalize_ce)
    eik, geik = edge_eikonal_proxy(grid, d)
    total = ch + w.ce * ce + w.eik * eik
    terms = {"chamfer": ch, "cross_entropy": ce, "eikonal": eik, "total": total,
             "vertices": len(mesh.vertices)}
    return terms, g + w.ce * gce + w.eik * geik


def fit_sdf_grid(grid: TetGrid, d0, target, cfg: FitConfig = FitConfig(),
                 w: LossWeights = LossWeights()) -> FitResult:
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if target.size == 0:
        raise ValueError("fit target is empty")
    d = _values(d0).copy()
    prov = dict(d0.provenance) if isinstance(d0, GridSDF) else {}
    velocity = np.zeros_like(d)
    history = []
    for it in range(cfg.iterations):
        terms, g = fit_loss_and_grad(grid, d, target, w, cfg.normalize_ce)
        if not math.isfinite(terms["total"]) or not np.all(np.isfinite(g)):
            raise DivergenceError(f"loss became non-finite at iteration {it}: {terms}")
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            history.append({"iteration": it, **terms})
        if terms["total"] < cfg.tolerance:
            break
        if cfg.optimizer == "momentum":
            velocity = cfg.momentum * velocity - cfg.step_size * g
            d = d + velocity
        else:
            d = d - cfg.step_size * g
    prov["fit"] = {"iterations": cfg.iterations, "step_size": cfg.step_size, "optimizer": cfg.optimizer}
    return FitResult(GridSDF(d, prov), history)


# -- latent inversion --------------------------------------------------------

IMAGE_CHANNELS = ("rgb", "mask", "normal_map")


def stack_channels(buffers) -> np.ndarray:
    """(H, W, 7) image: rgb, mask, encoded normal."""
    return np.concatenate([np.asarray(buffers.rgb, dtype=float),
                           np.asarray(buffers.mask, dtype=float)[..., None],
                           np.asarray(buffers.normal_map, dtype=float)], axis=-1)


def image_loss(buffers, target) -> float:
    """Sum of the per-channel image MSEs over rgb, mask and normal map."""
    return sum(mse_image(np.asarray(getattr(buffers, ch), dtype=float),
                         np.asarray(getattr(target, ch), dtype=float)) for ch in IMAGE_CHANNELS)


@dataclass
class LatentFitResult:
    latent: object
    loss: float
    history: list[dict] = field(default_factory=list)


def fit_latent(target, render: Callable, init,
               cfg: FitConfig = FitConfig(iterations=10, step_size=0.5, fd_step=0.2, backtracks=6),
               ) -> LatentFitResult:
    """Minimise image MSE over (z_geo, z_tex) with central finite-difference
    gradients. ``render(latent)`` must return RenderBuffers; ``init`` is a
    LatentCode. Returns the best latent seen."""
    dim = len(init.z_geo)
    if dim > MAX_FD_LATENT_DIM or len(init.z_tex) > MAX_FD_LATENT_DIM:
        raise ValueError(f"latent dimension {dim} exceeds the finite-difference budget {MAX_FD_LATENT_DIM}")
    cls = type(init)
    z = init.vector().astype(float)

    def loss_at(v):
        return image_loss(render(cls.from_vector(v, dim)), target)

    best_z, best = z.copy(), loss_at(z)
    cur = best
    history = [{"iteration": 0, "loss": best}]
    velocity = np.zeros_like(z)
    h = cfg.fd_step
    for it in range(1, cfg.iterations + 1):
        g = np.empty_like(z)
        for k in range(len(z)):
            e = np.zeros_like(z)
            e[k] = h
            g[k] = (loss_at(z + e) - loss_at(z - e)) / (2 * h)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite latent gradient at iteration {it}")
        if cfg.optimizer == "momentum":
            velocity = cfg.momentum * velocity - cfg.step_size * g
            z = z + velocity
            cur = loss_at(z)
        else:
            # geometry and texture halves get separate backtracking searches
            # along their own gradient direction; step_size is a length in latent
            # units because the raw gradient scale swings with silhouette pixels
            for block in (slice(0, dim), slice(dim, None)):
                gb = g[block]
                norm = float(np.linalg.norm(gb))
                if norm == 0.0:
                    continue
                step = cfg.step_size
                for _ in range(cfg.backtracks + 1):
                    trial = z.copy()
                    trial[block] -= step * gb / norm
                    val = loss_at(trial)
                    if val < cur:
                        z, cur = trial, val
                        break
                    step *= 0.5
        if not math.isfinite(cur):
            raise DivergenceError(f"non-finite image loss at iteration {it}")
        if cur < best:
            best, best_z = cur, z.copy()
        if it % cfg.log_every == 0 or it == cfg.iterations:
            history.append({"iteration": it, "loss": cur})
        if cur < cfg.tolerance:
            break
    return LatentFitResult(cls.from_vector(best_z, dim), best, history)
