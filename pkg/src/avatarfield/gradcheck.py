"""Analytic-versus-central-difference checks for every exposed gradient path."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .fields import FieldSet, LatentCode, central_gradient
from .objective import LossWeights, fit_loss_and_grad
from .tetmesh import build_tet_grid, crossing_edges, marching_tetrahedra, mt_vertex_jacobian
from .triplane import new_triplane


@dataclass
class GradRow:
    name: str
    samples: int
    max_rel_err: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tolerance)


def _rel(a, b) -> np.ndarray:
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    scale = np.maximum(np.maximum(np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)), 1e-12)
    return np.linalg.norm(a - b, axis=1) / scale


def cell_interior_points(tp, n: int, rng, margin: float = 0.05) -> np.ndarray:
    """Random points whose fractional cell coordinate stays in [margin, 1 - margin]."""
    N = tp.resolution
    cell = rng.integers(0, N - 1, size=(n, 3))
    frac = rng.uniform(margin, 1.0 - margin, size=(n, 3))
    return tp.lo + (cell + frac) * tp.cell_size


def check_triplane(n: int = 100, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    tp = new_triplane(16, 8, 1.0, "random", seed=seed)
    x = cell_interior_points(tp, n, rng)
    _, jac, _ = tp.sample_with_grad(x)
    h = 1e-5 * float(tp.cell_size[0])
    fd = np.empty_like(jac)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd[:, :, k] = (tp.sample(x + e) - tp.sample(x - e)) / (2 * h)
    return _rel(jac.reshape(n, -1), fd.reshape(n, -1))


def check_normal(fs: FieldSet, latents: LatentCode, n: int = 100, seed: int = 0,
                 h: float = 1e-4) -> np.ndarray:
    """Points are drawn inside the geometry triplane and kept only where the
    whole stencil lies in one smooth piece of d (see FieldSet.smooth_stencil)."""
    rng = np.random.default_rng(seed)
    w = fs.map_latents(latents).w_geo
    tp = fs.tri_geo
    picked = []
    while sum(len(p) for p in picked) < n:
        cand = cell_interior_points(tp, 2 * n, rng)
        picked.append(cand[fs.smooth_stencil(w, cand, h)])
    x = np.concatenate(picked)[:n]
    analytic = fs.normal(w, x, "analytic")
    fd = central_gradient(lambda p: fs.sdf(w, p), x, h)
    return _rel(analytic, fd)


def _noisy_sphere_grid(R: int, seed: int, radius: float = 0.6, noise: float = 0.02):
    rng = np.random.default_rng(seed)
    grid = build_tet_grid(R, (-1.0, 1.0))
    d = np.linalg.norm(grid.vertices, axis=1) - radius + noise * rng.standard_normal(len(grid.vertices))
    return grid, d, rng


def check_mt_jacobian(n: int = 100, seed: int = 0, h: float = 1e-7) -> np.ndarray:
    grid, d, rng = _noisy_sphere_grid(12, seed)
    mesh = marching_tetrahedra(grid, d)
    ji, jj = mt_vertex_jacobian(mesh, d, grid)
    sel = rng.choice(len(mesh.vertices), size=min(n, len(mesh.vertices)), replace=False)
    i, j = mesh.edge_vertices[sel, 0], mesh.edge_vertices[sel, 1]
    vi, vj = grid.vertices[i], grid.vertices[j]

    def pos(di, dj):
        t = di / (di - dj)
        return vi + t[:, None] * (vj - vi)

    fd_i = (pos(d[i] + h, d[j]) - pos(d[i] - h, d[j])) / (2 * h)
    fd_j = (pos(d[i], d[j] + h) - pos(d[i], d[j] - h)) / (2 * h)
    return np.maximum(_rel(ji[sel], fd_i), _rel(jj[sel], fd_j))


def check_fit_loss(n: int = 20, seed: int = 0, h: float = 1e-5,
                   weights: LossWeights = LossWeights()) -> np.ndarray:
    """Entries are drawn from crossing-edge endpoints, the only entries with a
    nonzero gradient; elsewhere both sides are exactly zero."""
    grid, d, rng = _noisy_sphere_grid(16, seed)
    target = rng.standard_normal((300, 3))
    target = 0.5 * target / np.linalg.norm(target, axis=1, keepdims=True)
    _, g = fit_loss_and_grad(grid, d, target, weights)
    active = np.unique(grid.edges[crossing_edges(grid, d)].ravel())
    idx = rng.choice(active, size=min(n, len(active)), replace=False)
    errs = []
    for k in idx:
        e = np.zeros_like(d)
        e[k] = h
        fp = fit_loss_and_grad(grid, d + e, target, weights)[0]["total"]
        fm = fit_loss_and_grad(grid, d - e, target, weights)[0]["total"]
        errs.append(_rel([[g[k]]], [[(fp - fm) / (2 * h)]])[0])
    return np.array(errs)


def run_suite(fs: FieldSet, latents: LatentCode, points: int = 100, seed: int = 0,
              tolerance: float = 1e-4, weights: LossWeights = LossWeights()) -> list[GradRow]:
    rows = []
    checks = [
        ("triplane dfeature/dx", lambda: check_triplane(points, seed)),
        ("field normal (sdf gradient)", lambda: check_normal(fs, latents, points, seed)),
        ("marching-tet vertex jacobian", lambda: check_mt_jacobian(points, seed)),
        ("fit loss d/d(grid sdf)", lambda: check_fit_loss(20, seed, weights=weights)),
    ]
    for name, fn in checks:
        t0 = time.perf_counter()
        err = fn()
        rows.append(GradRow(name, len(err), float(np.max(err)), tolerance, time.perf_counter() - t0))
    return rows


def format_table(rows: list[GradRow]) -> str:
    lines = [f"{'check':<32} {'n':>4} {'max rel err':>12} {'tol':>8}  result"]
    for r in rows:
        lines.append(f"{r.name:<32} {r.samples:>4} {r.max_rel_err:>12.3e} {r.tolerance:>8.1e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
