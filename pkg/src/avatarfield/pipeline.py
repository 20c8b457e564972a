"""Glue shared by the CLI and the tests: pose a body, extract the surface, and
render it from a list of cameras."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .body import PosedBody, PoseShapeParams
from .fields import FieldSet, LatentCode
from .render import Camera, RenderBuffers, rasterize, recolor, shade
from .tetmesh import ExtractedMesh, GridSDF, TetGrid, build_tet_grid, lattice_bounds, \
    marching_tetrahedra, populate_sdf

_GRID_CACHE: "OrderedDict[tuple, TetGrid]" = OrderedDict()


def tet_grid(R: int, bounds) -> TetGrid:
    """Lattice construction is pure; keep the last few around."""
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    key = (R, lo.tobytes(), hi.tobytes())
    if key not in _GRID_CACHE:
        _GRID_CACHE[key] = build_tet_grid(R, (lo, hi))
        while len(_GRID_CACHE) > 4:
            _GRID_CACHE.popitem(last=False)
    return _GRID_CACHE[key]


@dataclass
class Extraction:
    posed: PosedBody
    grid: TetGrid
    sdf: GridSDF
    mesh: ExtractedMesh

    def stats(self) -> dict:
        from .tetmesh import crossing_edges
        return {
            "tet_resolution": self.grid.resolution,
            "grid_vertices": len(self.grid.vertices),
            "tets": len(self.grid.tets),
            "crossing_edges": int(len(crossing_edges(self.grid, self.sdf))),
            "mesh_vertices": int(len(self.mesh.vertices)),
            "mesh_faces": int(len(self.mesh.faces)),
            "degenerate_vertices": self.sdf.provenance.get("degenerate_vertices", 0),
            "bounds": [self.grid.lo.tolist(), self.grid.hi.tolist()],
        }


def extract(fs: FieldSet, params: PoseShapeParams, w_geo, R: int, margin: float = 0.1,
            posed: PosedBody | None = None) -> Extraction:
    posed = posed if posed is not None else PosedBody(fs.body, params)
    grid = tet_grid(R, lattice_bounds(posed, margin))
    d = populate_sdf(grid, posed, fs, w_geo)
    return Extraction(posed, grid, d, marching_tetrahedra(grid, d))


def render_view(ex: Extraction, fs: FieldSet, latents: LatentCode, cam: Camera) -> RenderBuffers:
    buf = rasterize(ex.mesh, cam)
    return shade(buf, ex.posed, fs, latents, ex.mesh, cam)


class LatentRenderer:
    """``render(latent)`` for inversion. Geometry work depends only on z_geo,
    so shaded buffers are cached per z_geo and only recoloured when z_tex moves."""

    def __init__(self, fs: FieldSet, params: PoseShapeParams, cam: Camera, R: int,
                 margin: float = 0.1, cache_size: int = 4):
        self.fs, self.cam, self.R, self.margin = fs, cam, R, margin
        self.posed = PosedBody(fs.body, params)
        self.cache_size = cache_size
        self._cache: "OrderedDict[bytes, tuple]" = OrderedDict()
        self.geometry_renders = 0

    def geometry(self, z_geo) -> tuple[Extraction, RenderBuffers, np.ndarray]:
        z_geo = np.asarray(z_geo, dtype=float)
        key = z_geo.tobytes()
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        w_geo = self.fs.map_latents(LatentCode(z_geo, z_geo)).w_geo
        ex = extract(self.fs, self.posed.params, w_geo, self.R, self.margin, posed=self.posed)
        zero = LatentCode(z_geo, np.zeros(self.fs.latent_dim))
        buf = render_view(ex, self.fs, zero, self.cam)
        self._cache[key] = (ex, buf, w_geo)
        self.geometry_renders += 1
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return self._cache[key]

    def __call__(self, latent: LatentCode) -> RenderBuffers:
        _, buf, w_geo = self.geometry(latent.z_geo)
        w_tex = self.fs.map_latents(latent).w_tex
        return recolor(buf, self.fs, w_geo, w_tex)
