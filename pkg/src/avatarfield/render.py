"""Perspective z-buffer rasterizer and deferred canonical-space shading."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .body import PosedBody
from .tetmesh import ExtractedMesh

DEFAULT_RADIUS = 2.3
DEFAULT_FOV = 49.13
NEAR, FAR = 0.05, 100.0
BAND = 8  # rows per parallel tile
AREA_EPS = 1e-12
SHADE_CHUNK = 65536


@dataclass(frozen=True)
class Camera:
    radius: float = DEFAULT_RADIUS
    azimuth: float = 0.0
    elevation: float = 0.0
    fov: float = DEFAULT_FOV  # vertical, degrees
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("camera radius must be > 0")
        if not 0 < self.fov < 180:
            raise ValueError("camera fov must be in (0, 180) degrees")
        if self.width < 1 or self.height < 1:
            raise ValueError("image resolution must be at least 1x1")
        if not abs(self.elevation) < math.pi / 2:
            raise ValueError("elevation must be strictly between -pi/2 and pi/2")

    @property
    def wrapped_azimuth(self) -> float:
        # snap to a 1e-9 rad grid so azimuth and azimuth + 2*pi give identical bits
        a = math.fmod(self.azimuth, 2 * math.pi)
        if a < 0:
            a += 2 * math.pi
        a = round(a * 1e9) / 1e9
        return 0.0 if a >= round(2 * math.pi * 1e9) / 1e9 else a

    @property
    def position(self) -> np.ndarray:
        az, el = self.wrapped_azimuth, self.elevation
        return self.radius * np.array([math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; camera looks down its -z axis, +y up."""
        eye = self.position
        f = -eye / np.linalg.norm(eye)
        right = np.cross(f, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, f)
        return np.stack([right, up, -f])

    def to_camera(self, pts) -> np.ndarray:
        return (np.asarray(pts) - self.position) @ self.rotation.T

    def project(self, pts):
        """Pixel coordinates (x right, y down, origin top-left) and view depth."""
        c = self.to_camera(pts)
        w = -c[:, 2]
        t = math.tan(math.radians(self.fov) / 2)
        aspect = self.width / self.height
        with np.errstate(divide="ignore", invalid="ignore"):
            nx = c[:, 0] / (w * t * aspect)
            ny = c[:, 1] / (w * t)
        px = (nx + 1.0) * 0.5 * self.width
        py = (1.0 - ny) * 0.5 * self.height
        return np.stack([px, py], 1), w


def make_camera(radius=DEFAULT_RADIUS, azimuth=0.0, elevation=0.0, fov=DEFAULT_FOV, w=256, h=256) -> Camera:
    return Camera(float(radius), float(azimuth), float(elevation), float(fov), int(w), int(h))


@dataclass
class RenderBuffers:
    mask: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W) view depth, inf where empty
    coord_map: np.ndarray  # (H, W, 3) deformed-space hit point, NaN where empty
    face_id: np.ndarray  # (H, W) int, -1 where empty
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics
    rgb: np.ndarray | None = None  # (H, W, 3) in [0, 1]
    normal_map: np.ndarray | None = None  # (H, W, 3) camera-space normal encoded (n + 1) / 2
    canonical: np.ndarray | None = None  # (H, W, 3) pulled-back point, NaN where empty or degenerate
    diagnostics: dict = field(default_factory=dict)

    @property
    def covered(self) -> int:
        return int(self.mask.sum())


@njit(cache=True, inline="always")
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@njit(cache=True, inline="always")
def _edge_canonical(ia, ib, xy, px, py):
    # evaluate with endpoints in index order so both faces sharing an edge get
    # exactly opposite values
    if ia < ib:
        return _edge(xy[ia, 0], xy[ia, 1], xy[ib, 0], xy[ib, 1], px, py)
    return -_edge(xy[ib, 0], xy[ib, 1], xy[ia, 0], xy[ia, 1], px, py)


@njit(cache=True, parallel=True)
def _raster_kernel(xy, w, faces, keep, bbox, height, width, zbuf, fid, bary):
    nbands = (height + BAND - 1) // BAND
    nf = faces.shape[0]
    for band in prange(nbands):
        r0 = band * BAND
        r1 = min(height, r0 + BAND)
        for f in range(nf):
            if not keep[f]:
                continue
            ymin, ymax = max(bbox[f, 2], r0), min(bbox[f, 3], r1 - 1)
            if ymin > ymax:
                continue
            a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
            # front faces wind clockwise in y-down pixel space; flip to positive
            area = -_edge(xy[a, 0], xy[a, 1], xy[b, 0], xy[b, 1], xy[c, 0], xy[c, 1])
            for row in range(ymin, ymax + 1):
                py = row + 0.5
                for col in range(bbox[f, 0], bbox[f, 1] + 1):
                    px = col + 0.5
                    e0 = -_edge_canonical(b, c, xy, px, py)
                    if e0 < 0.0:
                        continue
                    e1 = -_edge_canonical(c, a, xy, px, py)
                    if e1 < 0.0:
                        continue
                    e2 = -_edge_canonical(a, b, xy, px, py)
                    if e2 < 0.0:
                        continue
                    l0, l1, l2 = e0 / area, e1 / area, e2 / area
                    q0, q1, q2 = l0 / w[a], l1 / w[b], l2 / w[c]
                    s = q0 + q1 + q2
                    z = 1.0 / s
                    # faces arrive in index order, so strict < keeps the lowest id on ties
                    if z < zbuf[row, col]:
                        zbuf[row, col] = z
                        fid[row, col] = f
                        bary[row, col, 0] = q0 / s
                        bary[row, col, 1] = q1 / s
                        bary[row, col, 2] = q2 / s


def rasterize(mesh: ExtractedMesh, cam: Camera) -> RenderBuffers:
    H, W = cam.height, cam.width
    zbuf = np.full((H, W), np.inf)
    fid = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    faces = np.ascontiguousarray(mesh.faces, dtype=np.int64)
    if len(faces):
        xy, w = cam.project(mesh.vertices)
        fw = w[faces]
        fxy = xy[faces]
        area = -((fxy[:, 1, 0] - fxy[:, 0, 0]) * (fxy[:, 2, 1] - fxy[:, 0, 1])
                 - (fxy[:, 1, 1] - fxy[:, 0, 1]) * (fxy[:, 2, 0] - fxy[:, 0, 0]))
        keep = np.all((fw > NEAR) & (fw < FAR), axis=1) & (area > AREA_EPS)
        with np.errstate(invalid="ignore"):
            lo = np.floor(fxy.min(1) - 0.5)
            hi = np.ceil(fxy.max(1) - 0.5)
        keep &= np.all(np.isfinite(lo) & np.isfinite(hi), axis=1)
        lo = np.where(np.isfinite(lo), lo, 0)
        hi = np.where(np.isfinite(hi), hi, -1)
        bbox = np.stack([
            np.clip(lo[:, 0], 0, W - 1), np.clip(hi[:, 0], -1, W - 1),
            np.clip(lo[:, 1], 0, H - 1), np.clip(hi[:, 1], -1, H - 1),
        ], 1).astype(np.int64)
        keep &= (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3])
        _raster_kernel(np.ascontiguousarray(xy), np.ascontiguousarray(w), faces, keep, bbox,
                       H, W, zbuf, fid, bary)
    mask = fid >= 0
    coord = np.full((H, W, 3), np.nan)
    if mask.any():
        f = fid[mask]
        tri = mesh.vertices[mesh.faces[f]]
        coord[mask] = np.einsum("pk,pkd->pd", bary[mask], tri)
    return RenderBuffers(mask=mask, depth=zbuf, coord_map=coord, face_id=fid, bary=bary)


def shade(buffers: RenderBuffers, posed: PosedBody, fs, latents, mesh: ExtractedMesh,
          cam: Camera) -> RenderBuffers:
    """Fill rgb and the encoded camera-space normal map by pulling every
    covered pixel back to canonical space."""
    H, W = buffers.mask.shape
    rgb = np.zeros((H, W, 3))
    nmap = np.zeros((H, W, 3))
    idx = np.flatnonzero(buffers.mask.ravel())
    pts = buffers.coord_map.reshape(-1, 3)[idx]
    fids = buffers.face_id.ravel()[idx]
    w = fs.map_latents(latents) if latents is not None and hasattr(fs, "map_latents") else None
    w_geo = None if w is None else w.w_geo
    w_tex = None if w is None else w.w_tex
    face_n = mesh.face_normals()
    degenerate = fallback = 0
    out_rgb = np.zeros((len(idx), 3))
    out_n = np.zeros((len(idx), 3))
    out_xc = np.full((len(idx), 3), np.nan)
    for s in range(0, len(idx), SHADE_CHUNK):
        p = pts[s:s + SHADE_CHUNK]
        xc, vstar, ok = posed.inverse_warp_batch(p)
        n_world = face_n[fids[s:s + SHADE_CHUNK]].copy()
        col = np.zeros((len(p), 3))
        if ok.any():
            if hasattr(fs, "color"):
                col[ok] = fs.color(w_geo, w_tex, xc[ok])
            else:
                col[ok] = 0.5
            grad = fs.normal(w_geo, xc[ok], "analytic")
            good = np.linalg.norm(grad, axis=1) >= 1e-8
            n_d, n_ok = posed.skin_normals(np.where(good[:, None], grad, 1.0), vstar[ok])
            use = good & n_ok
            sub = n_world[ok]
            sub[use] = n_d[use]
            n_world[ok] = sub
            fallback += int((~use).sum())
        degenerate += int((~ok).sum())
        fallback += int((~ok).sum())
        out_xc[s:s + SHADE_CHUNK][ok] = xc[ok]
        out_rgb[s:s + SHADE_CHUNK] = col
        out_n[s:s + SHADE_CHUNK] = n_world
    n_cam = out_n @ cam.rotation.T
    rgb.reshape(-1, 3)[idx] = out_rgb
    nmap.reshape(-1, 3)[idx] = (n_cam + 1.0) * 0.5
    canonical = np.full((H, W, 3), np.nan)
    canonical.reshape(-1, 3)[idx] = out_xc
    buffers.rgb = rgb
    buffers.normal_map = nmap
    buffers.canonical = canonical
    buffers.diagnostics = {"degenerate_pixels": degenerate, "fallback_normals": fallback}
    return buffers


def recolor(buffers: RenderBuffers, fs, w_geo, w_tex) -> RenderBuffers:
    """Copy of shaded buffers with only rgb re-evaluated for new latents. The
    pulled-back points do not depend on the texture branch, so they are reused."""
    if buffers.canonical is None:
        raise ValueError("buffers must be shaded before recolouring")
    flat = buffers.canonical.reshape(-1, 3)
    ok = np.flatnonzero(np.isfinite(flat[:, 0]))
    rgb = np.zeros_like(flat)
    for s in range(0, len(ok), SHADE_CHUNK):
        sel = ok[s:s + SHADE_CHUNK]
        rgb[sel] = fs.color(w_geo, w_tex, flat[sel])
    return RenderBuffers(buffers.mask, buffers.depth, buffers.coord_map, buffers.face_id, buffers.bary,
                         rgb.reshape(buffers.canonical.shape), buffers.normal_map, buffers.canonical,
                         dict(buffers.diagnostics))


def decode_normals(normal_map) -> np.ndarray:
    return 2.0 * np.asarray(normal_map) - 1.0


def projected_disk_fraction(radius: float, distance: float, fov_deg: float, aspect: float = 1.0) -> float:
    """Expected mask coverage of a sphere centred on the optical axis."""
    rho = (radius / math.sqrt(distance**2 - radius**2)) / math.tan(math.radians(fov_deg) / 2)
    return math.pi * rho**2 / 4 / aspect
