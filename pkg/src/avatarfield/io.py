"""File formats: OBJ/PLY meshes, PNG images, raw buffer dumps, grid dumps,
CSV histories and JSON manifests. Every writer is byte-deterministic."""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .tetmesh import ExtractedMesh, GridSDF

BUFFER_MAGIC = b"RBF1"
GRID_MAGIC = b"GSD1"


def _fmt(x: float) -> str:
    # repr round-trips doubles exactly and does not depend on locale
    return repr(float(x))


def write_obj(path, vertices, faces) -> None:
    lines = [f"v {_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in np.asarray(vertices, dtype=float)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.int64)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_ply(path, vertices, faces, colors=None, normals=None) -> None:
    """Binary little-endian PLY with optional uint8 colours and float normals."""
    v = np.asarray(vertices, dtype="<f4")
    f = np.asarray(faces, dtype="<i4")
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(v)}",
            "property float x", "property float y", "property float z"]
    fields = [("xyz", "<f4", 3)]
    if normals is not None:
        head += ["property float nx", "property float ny", "property float nz"]
        fields.append(("n", "<f4", 3))
    if colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
        fields.append(("rgb", "u1", 3))
    head += [f"element face {len(f)}", "property list uchar int vertex_indices", "end_header"]
    rec = np.zeros(len(v), dtype=[(n, t, (k,)) for n, t, k in fields])
    rec["xyz"] = v
    if normals is not None:
        rec["n"] = np.asarray(normals, dtype="<f4")
    if colors is not None:
        rec["rgb"] = to_uint8(colors)
    frec = np.zeros(len(f), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    frec["n"] = 3
    frec["idx"] = f
    Path(path).write_bytes(("\n".join(head) + "\n").encode() + rec.tobytes() + frec.tobytes())


def export_mesh(path, mesh: ExtractedMesh, colors=None, normals=None) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        write_ply(path, mesh.vertices, mesh.faces, colors, normals)
    else:
        write_obj(path, mesh.vertices, mesh.faces)


def to_uint8(x) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def write_png_rgb(path, rgb) -> None:
    Path(path).write_bytes(_png_bytes(Image.fromarray(to_uint8(rgb), mode="RGB")))


def write_png_mask(path, mask) -> None:
    Path(path).write_bytes(_png_bytes(Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L")))


def depth_to_uint16(depth, mask) -> np.ndarray:
    """Covered pixels mapped linearly onto 1..65535 (near to far); empty is 0."""
    out = np.zeros(depth.shape, dtype=np.uint16)
    if mask.any():
        z = depth[mask]
        lo, hi = z.min(), z.max()
        span = hi - lo if hi > lo else 1.0
        out[mask] = np.rint(1.0 + (z - lo) / span * 65534.0).astype(np.uint16)
    return out


def write_png_depth(path, depth, mask) -> None:
    img = Image.fromarray(depth_to_uint16(depth, mask))  # uint16 maps to I;16
    Path(path).write_bytes(_png_bytes(img))


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def write_buffer(path, data) -> None:
    """16-byte header (magic, width, height, channels) then float32 LE rows."""
    a = np.asarray(data, dtype=float)
    if a.ndim == 2:
        a = a[:, :, None]
    h, w, c = a.shape
    Path(path).write_bytes(BUFFER_MAGIC + struct.pack("<III", w, h, c) + a.astype("<f4").tobytes())


def read_buffer(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != BUFFER_MAGIC:
        raise ValueError(f"{path}: not a buffer dump")
    w, h, c = struct.unpack_from("<III", data, 4)
    return np.frombuffer(data, dtype="<f4", offset=16, count=w * h * c).reshape(h, w, c).astype(float)


def write_grid_sdf(path, d: GridSDF) -> None:
    head = json.dumps(d.provenance, sort_keys=True).encode()
    Path(path).write_bytes(GRID_MAGIC + struct.pack("<IQ", len(head), len(d.values)) + head
                           + np.asarray(d.values, dtype="<f8").tobytes())


def read_grid_sdf(path) -> GridSDF:
    data = Path(path).read_bytes()
    if data[:4] != GRID_MAGIC:
        raise ValueError(f"{path}: not a grid SDF dump")
    n, count = struct.unpack_from("<IQ", data, 4)
    prov = json.loads(data[16:16 + n])
    vals = np.frombuffer(data, dtype="<f8", offset=16 + n, count=count).copy()
    return GridSDF(vals, prov)


def write_history_csv(path, history: list[dict]) -> None:
    cols = list(history[0].keys()) if history else ["iteration"]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(cols)
    for row in history:
        wr.writerow([_fmt(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    Path(path).write_text(buf.getvalue())


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    return x


def write_manifest(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
