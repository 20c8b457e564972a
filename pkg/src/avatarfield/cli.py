"""Command-line entry point.

Numba reads its thread count at import time, so this module parses arguments
and applies ``--threads`` before importing anything numerical.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = ("generate", "extract-mesh", "render", "fit-sdf", "invert", "retexture", "gradcheck")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avatarfield", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="worker threads (outputs do not depend on it)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, snapshot=False):
        sp.add_argument("--config", "-c", help="YAML run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted path); repeatable")
        sp.add_argument("--paper-scale", dest="full_scale", action="store_true",
                        help="full-scale triplane and latent sizes")
        sp.add_argument("--out", "-o", help="output directory (overrides config 'output')")
        if snapshot:
            sp.add_argument("--snapshot", "-s", required=True, help="FieldSet snapshot from 'generate'")
        return sp

    common(sub.add_parser("generate", help="write a seeded FieldSet snapshot"))
    ex = common(sub.add_parser("extract-mesh", help="pose, populate the tet grid and extract a mesh"), True)
    ex.add_argument("--pose", help="pose file (YAML/JSON with theta, beta)")
    ex.add_argument("--ply", action="store_true", help="also write a shaded PLY")
    ex.add_argument("--dump-sdf", action="store_true", help="also write the grid SDF dump")
    rd = common(sub.add_parser("render", help="render rgb, normal, mask and depth images"), True)
    rd.add_argument("--pose", help="pose file")
    rd.add_argument("--dump-buffers", action="store_true", help="also write raw float32 buffer dumps")
    common(sub.add_parser("fit-sdf", help="fit a grid SDF to a point cloud through marching tetrahedra"))
    common(sub.add_parser("invert", help="recover latents from a rendered target"), True)
    rt = common(sub.add_parser("retexture", help="swap texture latents with geometry fixed"), True)
    rt.add_argument("--pose", help="pose file")
    common(sub.add_parser("gradcheck", help="analytic vs finite-difference gradient suite"))
    return p


def _apply_threads(n):
    if n is None:
        return
    if n < 1:
        raise SystemExit(f"--threads must be >= 1, got {n}")
    os.environ["NUMBA_NUM_THREADS"] = str(n)
    os.environ["OMP_NUM_THREADS"] = "1"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(args.threads)
    from .config import ConfigError
    from .objective import DivergenceError

    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=1):
            return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _dispatch(args) -> int:
    from .config import build_config

    cfg = build_config(args.config, args.overrides, args.full_scale)
    if args.out:
        cfg.output = args.out
    handler = {
        "generate": cmd_generate, "extract-mesh": cmd_extract, "render": cmd_render,
        "fit-sdf": cmd_fit, "invert": cmd_invert, "retexture": cmd_retexture,
        "gradcheck": cmd_gradcheck,
    }[args.command]
    return handler(cfg, args)


# -- helpers ------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest(out: Path, command: str, cfg, outputs: list[Path], **extra) -> None:
    from . import __version__
    from .io import write_manifest

    doc = {
        "command": command,
        "version": __version__,
        "config": cfg.model_dump(mode="json", exclude={"output"}),
        "outputs": {p.relative_to(out).as_posix(): _sha256(p) for p in sorted(outputs)},
    }
    doc.update(extra)
    write_manifest(out / "manifest.json", doc)


def _field_config(cfg):
    from .fields import FieldConfig

    f = cfg.field
    return FieldConfig(
        triplane_res=f.triplane_res, triplane_channels=f.triplane_channels, aggregation=f.aggregation,
        triplane_scale=f.triplane_scale, triplane_init=f.triplane_init, latent_dim=f.latent_dim,
        mapping_layers=f.mapping_layers, mapping_width=f.mapping_width, decoder_layers=f.decoder_layers,
        decoder_width=f.decoder_width, offset_fraction=f.offset_fraction, mod_gain=f.mod_gain,
        offset_gain=f.offset_gain)


def _load_snapshot(path):
    from .config import ConfigError
    from .fields import FieldSet

    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"snapshot not found: {p}")
    try:
        fs, latents = FieldSet.from_bytes(p.read_bytes())
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"unreadable snapshot {p}: {exc}") from None
    if latents is None:
        raise ConfigError(f"snapshot {p} carries no latent codes")
    return fs, latents


def _cameras(cfg):
    from .render import make_camera

    cams = cfg.cameras
    if cfg.turntable > 0:
        base = cams[0]
        return [make_camera(base.radius, base.azimuth + 2 * math.pi * k / cfg.turntable, base.elevation,
                            base.fov, base.width, base.height) for k in range(cfg.turntable)]
    return [make_camera(c.radius, c.azimuth, c.elevation, c.fov, c.width, c.height) for c in cams]


def _view_name(cam) -> str:
    return f"az{math.degrees(cam.wrapped_azimuth):07.3f}_el{math.degrees(cam.elevation):+08.3f}"


def _pose(cfg, body, pose_path):
    from .config import check_pose, load_pose_file

    doc = load_pose_file(pose_path) if pose_path else None
    return check_pose(cfg, body, doc)


def _prepare_out(cfg):
    from .config import check_output

    out = check_output(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_views(out: Path, prefix: str, buf, cam, dump: bool = False) -> list[Path]:
    from .io import write_buffer, write_png_depth, write_png_mask, write_png_rgb

    name = _view_name(cam)
    paths = [out / f"{prefix}rgb_{name}.png", out / f"{prefix}normal_{name}.png",
             out / f"{prefix}mask_{name}.png", out / f"{prefix}depth_{name}.png"]
    write_png_rgb(paths[0], buf.rgb)
    write_png_rgb(paths[1], buf.normal_map)
    write_png_mask(paths[2], buf.mask)
    write_png_depth(paths[3], buf.depth, buf.mask)
    if dump:
        import numpy as np
        extra = [out / f"{prefix}buffer_rgb_{name}.bin", out / f"{prefix}buffer_normal_{name}.bin",
                 out / f"{prefix}buffer_depth_{name}.bin"]
        write_buffer(extra[0], buf.rgb)
        write_buffer(extra[1], buf.normal_map)
        write_buffer(extra[2], np.where(buf.mask, buf.depth, 0.0))
        paths += extra
    return paths


# -- commands -------------------------------------------------------------------

def cmd_generate(cfg, args) -> int:
    from .config import check_body
    from .fields import FieldSet, LatentCode

    body = check_body(cfg)
    fcfg = _field_config(cfg)
    out = _prepare_out(cfg)
    fs = FieldSet.generate(body, fcfg, cfg.seeds.geometry, cfg.seeds.texture)
    latents = LatentCode.sample(fcfg.latent_dim, cfg.seeds.geometry, cfg.seeds.texture)
    snap = out / "fieldset.bin"
    snap.write_bytes(fs.to_bytes(latents))
    _manifest(out, "generate", cfg, [snap], offset_scale=fs.offset_scale, body=body.name,
              body_vertices=body.vertex_count, joints=body.joint_count)
    print(f"wrote {snap}")
    return EXIT_OK


def cmd_extract(cfg, args) -> int:
    from .io import export_mesh, write_grid_sdf
    from .pipeline import extract

    fs, latents = _load_snapshot(args.snapshot)
    params = _pose(cfg, fs.body, args.pose)
    out = _prepare_out(cfg)
    w = fs.map_latents(latents)
    ex = extract(fs, params, w.w_geo, cfg.tet.resolution, cfg.tet.margin)
    outputs = [out / "mesh.obj"]
    export_mesh(outputs[0], ex.mesh)
    if ex.mesh.is_empty:
        print("warning: extraction produced an empty mesh", file=sys.stderr)
    if args.ply and not ex.mesh.is_empty:
        outputs.append(out / "mesh.ply")
        colors, normals = _vertex_attributes(fs, latents, ex)
        export_mesh(outputs[-1], ex.mesh, colors, normals)
    if args.dump_sdf:
        outputs.append(out / "grid_sdf.bin")
        write_grid_sdf(outputs[-1], ex.sdf)
    _manifest(out, "extract-mesh", cfg, outputs, pose=params.to_vector().tolist(),
              shape=params.shape.tolist(), stats=ex.stats())
    print(f"wrote {outputs[0]} ({len(ex.mesh.vertices)} vertices, {len(ex.mesh.faces)} faces)")
    return EXIT_OK


def _vertex_attributes(fs, latents, ex):
    """Per-vertex colour and deformed-space unit normal for shaded exports."""
    import numpy as np

    w = fs.map_latents(latents)
    xc, vstar, ok = ex.posed.inverse_warp_batch(ex.mesh.vertices)
    colors = np.zeros((len(xc), 3))
    normals = np.zeros((len(xc), 3))
    if ok.any():
        colors[ok] = fs.color(w.w_geo, w.w_tex, xc[ok])
        n, n_ok = ex.posed.skin_normals(fs.normal(w.w_geo, xc[ok]), vstar[ok])
        normals[ok] = np.where(n_ok[:, None], n, 0.0)
    return colors, normals


def cmd_render(cfg, args) -> int:
    from .pipeline import extract, render_view

    fs, latents = _load_snapshot(args.snapshot)
    params = _pose(cfg, fs.body, args.pose)
    cams = _cameras(cfg)
    out = _prepare_out(cfg)
    w = fs.map_latents(latents)
    ex = extract(fs, params, w.w_geo, cfg.tet.resolution, cfg.tet.margin)
    outputs, views = [], {}
    for cam in cams:
        buf = render_view(ex, fs, latents, cam)
        outputs += _write_views(out, "", buf, cam, args.dump_buffers)
        views[_view_name(cam)] = {"covered_pixels": buf.covered, **buf.diagnostics,
                                  "mask_fraction": buf.covered / (cam.width * cam.height)}
    _manifest(out, "render", cfg, outputs, stats=ex.stats(), views=views)
    print(f"rendered {len(cams)} view(s) into {out}")
    return EXIT_OK


def _fit_target(cfg):
    import numpy as np

    from .config import ConfigError
    from .io import read_obj

    f = cfg.fit
    if f.target:
        p = Path(f.target)
        if not p.is_file():
            raise ConfigError(f"fit target not found: {p}")
        if p.suffix.lower() == ".obj":
            pts, _ = read_obj(p)
        else:
            try:
                pts = np.loadtxt(p, dtype=float, ndmin=2)
            except ValueError as exc:
                raise ConfigError(f"fit target {p}: {exc}") from None
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ConfigError(f"fit target {p} must hold xyz rows")
        return pts
    rng = np.random.default_rng(f.seed)
    pts = rng.standard_normal((f.target_points, 3))
    return f.target_radius * pts / np.linalg.norm(pts, axis=1, keepdims=True)


def cmd_fit(cfg, args) -> int:
    import numpy as np

    from .io import export_mesh, write_grid_sdf, write_history_csv
    from .objective import FitConfig, LossWeights, fit_sdf_grid
    from .tetmesh import GridSDF, build_tet_grid, marching_tetrahedra

    f = cfg.fit
    target = _fit_target(cfg)
    weights = LossWeights(cfg.loss.eik, cfg.loss.ce)
    fit_cfg = FitConfig(iterations=f.iterations, step_size=f.step_size, optimizer=f.optimizer,
                        seed=f.seed, normalize_ce=f.normalize_ce)
    out = _prepare_out(cfg)
    grid = build_tet_grid(f.resolution, (-f.bounds, f.bounds))
    d0 = GridSDF(np.linalg.norm(grid.vertices, axis=1) - f.init_radius, {"init_radius": f.init_radius})
    res = fit_sdf_grid(grid, d0, target, fit_cfg, weights)
    outputs = [out / "history.csv", out / "fitted_sdf.bin", out / "fitted_mesh.obj"]
    write_history_csv(outputs[0], res.history)
    write_grid_sdf(outputs[1], res.d)
    export_mesh(outputs[2], marching_tetrahedra(grid, res.d))
    first, last = res.history[0]["chamfer"], res.history[-1]["chamfer"]
    _manifest(out, "fit-sdf", cfg, outputs, initial_chamfer=first, final_chamfer=last,
              chamfer_reduction=1.0 - last / first if first > 0 else 0.0)
    print(f"chamfer {first:.6g} -> {last:.6g} ({100 * (1 - last / first):.1f}% reduction)")
    return EXIT_OK


def cmd_invert(cfg, args) -> int:
    import numpy as np

    from .config import check_invert
    from .fields import LatentCode
    from .io import write_history_csv, write_manifest
    from .objective import FitConfig, fit_latent, image_loss
    from .pipeline import LatentRenderer
    from .render import make_camera

    check_invert(cfg)
    fs, _ = _load_snapshot(args.snapshot)
    if fs.latent_dim > 64:
        from .config import ConfigError
        raise ConfigError(f"snapshot latent dimension {fs.latent_dim} exceeds the finite-difference budget of 64")
    params = _pose(cfg, fs.body, None)
    inv = cfg.invert
    base = cfg.cameras[0]
    cam = make_camera(base.radius, base.azimuth, base.elevation, base.fov, inv.width, inv.height)
    out = _prepare_out(cfg)
    dim = fs.latent_dim
    render = LatentRenderer(fs, params, cam, inv.tet_resolution, cfg.tet.margin)
    z_true = LatentCode.sample(dim, *inv.target_seeds)
    target = render(z_true)
    rng = np.random.default_rng(inv.init_seed)
    if inv.init_spread >= 0:
        z0 = LatentCode.from_vector(z_true.vector() + inv.init_spread * rng.standard_normal(2 * dim), dim)
    else:
        z0 = LatentCode.from_vector(rng.standard_normal(2 * dim), dim)
    fit_cfg = FitConfig(iterations=inv.iterations, step_size=inv.step_size, fd_step=inv.fd_step,
                        backtracks=inv.backtracks, optimizer="gd")
    res = fit_latent(target, render, z0, fit_cfg)
    initial = res.history[0]["loss"]
    outputs = [out / "history.csv", out / "latent.json"]
    write_history_csv(outputs[0], res.history)
    write_manifest(outputs[1], {"z_geo": res.latent.z_geo, "z_tex": res.latent.z_tex})
    outputs += _write_views(out, "target_", target, cam)
    outputs += _write_views(out, "fitted_", render(res.latent), cam)
    _manifest(out, "invert", cfg, outputs, initial_loss=initial, final_loss=res.loss,
              loss_ratio=res.loss / initial if initial > 0 else 0.0,
              final_check=image_loss(render(res.latent), target))
    print(f"image loss {initial:.6g} -> {res.loss:.6g} ({100 * (1 - res.loss / initial):.1f}% reduction)")
    return EXIT_OK


def cmd_retexture(cfg, args) -> int:
    from .fields import LatentCode
    from .io import export_mesh
    from .pipeline import extract, render_view

    fs, latents = _load_snapshot(args.snapshot)
    params = _pose(cfg, fs.body, args.pose)
    cams = _cameras(cfg)
    out = _prepare_out(cfg)
    outputs, views = [], {}
    for seed in cfg.retexture.texture_seeds:
        z_tex = LatentCode.sample(fs.latent_dim, 0, seed).z_tex
        lat = latents.with_texture(z_tex)
        w = fs.map_latents(lat)
        ex = extract(fs, params, w.w_geo, cfg.tet.resolution, cfg.tet.margin)
        sub = out / f"tex{seed}"
        sub.mkdir(exist_ok=True)
        outputs.append(sub / "mesh.obj")
        export_mesh(outputs[-1], ex.mesh)
        for cam in cams:
            buf = render_view(ex, fs, lat, cam)
            outputs += _write_views(sub, "", buf, cam)
            views[f"tex{seed}/{_view_name(cam)}"] = {"covered_pixels": buf.covered}
    _manifest(out, "retexture", cfg, outputs, views=views)
    print(f"retextured with seeds {cfg.retexture.texture_seeds} into {out}")
    return EXIT_OK


def cmd_gradcheck(cfg, args) -> int:
    from .config import check_body
    from .fields import FieldSet, LatentCode
    from .gradcheck import format_table, run_suite
    from .io import write_manifest
    from .objective import LossWeights

    body = check_body(cfg)
    fcfg = _field_config(cfg)
    fs = FieldSet.generate(body, fcfg, cfg.seeds.geometry, cfg.seeds.texture)
    latents = LatentCode.sample(fcfg.latent_dim, cfg.seeds.geometry, cfg.seeds.texture)
    g = cfg.gradcheck
    rows = run_suite(fs, latents, g.points, g.seed, g.tolerance, LossWeights(cfg.loss.eik, cfg.loss.ce))
    print(format_table(rows))
    if args.out or cfg.output != "out":
        out = _prepare_out(cfg)
        write_manifest(out / "gradcheck.json", {
            "rows": [{"name": r.name, "samples": r.samples, "max_rel_err": r.max_rel_err,
                      "tolerance": r.tolerance, "passed": r.passed} for r in rows]})
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
