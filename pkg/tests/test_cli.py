import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from avatarfield.cli import main
from avatarfield.io import read_manifest, read_obj, read_png

SMALL_YAML = """\
field:
  triplane_res: 16
  triplane_channels: 8
  latent_dim: 8
  mapping_layers: 2
  mapping_width: 16
  decoder_width: 16
tet:
  resolution: 20
cameras:
  - width: 32
    height: 32
fit:
  resolution: 12
  iterations: 10
  target_points: 300
invert:
  iterations: 2
  tet_resolution: 12
  width: 16
  height: 16
gradcheck:
  points: 20
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.yaml").write_text(SMALL_YAML)
    assert main(["generate", "-c", str(root / "small.yaml"), "-o", str(root / "gen")]) == 0
    return root


def run(work, *argv):
    return main([argv[0], "-c", str(work / "small.yaml"), *argv[1:]])


def snap(work):
    return str(work / "gen" / "fieldset.bin")


# -- generate ---------------------------------------------------------------------

def test_generate_is_byte_identical(work, tmp_path):
    assert run(work, "generate", "-o", str(tmp_path / "again")) == 0
    assert (tmp_path / "again" / "fieldset.bin").read_bytes() == (work / "gen" / "fieldset.bin").read_bytes()
    assert (tmp_path / "again" / "manifest.json").read_bytes() == (work / "gen" / "manifest.json").read_bytes()


def test_missing_body_fails_before_output(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["generate", "--set", f"body={tmp_path / 'none.json'}", "-o", str(out)]) == 2
    assert not out.exists()
    assert "body" in capsys.readouterr().err


def test_triplane_resolution_one_rejected(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["generate", "--set", "field.triplane_res=1", "-o", str(out)]) == 2
    assert "triplane resolution must be >= 2" in capsys.readouterr().err
    assert not out.exists()


def test_unknown_config_key_is_exit_two(tmp_path):
    assert main(["generate", "--set", "field.nonsense=3", "-o", str(tmp_path / "o")]) == 2


def test_missing_snapshot_is_exit_two(tmp_path):
    assert main(["render", "-s", str(tmp_path / "none.bin"), "-o", str(tmp_path / "o")]) == 2


# -- extract ---------------------------------------------------------------------------

def test_extract_writes_mesh_and_manifest(work, tmp_path):
    out = tmp_path / "ex"
    assert run(work, "extract-mesh", "-s", snap(work), "-o", str(out), "--ply", "--dump-sdf") == 0
    V, F = read_obj(out / "mesh.obj")
    assert len(V) > 0 and len(F) > 0
    man = read_manifest(out / "manifest.json")
    assert set(man["outputs"]) == {"mesh.obj", "mesh.ply", "grid_sdf.bin"}
    assert man["stats"]["mesh_faces"] == len(F)
    out2 = tmp_path / "ex2"
    assert run(work, "extract-mesh", "-s", snap(work), "-o", str(out2), "--ply", "--dump-sdf") == 0
    for name in ("mesh.obj", "mesh.ply", "grid_sdf.bin", "manifest.json"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()


def test_extract_root_translation_shifts_vertices(work, tmp_path):
    assert run(work, "extract-mesh", "-s", snap(work), "-o", str(tmp_path / "a")) == 0
    theta = [0.0] * 6 + [0.25, -0.125, 0.5]
    pose = tmp_path / "pose.yaml"
    pose.write_text(f"theta: {theta}\n")
    assert run(work, "extract-mesh", "-s", snap(work), "-o", str(tmp_path / "b"), "--pose", str(pose)) == 0
    Va, Fa = read_obj(tmp_path / "a" / "mesh.obj")
    Vb, Fb = read_obj(tmp_path / "b" / "mesh.obj")
    np.testing.assert_array_equal(Fa, Fb)
    np.testing.assert_allclose(Vb, Va + [0.25, -0.125, 0.5], atol=1e-9)


def test_bad_pose_is_exit_two(work, tmp_path):
    pose = tmp_path / "pose.yaml"
    pose.write_text("theta: [1.0, 2.0]\n")
    assert run(work, "extract-mesh", "-s", snap(work), "-o", str(tmp_path / "o"), "--pose", str(pose)) == 2


# -- render ----------------------------------------------------------------------------

def test_turntable_endpoints_match(work, tmp_path):
    out = tmp_path / "r"
    assert run(work, "render", "-s", snap(work), "-o", str(out), "--set", "turntable=8") == 0
    man = read_manifest(out / "manifest.json")
    assert len(man["views"]) == 8
    assert len(list(out.glob("rgb_*.png"))) == 8
    # a camera at 2 pi wraps onto azimuth 0 bit for bit
    out2 = tmp_path / "r2"
    assert run(work, "render", "-s", snap(work), "-o", str(out2),
               "--set", f"cameras.0.azimuth={2 * math.pi!r}") == 0
    first = sorted(out.glob("rgb_az000.000*.png"))[0]
    assert (out2 / first.name).read_bytes() == first.read_bytes()


def test_mask_pixels_match_manifest(work, tmp_path):
    out = tmp_path / "r"
    assert run(work, "render", "-s", snap(work), "-o", str(out), "--dump-buffers") == 0
    man = read_manifest(out / "manifest.json")
    for name, view in man["views"].items():
        mask = read_png(out / f"mask_{name}.png")
        assert int((mask == 255).sum()) == view["covered_pixels"] > 0
        assert (out / f"buffer_rgb_{name}.bin").exists()
    for rel, digest in man["outputs"].items():
        import hashlib
        assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest


# -- retexture -------------------------------------------------------------------------

def test_retexture_keeps_geometry(work, tmp_path):
    out = tmp_path / "t"
    assert run(work, "retexture", "-s", snap(work), "-o", str(out)) == 0
    a, b = out / "tex2", out / "tex3"
    assert (a / "mesh.obj").read_bytes() == (b / "mesh.obj").read_bytes()
    rgb_a = sorted(a.glob("rgb_*.png"))[0]
    assert (b / rgb_a.name).read_bytes() != rgb_a.read_bytes()
    mask = rgb_a.name.replace("rgb_", "mask_")
    assert (a / mask).read_bytes() == (b / mask).read_bytes()


# -- fit, invert, gradcheck ---------------------------------------------------------------

def test_fit_sdf_reduces_chamfer(work, tmp_path):
    out = tmp_path / "f"
    assert run(work, "fit-sdf", "-o", str(out)) == 0
    man = read_manifest(out / "manifest.json")
    assert man["final_chamfer"] < man["initial_chamfer"]
    assert (out / "history.csv").read_text().startswith("iteration,")


def test_fit_divergence_is_exit_three(work, tmp_path, capsys):
    with np.errstate(all="ignore"):
        code = run(work, "fit-sdf", "-o", str(tmp_path / "f"), "--set", "fit.step_size=1e300")
    assert code == 3
    assert "numerical failure" in capsys.readouterr().err


def test_fit_target_file(work, tmp_path):
    pts = tmp_path / "pts.xyz"
    rng = np.random.default_rng(0)
    p = rng.standard_normal((200, 3))
    np.savetxt(pts, 0.6 * p / np.linalg.norm(p, axis=1, keepdims=True))
    assert run(work, "fit-sdf", "-o", str(tmp_path / "f"), "--set", f"fit.target={pts}") == 0
    assert run(work, "fit-sdf", "-o", str(tmp_path / "g"), "--set", f"fit.target={tmp_path / 'no.xyz'}") == 2


def test_invert_runs_and_improves(work, tmp_path):
    out = tmp_path / "i"
    assert run(work, "invert", "-s", snap(work), "-o", str(out)) == 0
    man = read_manifest(out / "manifest.json")
    assert man["final_loss"] <= man["initial_loss"]
    assert (out / "latent.json").exists()


def test_invert_rejects_large_latents(tmp_path):
    gen = tmp_path / "g"
    assert main(["generate", "--set", "field.latent_dim=65", "--set", "field.triplane_res=4",
                 "--set", "field.mapping_width=8", "-o", str(gen)]) == 0
    assert main(["invert", "-s", str(gen / "fieldset.bin"), "--set", "field.latent_dim=65",
                 "-o", str(tmp_path / "i")]) == 2


def test_gradcheck_exit_zero(work, tmp_path, capsys):
    assert run(work, "gradcheck", "-o", str(tmp_path / "g")) == 0
    assert capsys.readouterr().out.count("PASS") == 4
    assert read_manifest(tmp_path / "g" / "gradcheck.json")["rows"][0]["passed"]


# -- determinism across thread counts -------------------------------------------------------

def _cli(args, cwd):
    env = dict(os.environ)
    return subprocess.run([sys.executable, "-m", "avatarfield.cli", *args], cwd=cwd, env=env,
                          capture_output=True, text=True)


def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


COMMANDS = [
    ("generate", []),
    ("extract-mesh", ["--ply", "--dump-sdf"]),
    ("render", ["--dump-buffers", "--set", "turntable=2"]),
    ("fit-sdf", []),
    ("invert", []),
    ("retexture", []),
    ("gradcheck", []),
]


@pytest.mark.parametrize("command, extra", COMMANDS, ids=[c for c, _ in COMMANDS])
def test_outputs_independent_of_thread_count(work, tmp_path, command, extra):
    trees = []
    for threads in (1, 8):
        out = tmp_path / f"t{threads}"
        args = ["--threads", str(threads), command, "-c", str(work / "small.yaml"), "-o", str(out), *extra]
        if command not in ("generate", "fit-sdf", "gradcheck"):
            args += ["-s", snap(work)]
        res = _cli(args, tmp_path)
        assert res.returncode == 0, res.stderr
        trees.append(_tree(out))
    assert trees[0].keys() == trees[1].keys() and trees[0]
    for name in trees[0]:
        assert trees[0][name] == trees[1][name], name


def test_invert_default_settings_quarter_loss(tmp_path):
    # default field and inversion settings: the image loss must fall to a quarter or less
    assert main(["generate", "-o", str(tmp_path / "gen")]) == 0
    out = tmp_path / "inv"
    assert main(["invert", "-s", str(tmp_path / "gen" / "fieldset.bin"), "-o", str(out)]) == 0
    man = read_manifest(out / "manifest.json")
    assert man["final_loss"] <= 0.25 * man["initial_loss"]
