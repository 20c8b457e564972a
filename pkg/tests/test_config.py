import pytest

from avatarfield.config import (FULL_SCALE, ConfigError, build_config, check_body, check_invert, check_output,
                                check_pose, load_pose_file)


def test_defaults_validate():
    cfg = build_config()
    assert cfg.body == "builtin:capsule_biped"
    assert cfg.loss.eik == 0.001 and cfg.loss.ce == 0.01
    assert len(cfg.cameras) == 1 and cfg.cameras[0].radius == 2.3


def test_overrides_are_yaml_typed():
    cfg = build_config(overrides=["field.triplane_res=8", "loss.ce=0.5", "fit.optimizer=momentum",
                                  "cameras.0.width=32", "pose.beta=[0.1, 0.2]"])
    assert cfg.field.triplane_res == 8
    assert cfg.loss.ce == 0.5
    assert cfg.fit.optimizer == "momentum"
    assert cfg.cameras[0].width == 32 and cfg.cameras[0].height == 256
    assert cfg.pose.beta == [0.1, 0.2]


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("field:\n  triplane_res: 12\n  latent_dim: 4\nseeds:\n  geometry: 7\n")
    cfg = build_config(p, ["field.triplane_res=10"])
    assert cfg.field.triplane_res == 10 and cfg.field.latent_dim == 4 and cfg.seeds.geometry == 7


def test_resolution_one_message():
    with pytest.raises(ConfigError, match="triplane resolution must be >= 2"):
        build_config(overrides=["field.triplane_res=1"])


@pytest.mark.parametrize("item", ["field.bogus=1", "nope=2", "cameras.0.zoom=3"])
def test_unknown_keys_rejected(item):
    with pytest.raises(ConfigError):
        build_config(overrides=[item])


@pytest.mark.parametrize("item", ["loss.ce=-1", "cameras.0.fov=180", "tet.resolution=1",
                                  "fit.step_size=-0.5", "invert.target_seeds=[1]", "turntable=-1",
                                  "field.aggregation=max", "pose.beta=[.nan]"])
def test_bad_values_rejected(item):
    with pytest.raises(ConfigError):
        build_config(overrides=[item])


@pytest.mark.parametrize("item", ["novalue", "=3", "a=[unclosed"])
def test_malformed_override(item):
    with pytest.raises(ConfigError):
        build_config(overrides=[item])


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        build_config(tmp_path / "absent.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        build_config(tmp_path / "list.yaml")


def test_full_scale_applies_and_yields_to_overrides():
    cfg = build_config(full_scale=True, overrides=["field.triplane_res=4"])
    assert cfg.field.latent_dim == FULL_SCALE["field.latent_dim"]
    assert cfg.field.triplane_res == 4
    with pytest.raises(ConfigError, match="finite-difference"):
        check_invert(build_config(full_scale=True))


def test_missing_body_is_config_error(tmp_path):
    cfg = build_config(overrides=[f"body={tmp_path / 'none.json'}"])
    with pytest.raises(ConfigError, match="body"):
        check_body(cfg)


def test_pose_resolution(biped):
    cfg = build_config()
    rest = check_pose(cfg, biped)
    assert not rest.pose.any() and not rest.translation.any()
    n = biped.joint_count
    theta = [0.0] * (3 * n) + [0.1, 0.2, 0.3]
    params = check_pose(build_config(overrides=[f"pose.theta={theta}"]), biped)
    assert list(params.translation) == [0.1, 0.2, 0.3]
    with pytest.raises(ConfigError, match="pose"):
        check_pose(build_config(overrides=["pose.theta=[0.0, 1.0]"]), biped)


def test_pose_file_errors(tmp_path, biped):
    with pytest.raises(ConfigError, match="not found"):
        load_pose_file(tmp_path / "absent.yaml")
    (tmp_path / "p.yaml").write_text("theta: [1]\nextra: 2\n")
    with pytest.raises(ConfigError, match="unknown keys"):
        load_pose_file(tmp_path / "p.yaml")
    (tmp_path / "q.yaml").write_text("just text\n")
    with pytest.raises(ConfigError):
        load_pose_file(tmp_path / "q.yaml")


def test_output_must_be_a_directory(tmp_path):
    f = tmp_path / "file"
    f.write_text("x")
    with pytest.raises(ConfigError):
        check_output(f)
    assert check_output(tmp_path / "new" / "dir") == tmp_path / "new" / "dir"
