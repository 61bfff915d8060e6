import pytest

from campfire.config import config_echo, parse_run_config, preset_path
from campfire.errors import ConfigError


def test_defaults_without_file():
    cfg = parse_run_config(None)
    assert cfg.model.patch_size == 14
    assert cfg.loss.lambda_s == 0.75 and cfg.loss.lambda_l == 0.25
    assert cfg.optim.lr_peak == 5e-4 and cfg.optim.weight_decay == 5e-3
    assert cfg.channels.id_channels == ("Nu", "Ac", "M")
    assert cfg.channels.heldout_channels == ("ER", "cyRNA")


def test_desk_preset_parses():
    cfg = parse_run_config(preset_path("desk"))
    assert cfg.synth.n_target_plates == 8
    assert cfg.split.n_ood_plates == 2
    assert cfg.optim.total_epochs == 10


def test_full_scale_preset_values():
    cfg = parse_run_config(preset_path("full"))
    assert cfg.split.n_heldout_compounds == 60 and cfg.split.n_ood_plates == 5
    assert (cfg.split.plates_train, cfg.split.plates_val, cfg.split.plates_test) == (14, 2, 4)
    assert cfg.model.enc_dim == 1024 and cfg.model.enc_depth == 24 and cfg.model.enc_heads == 16
    assert cfg.model.dec_dim == 512 and cfg.model.dec_depth == 8
    assert cfg.model.mask_fraction == 0.8 and cfg.model.sync_mask is True
    assert (cfg.loss.lambda_s, cfg.loss.lambda_h, cfg.loss.lambda_l, cfg.loss.lambda_f) == (0.75, 0.0, 0.25, 0.0)
    assert cfg.loss.l == 0.3
    assert cfg.optim.lr_peak == 5e-4 and cfg.optim.weight_decay == 5e-3
    assert cfg.optim.warmup_epochs == 20 and cfg.optim.total_epochs == 50
    assert cfg.optim.batch_size == 400


def test_unknown_section_and_key_rejected(tmp_path):
    bad1 = tmp_path / "a.ini"
    bad1.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError):
        parse_run_config(bad1)
    bad2 = tmp_path / "b.ini"
    bad2.write_text("[model]\npatchsize = 14\n")
    with pytest.raises(ConfigError):
        parse_run_config(bad2)


def test_type_conversion_and_errors(tmp_path):
    good = tmp_path / "g.ini"
    good.write_text("[model]\nsync_mask = false\nenc_dim = 128\n[channels]\nid_channels = Nu, M\n")
    cfg = parse_run_config(good)
    assert cfg.model.sync_mask is False and cfg.model.enc_dim == 128
    assert cfg.channels.id_channels == ("Nu", "M")
    bad = tmp_path / "b.ini"
    bad.write_text("[model]\nenc_dim = many\n")
    with pytest.raises(ConfigError):
        parse_run_config(bad)
    badbool = tmp_path / "c.ini"
    badbool.write_text("[model]\nsync_mask = maybe\n")
    with pytest.raises(ConfigError):
        parse_run_config(badbool)


def test_invalid_values_fail_dataclass_validation(tmp_path):
    bad = tmp_path / "m.ini"
    bad.write_text("[model]\nmask_fraction = 1.5\n")
    with pytest.raises(ValueError):
        parse_run_config(bad)


def test_missing_file_and_preset():
    with pytest.raises(ConfigError):
        parse_run_config("/nonexistent/path.ini")
    with pytest.raises(ConfigError):
        preset_path("galactic")


def test_config_echo_is_json_compatible():
    import json

    echo = config_echo(parse_run_config(preset_path("desk")))
    parsed = json.loads(json.dumps(echo))
    assert parsed["optim"]["total_epochs"] == 10
