import pytest

from fticir import config as configmod
from fticir.errors import ConfigError


def test_defaults_cover_every_namespace():
    spaces = {key.split(".")[0] for key in configmod.DEFAULTS}
    assert spaces == {"backbone", "inversion", "filter", "loss", "train",
                      "data", "service"}


def test_parse_assignment():
    key, value = configmod.parse_assignment("train.lr=0.001")
    assert (key, value) == ("train.lr", "0.001")
    key, value = configmod.parse_assignment("data.images = /some/dir ")
    assert (key, value) == ("data.images", "/some/dir")
    with pytest.raises(ConfigError):
        configmod.parse_assignment("train.lr")
    with pytest.raises(ConfigError):
        configmod.parse_assignment("train.made_up=3")
    # Experimental keys pass through unvalidated.
    key, _ = configmod.parse_assignment("x.anything=1")
    assert key == "x.anything"


def test_config_file_parsing(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(
        "# a comment\n"
        "\n"
        "train.lr = 0.01\n"
        "loss.tau=0.1\n"
    )
    cfg = configmod.load_config_file(cfg_file)
    assert cfg["train.lr"] == "0.01"
    assert cfg["loss.tau"] == "0.1"
    cfg_file.write_text("not an assignment\n")
    with pytest.raises(ConfigError):
        configmod.load_config_file(cfg_file)


def test_resolve_precedence(tmp_path, monkeypatch):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("train.lr = 0.5\ntrain.epochs = 3\n")
    monkeypatch.setenv(configmod.ENV_CONFIG_VAR, str(cfg_file))
    cfg = configmod.resolve_config(None, ["train.lr=0.25"])
    assert cfg["train.lr"] == "0.25"     # override beats the file
    assert cfg["train.epochs"] == "3"    # file beats defaults
    assert cfg["loss.tau"] == configmod.DEFAULTS["loss.tau"]
    monkeypatch.delenv(configmod.ENV_CONFIG_VAR)
    cfg = configmod.resolve_config(None, [])
    assert cfg["train.lr"] == configmod.DEFAULTS["train.lr"]


def test_typed_getters():
    cfg = {"train.lr": "1e-3", "train.epochs": "7", "train.ablations":
           "no_ortho, no_filter", "backbone.name": "toy",
           "service.cors_origins": "*"}
    assert configmod.get_float(cfg, "train.lr") == 1e-3
    assert configmod.get_int(cfg, "train.epochs") == 7
    assert configmod.get_str(cfg, "backbone.name") == "toy"
    assert configmod.get_str_list(cfg, "train.ablations") \
        == ["no_ortho", "no_filter"]
    assert configmod.get_str_list(cfg, "service.cors_origins") == ["*"]
    with pytest.raises(ConfigError):
        configmod.get_int(cfg, "train.lr")
    with pytest.raises(ConfigError):
        configmod.get_float({"train.lr": "abc"}, "train.lr")
    with pytest.raises(ConfigError):
        configmod.get_str({}, "train.missing")


def test_get_bool():
    assert configmod.get_bool({"x.flag": "true"}, "x.flag") is True
    assert configmod.get_bool({"x.flag": "0"}, "x.flag") is False
    with pytest.raises(ConfigError):
        configmod.get_bool({"x.flag": "maybe"}, "x.flag")
