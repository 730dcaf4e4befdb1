import pytest

from dfyp.config import OPERATORS, PRESETS, VARIANTS, ModelConfig, load, preset, resolve, to_text
from dfyp.errors import ConfigError


def test_table_presets():
    m = preset("modis")
    assert (m.in_channels, m.image_size, m.patch_size) == (9, 32, 4)
    assert m.cnn_channels == (128, 256, 256, 512, 512, 512) and m.cnn_strides == (1, 2, 1, 2, 1, 2)
    assert (m.vit_depth, m.vit_heads, m.vit_dim, m.vit_mlp) == (4, 8, 256, 512)
    assert (m.batch_size, m.max_steps) == (64, 25_000)
    s = preset("sentinel2")
    assert (s.in_channels, s.image_size, s.patch_size) == (3, 256, 16)
    assert s.cnn_channels == (32, 64, 128, 128) and s.cnn_strides == (2, 2, 2, 1)
    assert (s.vit_depth, s.vit_heads, s.vit_dim, s.vit_mlp) == (6, 6, 128, 256)
    assert set(PRESETS) == {"modis", "sentinel2", "toy"}


def test_toy_preset_is_desk_scale():
    t = preset("toy")
    assert (t.vit_depth, t.vit_dim) == (2, 16)


def test_unknown_names_rejected():
    with pytest.raises(ConfigError):
        preset("landsat")
    with pytest.raises(ConfigError):
        preset("toy", variant="bogus")
    with pytest.raises(ConfigError):
        preset("toy", operator="bogus")
    with pytest.raises(ConfigError, match="unknown key"):
        resolve("depth = 3")
    with pytest.raises(ConfigError, match="unknown key"):
        resolve("", colour="red")
    with pytest.raises(ConfigError, match="bad value"):
        resolve("epochs = many")
    with pytest.raises(ConfigError):
        resolve("just text")


def test_names_cover_the_protocol():
    assert VARIANTS == ("cnn", "vit", "fusion", "fusion+rca", "fusion+aol", "full")
    assert len(OPERATORS) == 9 and OPERATORS[0] == "aol"


def test_snapshot_round_trip(tmp_path):
    cfg = preset("modis", seed=3, lr=2.5e-4, variant="fusion+rca", standardize_inputs=True)
    text = to_text(cfg)
    assert resolve(text) == cfg
    (tmp_path / "run.txt").write_text(text)
    assert load(tmp_path / "run.txt") == cfg


def test_layering_order():
    text = "preset = toy\nepochs = 7\nlr = 0.01  # comment\n"
    cfg = resolve(text, epochs=9)
    assert (cfg.epochs, cfg.lr) == (9, 0.01)
    cfg = resolve(text, preset_name="modis")
    assert cfg.preset == "modis" and cfg.vit_dim == 256 and cfg.epochs == 7
    assert resolve("cnn_channels = 4,8\ncnn_strides = [1, 2]").cnn_channels == (4, 8)
    assert resolve("standardize_inputs = yes").standardize_inputs is True


def test_validation():
    with pytest.raises(ConfigError):
        ModelConfig(cnn_channels=(4, 8), cnn_strides=(1,))
    with pytest.raises(ConfigError):
        ModelConfig(lr=-1.0)
    with pytest.raises(ConfigError):
        ModelConfig(canny_low=0.5, canny_high=0.5)
