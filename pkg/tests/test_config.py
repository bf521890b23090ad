import pytest
from hypothesis import given, settings, strategies as st

from jointtok.config import ConfigError, PRESETS, load_config, parse_overrides, resolve, save_config


def test_desk_default_validates():
    cfg = load_config()
    assert cfg.preset == "desk"
    assert cfg.image_size == 32 and cfg.num_tokens == 16 and cfg.codebook_size == 64


@pytest.mark.parametrize("name,ntp,nested", [("S", 0.1, 0.5), ("B", 0.1, 0.5), ("L", 0.1, 0.5), ("H", 0.01, 1.0)])
def test_paper_presets(name, ntp, nested):
    cfg = load_config(preset=name)
    assert cfg.lambda_ntp == ntp and cfg.nested_dropout == nested
    assert (cfg.lr, cfg.lr_min, cfg.ema_decay) == (1e-4, 1e-6, 0.9999)
    assert (cfg.beta2_tokenizer, cfg.beta2_ar) == (0.999, 0.95)
    assert (cfg.lambda_gan, cfg.lambda_lecam, cfg.lambda_reg) == (0.1, 0.05, 1e-3)
    assert (cfg.num_tokens, cfg.codebook_size, cfg.batch_size) == (256, 4096, 256)


def test_layer_order(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("preset: L\nnested_dropout: 0.25\nlr: 3.0e-4\n")
    cfg = load_config(path, overrides={"lr": "5e-4"})
    assert cfg.ar_layers == PRESETS["L"]["ar_layers"]
    assert cfg.nested_dropout == 0.25
    assert cfg.lr == 5e-4


def test_override_nested_dropout_zero():
    assert load_config(overrides=parse_overrides(["nested_dropout=0"])).nested_dropout == 0.0


def test_unknown_key_suggests():
    with pytest.raises(ConfigError, match="lambda_ntp"):
        load_config(overrides={"lambda_ntpp": 0.1})


@pytest.mark.parametrize("overrides", [
    {"nested_dropout": 1.5}, {"lr": -1.0}, {"ntp_backprop": "maybe"}, {"codebook_size": 2.5},
    {"alignment_mode": "direct", "num_tokens": 13}, {"patch_size": 5}, {"preset": "XL"},
])
def test_invalid_values_rejected(overrides):
    with pytest.raises(ConfigError):
        load_config(overrides=overrides)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        parse_overrides(["lr"])


def test_save_round_trip(tmp_path):
    cfg = load_config(overrides={"seed": 3, "alignment_mode": "direct"})
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


OVERRIDE_VALUES = {
    "lr": st.sampled_from([1e-4, 2e-4, 1e-3]),
    "seed": st.integers(0, 50),
    "nested_dropout": st.sampled_from([0.0, 0.5, 1.0]),
    "codebook_size": st.sampled_from([32, 64, 128]),
    "decoder_align": st.booleans(),
    "lambda_ntp": st.sampled_from([0.0, 0.01, 0.1]),
}
layer = st.fixed_dictionaries({}, optional=OVERRIDE_VALUES)


@settings(max_examples=60, deadline=None)
@given(layer, layer, layer)
def test_resolution_associative_last_writer_wins(a, b, c):
    assert resolve(a, b, c) == resolve({**a, **b}, c) == resolve(a, {**b, **c})
    merged = resolve(a, b, c)
    for key, value in {**a, **b, **c}.items():
        assert getattr(merged, key) == value
