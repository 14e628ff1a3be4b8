import pytest
from hypothesis import given, strategies as st

from permakey.config import (
    ConfigError,
    ExperimentConfig,
    load_config,
    parse_config,
    save_config,
    serialize_config,
)


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    assert cfg.method == "permakey"
    assert cfg.layers == (0, 1)


def test_round_trip_defaults():
    cfg = ExperimentConfig()
    assert parse_config(serialize_config(cfg)) == cfg


def test_round_trip_non_defaults():
    cfg = ExperimentConfig(method="transporter", k=6, layers=(0, 1, 2),
                           sigma=0.2, encoder="gnn", distractor=True,
                           test_env_seeds=(5, 9))
    assert parse_config(serialize_config(cfg)) == cfg


@given(k=st.integers(1, 25), sigma=st.floats(0.01, 1.0),
       gamma=st.floats(0.5, 0.999), steps=st.integers(1, 10**6))
def test_round_trip_property(k, sigma, gamma, steps):
    cfg = ExperimentConfig(k=k, sigma=sigma, gamma=gamma, agent_steps=steps)
    assert parse_config(serialize_config(cfg)) == cfg


def test_parse_ignores_comments_and_blanks():
    cfg = parse_config("# comment\n\nk = 7  # trailing\n")
    assert cfg.k == 7


def test_parse_unknown_key_raises():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("frobnicate = 1\n")


def test_parse_duplicate_key_raises():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("k = 1\nk = 2\n")


def test_parse_type_mismatch_raises():
    with pytest.raises(ConfigError):
        parse_config("k = banana\n")
    with pytest.raises(ConfigError):
        parse_config("distractor = yes\n")


def test_val_seed_collision_rejected():
    with pytest.raises(ConfigError, match="validation"):
        ExperimentConfig(train_env_seed=3, val_env_seed=3)


def test_test_seed_collisions_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig(train_env_seed=2, test_env_seeds=(2, 5))
    with pytest.raises(ConfigError):
        ExperimentConfig(val_env_seed=5, test_env_seeds=(5,))
    with pytest.raises(ConfigError, match="duplicate"):
        ExperimentConfig(test_env_seeds=(4, 4))


def test_bad_method_encoder_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig(method="magic")
    with pytest.raises(ConfigError):
        ExperimentConfig(encoder="transformer")


def test_bad_layers_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig(layers=(0, 4))


def test_file_round_trip(tmp_path):
    cfg = ExperimentConfig(k=5, layers=(2, 3))
    path = tmp_path / "exp.cfg"
    save_config(cfg, path)
    assert load_config(path) == cfg
