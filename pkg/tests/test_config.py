import pytest

from modules.config import LabConfig, config_hash, load_config, write_config
from modules.error_handler import ConfigError


def test_defaults():
    cfg = LabConfig()
    assert cfg.world.height == 32
    assert cfg.loss.pseudo_threshold == 0.9
    assert cfg.train.tail_classes == (5, 6, 7)


def test_file_then_env_then_overrides(tmp_path, monkeypatch):
    path = tmp_path / "lab.env"
    path.write_text("SEED=3\nLAMBDA_BIMAL=0.01\nUSE_TAU=false\nTAIL_CLASSES=5,7\n")
    monkeypatch.setenv("COMAL_SEED", "4")
    cfg = load_config(path, regime="bimal")
    assert cfg.train.seed == 4
    assert cfg.loss.lambda_bimal == 0.01
    assert cfg.loss.use_tau is False
    assert cfg.train.tail_classes == (5, 7)
    assert cfg.train.regime == "bimal"


def test_unknown_key(tmp_path):
    path = tmp_path / "lab.env"
    path.write_text("NOT_A_KEY=1\n")
    with pytest.raises(ConfigError):
        load_config(path, env=False)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.env", env=False)


@pytest.mark.parametrize("overrides", [
    {"height": 4},
    {"regime": "adversarial"},
    {"tau_form": "gaussian"},
    {"pseudo_threshold": 1.0},
    {"embed_dim": 30, "num_heads": 4},
    {"sigma1": 0.0},
])
def test_invalid_values(overrides):
    with pytest.raises(ConfigError):
        LabConfig().replace(**overrides)


def test_written_config_reads_back(tmp_path):
    cfg = LabConfig().replace(seed=11, tail_lambda=0.5, use_tau=False)
    path = tmp_path / "lab.env"
    write_config(cfg, path)
    again = load_config(path, env=False)
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)


def test_hash_tracks_content():
    assert config_hash(LabConfig()) == config_hash(LabConfig())
    assert config_hash(LabConfig()) != config_hash(LabConfig().replace(seed=1))
    assert len(config_hash(LabConfig())) == 16


def test_dict_round_trip():
    cfg = LabConfig().replace(tail_classes=(6,))
    assert LabConfig.from_dict(cfg.to_dict()) == cfg


def test_explicit_qprime():
    cfg = LabConfig().replace(qprime="1,1,1,1,1,1,1,1")
    assert cfg.loss.qprime_vector(8).sum() == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        LabConfig().replace(qprime="1,2")
