import pytest

from modfab.config import RunConfig
from modfab.errors import ConfigError


def test_defaults_build():
    cfg = RunConfig()
    assert cfg.train_config().epochs == 50
    assert cfg.data["split"]["mode"] == "standard"
    assert cfg.world().seed == 0


def test_override_parses_scalars():
    cfg = RunConfig().override(["train.lr=0.003", "loss.use_l2=false", "data.n_wafers=10",
                                "experiment.seeds=[4, 5]"])
    assert cfg.train_config().lr == 0.003
    assert cfg.loss_config().use_l2 is False
    assert cfg.data["data"]["n_wafers"] == 10
    assert cfg.data["experiment"]["seeds"] == [4, 5]


@pytest.mark.parametrize("item", ["train.nope=1", "nosection.x=1", "train.lr"])
def test_bad_overrides(item):
    with pytest.raises(ConfigError):
        RunConfig().override([item])


def test_load_and_unknown_keys(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  epochs: 3\nloss:\n  lambda2: 0.5\n")
    cfg = RunConfig.load(p)
    assert cfg.train_config().epochs == 3 and cfg.loss_config().lambda2 == 0.5
    p.write_text("train:\n  epoch: 3\n")
    with pytest.raises(ConfigError, match="epoch"):
        RunConfig.load(p)
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        RunConfig.load(p)
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.yaml")


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        RunConfig().override(["split.mode=random"])
    with pytest.raises(ConfigError):
        RunConfig().override(["train.epochs=0"])


def test_yaml_round_trip_and_fingerprint(tmp_path):
    cfg = RunConfig().override(["train.H=8"])
    p = tmp_path / "c.yaml"
    p.write_text(cfg.to_yaml())
    back = RunConfig.load(p)
    assert back.data == cfg.data
    assert back.fingerprint("x") == cfg.fingerprint("x")
    assert cfg.fingerprint("x") != cfg.fingerprint("y")
    assert cfg.fingerprint() != RunConfig().fingerprint()
