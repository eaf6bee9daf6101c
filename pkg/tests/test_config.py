import pytest

from infkit.config import RunConfig, load_config
from infkit.errors import ConfigError


def test_defaults_without_file():
    cfg = load_config()
    assert cfg == RunConfig()
    assert cfg.policy().anchor == "stationary"


def test_values_override_defaults():
    cfg = load_config(text='[update]\ngamma = 1\nmax_steps = 7\n[selection]\ncriterion = "lowest-grad"\n')
    assert cfg.update.gamma == 1.0 and isinstance(cfg.update.gamma, float)
    assert cfg.policy().max_steps == 7
    assert cfg.criterion(0).kind == "lowest-gradients"


@pytest.mark.parametrize("text", [
    "[update]\ngama = 0.1\n",
    "[updates]\ngamma = 0.1\n",
    "[update]\nmax_steps = 'ten'\n",
    "[influence]\nrescale = 1\n",
    "[update]\nmax_steps = 1.5\n",
    "update = 3\n",
    "not toml = = \n",
])
def test_typos_and_type_errors_rejected(text):
    with pytest.raises(ConfigError):
        load_config(text=text)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_builders():
    cfg = load_config(text='[model]\nhidden = [7, 5]\n[influence]\nsamples = 0\nsolver = "lissa-cached"\n'
                           '[selection]\ncriterion = "random"\n')
    spec = cfg.model_spec(4, 3)
    assert [l.out_dim for l in spec.layers] == [7, 5, 3]
    assert cfg.lissa(1).samples is None
    assert cfg.influence_settings(1).solver == "lissa-cached"
    assert cfg.criterion(9).seed == 9
    assert cfg.train_config(4).seed == 4


def test_echo_round_trips_through_toml():
    cfg = load_config(text="[data]\nremoved_class = 3\n")
    assert cfg.to_dict()["data"]["removed_class"] == 3
