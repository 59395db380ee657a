import pytest

from snnbayes.config import ConfigError, RunConfig, dump_config, load_config


def test_defaults():
    cfg = RunConfig()
    assert cfg.train.epochs == 30 and cfg.train.batch_size == 32
    assert cfg.model.hidden == (128, 128) and cfg.eval.mc_samples == 20
    assert cfg.resolved_lr() == 1e-3 and cfg.resolved_dropout() == 0.1
    cfg.optim.trainer = "ivon"
    assert cfg.resolved_lr() == 0.1 and cfg.resolved_dropout() == 0.0 and cfg.resolved_beta2() == 0.99999


def test_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\noptim.trainer = ivon\nmodel.hidden=64,32\nmodel.dropout_p=none\n\n"
                    "data.normalize=true\n")
    cfg = load_config(path, ["optim.lr=0.05", "train.epochs=3"])
    assert cfg.optim.trainer == "ivon" and cfg.model.hidden == (64, 32)
    assert cfg.model.dropout_p is None and cfg.data.normalize is True
    assert cfg.optim.lr == 0.05 and cfg.train.epochs == 3


@pytest.mark.parametrize("line", ["optim.lrr=1", "nosection=1", "train.epochs=three", "optim.trainer=sgd",
                                  "model.alpha=0.9", "data.normalize=maybe", "justtext"])
def test_bad_entries_are_errors(line):
    with pytest.raises(ConfigError):
        load_config(None, [line])


def test_dump_round_trip():
    cfg = load_config(None, ["optim.trainer=ivon", "slice.batch_ids=0,2", "optim.ess=12.5", "data.path=a b.txt"])
    lines = dump_config(cfg).splitlines()
    assert load_config(None, lines) == cfg


def test_dict_round_trip():
    cfg = load_config(None, ["model.hidden=16,8", "model.alpha=0.8,0.7", "train.seed=4"])
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train.epochs": "x"})
