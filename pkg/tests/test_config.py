import pytest

from bnrobust.config import ConfigError, ExperimentConfig, parse_ensemble, parse_int_list, parse_schedule


def test_defaults_and_roundtrip(tmp_path):
    cfg = ExperimentConfig()
    assert cfg.epsilon() == 8 / 255 and cfg.widths() == [16, 32, 64]
    cfg.set("train.config_name", "bn_params")
    cfg.set("attack.epsilon", "2/255")
    cfg.set("train.augment", "false")
    path = tmp_path / "c.txt"
    path.write_text(cfg.dumps())
    again = ExperimentConfig.load(path)
    assert again == cfg and again.dumps() == cfg.dumps()
    assert again.train.augment is False


def test_loads_comments_and_errors():
    cfg = ExperimentConfig.loads("# comment\n\ndata.dataset = mnist  # trailing\nmodel.widths = 8,16\n")
    assert cfg.data.dataset == "mnist" and cfg.widths() == [8, 16]
    for bad in ("oops", "nosection = 1", "model.nokey = 1", "bogus.key = 1", "model.depth_n = three"):
        with pytest.raises(ConfigError):
            ExperimentConfig.loads(bad)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        ExperimentConfig.load("/nonexistent/config.txt")


def test_adversarial_auto():
    cfg = ExperimentConfig()
    expect = {"normal": False, "bn_only": False, "adv": True, "bn_stats": True, "bn_params": True}
    for name, adv in expect.items():
        cfg.set("train.config_name", name)
        assert cfg.is_adversarial() is adv
    cfg.set("train.adversarial", "true")
    cfg.set("train.config_name", "bn_only")
    assert cfg.is_adversarial()


def test_train_config_and_inner_attack():
    cfg = ExperimentConfig.loads("train.lr_schedule = 0:0.05,3:0.005\nattack.step_size = 1/255\ntrain.epochs = 4\n")
    tc = cfg.train_config()
    assert tc.epochs == 4 and tc.lr_at(2) == 0.05 and tc.lr_at(3) == 0.005
    assert tc.inner_attack.alpha == pytest.approx(1 / 255)
    cfg.set("train.config_name", "nope")
    with pytest.raises(ConfigError):
        cfg.train_config()


def test_parsers():
    assert parse_int_list("1, 2,3") == [1, 2, 3]
    assert parse_schedule("0:0.1,50:0.01") == [(0, 0.1), (50, 0.01)]
    with pytest.raises(ConfigError):
        parse_schedule("0-0.1")
    with pytest.raises(ConfigError):
        parse_int_list("")
    ens = parse_ensemble("pgd50x5,pgd50x5t,rs5000,fgsm", 0.1)
    assert [(s.kind, s.steps, s.restarts, s.targeted) for s in ens[:2]] == [("pgd", 50, 5, False), ("pgd", 50, 5, True)]
    assert ens[2].kind == "random_search" and ens[2].queries == 5000 and ens[3].kind == "fgsm"
    assert len({s.seed for s in ens}) == 4
    assert parse_ensemble("", 0.1) == []
    with pytest.raises(ConfigError):
        parse_ensemble("apgd", 0.1)
