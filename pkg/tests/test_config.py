import pytest

from bevhead.config import ConfigError, RunConfig, load_config, parse_pairs, parse_text


def test_defaults_validate():
    cfg = RunConfig()
    assert cfg.train_config().strategy == "dar_switch"
    assert cfg.scene_config().x_range == (0.0, 64.0)
    assert cfg.grid().shape == (128, 128)
    assert (cfg.w_hm, cfg.w_reg, cfg.w_obj, cfg.w_iou) == (1.0, 2.0, 1.0, 1.0)
    assert (cfg.iou_th, cfg.n, cfg.k, cfg.ema_decay, cfg.alpha) == (0.6, 4, 4, 0.9, 0.5)


def test_text_round_trip_and_digest():
    cfg = RunConfig(lr=0.02, strategy="multipos", iou_branch=False)
    back = RunConfig(**parse_text(cfg.to_text()))
    assert back == cfg and back.digest() == cfg.digest()
    assert len(cfg.digest()) == 16
    assert cfg.digest() != RunConfig().digest()
    keys = [line.split(" = ")[0] for line in cfg.to_text().splitlines()]
    assert keys == sorted(keys)


def test_overrides():
    cfg = RunConfig().with_overrides(["lr=0.5", "iqp = v1", "iou_branch=off", "epochs=3"])
    assert (cfg.lr, cfg.iqp, cfg.iou_branch, cfg.epochs) == (0.5, "v1", False, 3)
    assert RunConfig().with_overrides({"seed": 4}).seed == 4


@pytest.mark.parametrize(
    "pairs, needle",
    [
        (["lr"], "key=value"),
        (["colour=red"], "unknown config key"),
        (["epochs=three"], "epochs"),
        (["iou_branch=maybe"], "iou_branch"),
        (["strategy=best"], "strategy"),
        (["iqp=v3"], "v3"),
        (["lr=nan"], "finite"),
        (["n_train=-1"], "n_train"),
        (["match_iou=2"], "match_iou"),
        (["channels=3"], "channels"),
        (["dar_groups=theta"], "xy"),
    ],
)
def test_rejections(pairs, needle):
    with pytest.raises(ConfigError, match=needle):
        RunConfig().with_overrides(pairs)


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nlr = 0.03  # inline\n\nstrategy = baseline\n")
    cfg = load_config(path, ["seed=9"])
    assert (cfg.lr, cfg.strategy, cfg.seed) == (0.03, "baseline", 9)
    path.write_text("lr 0.03\n")
    with pytest.raises(ConfigError, match=":1:"):
        load_config(path)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.cfg")


def test_parse_pairs_dict():
    assert parse_pairs({"lr": 0.1, "iou_branch": True}) == {"lr": 0.1, "iou_branch": True}
